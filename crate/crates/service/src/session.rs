use std::time::Instant;

use darp_core::agent::{sample_location, GreedyState};
use darp_core::rng::{self, Rng};
use darp_core::sketchgen::{render_sketch, Polyline, StrokeSequence};
use darp_core::{Error, Result};

use crate::model::{RankingResponse, RetrievalModel};

/// One user's drawing: accumulated strokes and the agent state advanced once
/// per submitted stroke.
pub struct Session {
    strokes: StrokeSequence,
    state: GreedyState<f32>,
    target: Option<String>,
    last: Option<RankingResponse>,
    rng: Rng,
    pub touched: Instant,
}

impl Session {
    pub fn new(model: &RetrievalModel, target: Option<String>, seed: u64) -> Result<Self> {
        if let Some(t) = &target {
            model.gallery.require(t)?;
        }
        Ok(Self {
            strokes: StrokeSequence::default(),
            state: model.agent.greedy_start(),
            target,
            last: None,
            rng: rng::seeded(seed),
            touched: Instant::now(),
        })
    }

    pub fn steps(&self) -> usize {
        self.state.t
    }

    pub fn last(&self) -> Option<&RankingResponse> {
        self.last.as_ref()
    }

    /// Append a stroke, run one agent step on the re-rendered sketch and
    /// rank the gallery. With `sample`, the next location is drawn around
    /// the head-1 mean instead of taken as is.
    pub fn submit(
        &mut self,
        model: &RetrievalModel,
        line: Polyline,
        sample: bool,
    ) -> Result<RankingResponse> {
        self.strokes.push(line)?;
        let raster = render_sketch(&self.strokes, model.width, model.height, model.dilation);
        let a = model.agent.greedy_step(&mut self.state, &raster)?;
        if sample {
            let s = model.opts.sample_sigma;
            self.state.v = sample_location(self.state.v, [s, s], &mut self.rng)?.v;
        }
        let resp = model.ranking(&a, self.target.as_deref(), &self.state.trace)?;
        self.last = Some(resp.clone());
        self.touched = Instant::now();
        Ok(resp)
    }

    pub fn ranking(&self) -> Result<&RankingResponse> {
        self.last
            .as_ref()
            .ok_or_else(|| Error::State("no stroke has been submitted yet".into()))
    }
}
