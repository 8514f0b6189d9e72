use std::collections::HashMap;
use std::path::Path;

use darp_core::agent::{agent_to_pixel, Agent, Location};
use darp_core::embedder::EmbeddingTable;
use darp_core::metrics::{percentile_from_rank, rank_from_distances, squared_distances};
use darp_core::numeric::Checkpoint;
use darp_core::sketchgen::{Dataset, Raster, SketchItem, SplitSelector, DEFAULT_DILATION};
use darp_core::trainer::TrainConfig;
use darp_core::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct ModelOptions {
    /// Entries returned per ranking.
    pub top_q: usize,
    /// Falls back to the value stored with the checkpoint.
    pub dilation: Option<usize>,
    /// Exploration width for sessions that ask for sampled locations.
    pub sample_sigma: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            top_q: 10,
            dilation: None,
            sample_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankEntry {
    pub item_id: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingResponse {
    pub rank_list: Vec<RankEntry>,
    /// Only known when the session names its target.
    pub percentile: Option<f64>,
    pub glimpse_trace: Vec<[isize; 2]>,
}

/// Frozen agent, gallery embeddings and gallery images shared by all sessions.
pub struct RetrievalModel {
    pub agent: Agent<f32>,
    pub gallery: EmbeddingTable,
    images: HashMap<String, Raster>,
    pub width: usize,
    pub height: usize,
    pub dilation: usize,
    pub opts: ModelOptions,
}

impl RetrievalModel {
    pub fn new(
        agent: Agent<f32>,
        table: &EmbeddingTable,
        items: &[&SketchItem],
        opts: ModelOptions,
    ) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("the gallery is empty".into()))?;
        if opts.top_q == 0 {
            return Err(Error::Config("top_q must be at least 1".into()));
        }
        let gallery = table.subset(items.iter().map(|i| i.id.as_str()))?;
        let images = items
            .iter()
            .map(|i| (i.id.clone(), i.image.clone()))
            .collect();
        Ok(Self {
            agent,
            gallery,
            images,
            width: first.image.width(),
            height: first.image.height(),
            dilation: opts.dilation.unwrap_or(DEFAULT_DILATION),
            opts,
        })
    }

    /// Load an agent checkpoint (which carries its embedding table) and the
    /// dataset whose `split` items form the gallery.
    pub fn from_files(
        checkpoint: &Path,
        data: &Path,
        split: SplitSelector,
        mut opts: ModelOptions,
    ) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let agent = Agent::read_from(&ck)?;
        let table = EmbeddingTable::read_from(&ck)?;
        if opts.dilation.is_none() {
            if let Some(cfg) = ck.meta("train_config") {
                let cfg: TrainConfig = serde_json::from_str(cfg)?;
                opts.dilation = Some(cfg.dilation);
            }
        }
        let dataset = Dataset::load(data)?;
        let items = dataset.select(split);
        Self::new(agent, &table, &items, opts)
    }

    pub fn image_png(&self, id: &str) -> Option<Result<Vec<u8>>> {
        self.images.get(id).map(|r| r.to_png())
    }

    /// Gallery sorted by distance to `a` (ties keep gallery order), cut to `top_q`.
    pub fn ranking(
        &self,
        a: &[f32],
        target: Option<&str>,
        trace: &[Location],
    ) -> Result<RankingResponse> {
        let d = squared_distances(a, &self.gallery);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
        let rank_list = order
            .iter()
            .take(self.opts.top_q)
            .map(|&i| RankEntry {
                item_id: self.gallery.ids()[i].clone(),
                distance: d[i],
            })
            .collect();
        let percentile = match target {
            Some(t) => {
                let idx = self.gallery.require(t)?;
                Some(percentile_from_rank(rank_from_distances(&d, idx), d.len()))
            }
            None => None,
        };
        let glimpse_trace = trace
            .iter()
            .map(|v| {
                [
                    agent_to_pixel(v[0], self.width),
                    agent_to_pixel(v[1], self.height),
                ]
            })
            .collect();
        Ok(RankingResponse {
            rank_list,
            percentile,
            glimpse_trace,
        })
    }
}
