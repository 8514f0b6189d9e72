use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `(x, y)` in normalized coordinates, `[0,1]²`, y pointing down.
pub type Point = [f64; 2];
pub type Polyline = Vec<Point>;

/// Ordered polylines in drawing order.
///
/// Sequences built through [`StrokeSequence::new`] or [`StrokeSequence::push`]
/// have at least two points per polyline. The only exception is the final
/// fragment of a partial stage, which may have been cut after its first point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrokeSequence(Vec<Polyline>);

pub fn validate_polyline(line: &[Point]) -> Result<()> {
    if line.len() < 2 {
        return Err(Error::Input(format!(
            "a polyline needs at least 2 points, got {}",
            line.len()
        )));
    }
    if let Some(p) = line
        .iter()
        .find(|p| !p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)))
    {
        return Err(Error::Input(format!("point {p:?} outside [0,1]²")));
    }
    Ok(())
}

impl StrokeSequence {
    pub fn new(strokes: Vec<Polyline>) -> Result<Self> {
        for s in &strokes {
            validate_polyline(s)?;
        }
        Ok(Self(strokes))
    }

    pub fn push(&mut self, line: Polyline) -> Result<()> {
        validate_polyline(&line)?;
        self.0.push(line);
        Ok(())
    }

    pub fn strokes(&self) -> &[Polyline] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    /// The first `n` points of the flattened drawing order, regrouped into polylines.
    pub fn prefix_points(&self, n: usize) -> Self {
        let mut left = n;
        let mut out = Vec::new();
        for line in &self.0 {
            if left == 0 {
                break;
            }
            let take = left.min(line.len());
            out.push(line[..take].to_vec());
            left -= take;
        }
        Self(out)
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self(
            self.0
                .iter()
                .map(|l| l.iter().map(|&p| f(p)).collect())
                .collect(),
        )
    }
}

/// Split a drawing into `stages` cumulative prefixes: stage `s` (1-based)
/// holds the first `⌈s·L/S⌉` points, `L` being the total point count.
pub fn partial_stages(strokes: &StrokeSequence, stages: usize) -> Result<Vec<StrokeSequence>> {
    if stages < 2 {
        return Err(Error::Config(format!(
            "need at least 2 stages, got {stages}"
        )));
    }
    let total = strokes.num_points();
    if total == 0 {
        return Err(Error::Input("cannot stage an empty stroke sequence".into()));
    }
    Ok((1..=stages)
        .map(|s| strokes.prefix_points((s * total).div_ceil(stages)))
        .collect())
}

/// Cumulative prefixes by whole polylines: stage `s` holds the first `s`
/// strokes. This is what an interactive client produces, one stroke at a time.
pub fn stroke_stages(strokes: &StrokeSequence) -> Vec<StrokeSequence> {
    (1..=strokes.len())
        .map(|s| StrokeSequence(strokes.0[..s].to_vec()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyStrokes {
    pub strokes: StrokeSequence,
    pub is_noise: Vec<bool>,
}

pub const NOISE_MAX_LENGTH: f64 = 0.15;

/// After each genuine stroke, with probability `p`, insert one short random
/// polyline of 2–4 points and total length at most [`NOISE_MAX_LENGTH`].
pub fn inject_noise_strokes(strokes: &StrokeSequence, p: f64, seed: u64) -> Result<NoisyStrokes> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "noise probability {p} outside [0,1]"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    let mut flags = Vec::new();
    for line in strokes.strokes() {
        out.push(line.clone());
        flags.push(false);
        if p > 0.0 && rng.random_bool(p) {
            out.push(random_scribble(&mut rng));
            flags.push(true);
        }
    }
    Ok(NoisyStrokes {
        strokes: StrokeSequence(out),
        is_noise: flags,
    })
}

fn random_scribble(rng: &mut impl Rng) -> Polyline {
    let n = rng.random_range(2..=4usize);
    let step = NOISE_MAX_LENGTH / (n - 1) as f64;
    let mut p = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
    let mut line = vec![p];
    for _ in 1..n {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.3..=1.0) * step;
        // Clamping towards the square only ever shortens a segment.
        p = [
            (p[0] + len * angle.cos()).clamp(0.0, 1.0),
            (p[1] + len * angle.sin()).clamp(0.0, 1.0),
        ];
        line.push(p);
    }
    line
}

pub fn polyline_length(line: &[Point]) -> f64 {
    line.windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}
