//! Retrieval metrics: rank, acc@q, AUIR and ranking percentile.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};

/// Squared distance of every gallery entry to `a`, accumulated in f64.
pub fn squared_distances(a: &[f32], gallery: &EmbeddingTable) -> Vec<f64> {
    (0..gallery.len())
        .map(|j| {
            gallery
                .vector(j)
                .iter()
                .zip(a)
                .map(|(&e, &x)| {
                    let d = e as f64 - x as f64;
                    d * d
                })
                .sum()
        })
        .collect()
}

/// Entries at least as close as the target, the target itself included.
pub fn rank_from_distances(d: &[f64], target: usize) -> usize {
    let dt = d[target];
    d.iter().filter(|&&x| x <= dt).count()
}

pub fn rank_of(a: &[f32], target_id: &str, gallery: &EmbeddingTable) -> Result<usize> {
    let t = gallery.require(target_id)?;
    Ok(rank_from_distances(&squared_distances(a, gallery), t))
}

pub fn percentile_from_rank(rank: usize, n: usize) -> f64 {
    (n - rank) as f64 / n as f64
}

pub fn ranking_percentile(a: &[f32], target_id: &str, gallery: &EmbeddingTable) -> Result<f64> {
    Ok(percentile_from_rank(
        rank_of(a, target_id, gallery)?,
        gallery.len(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub item_id: String,
    /// One rank per stage, the last one for the complete sketch.
    pub ranks: Vec<usize>,
    pub gallery_size: usize,
}

impl RetrievalResult {
    pub fn new(item_id: impl Into<String>, ranks: Vec<usize>, gallery_size: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Input(
                "a retrieval result needs at least one stage".into(),
            ));
        }
        if let Some(r) = ranks.iter().find(|&&r| r < 1 || r > gallery_size) {
            return Err(Error::Input(format!("rank {r} outside 1..={gallery_size}")));
        }
        Ok(Self {
            item_id: item_id.into(),
            ranks,
            gallery_size,
        })
    }

    pub fn final_rank(&self) -> usize {
        *self.ranks.last().expect("non-empty")
    }
}

pub fn acc_at_q(results: &[RetrievalResult], q: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.final_rank() <= q).count() as f64 / results.len() as f64
}

/// Mean inverse rank over stages, in percent.
pub fn auir(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

pub fn dataset_auir(results: &[RetrievalResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| auir(&r.ranks)).sum::<f64>() / results.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "acc@1")]
    pub acc1: f64,
    #[serde(rename = "acc@5")]
    pub acc5: f64,
    #[serde(rename = "acc@10")]
    pub acc10: f64,
    pub auir: f64,
    /// Averaged over every stage of every item.
    pub mean_percentile: f64,
}

pub fn summarize(results: &[RetrievalResult]) -> Summary {
    let rows: Vec<f64> = results
        .iter()
        .flat_map(|r| {
            r.ranks
                .iter()
                .map(|&k| percentile_from_rank(k, r.gallery_size))
        })
        .collect();
    Summary {
        acc1: acc_at_q(results, 1),
        acc5: acc_at_q(results, 5),
        acc10: acc_at_q(results, 10),
        auir: dataset_auir(results),
        mean_percentile: if rows.is_empty() {
            0.0
        } else {
            rows.iter().sum::<f64>() / rows.len() as f64
        },
    }
}

pub const CSV_HEADER: &str = "item_id,stage,completion_degree,rank,inv_rank,percentile";

/// One row per (item, stage), item order preserved, stages 1-based.
pub fn to_csv(results: &[RetrievalResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let stages = r.ranks.len();
        for (i, &rank) in r.ranks.iter().enumerate() {
            let stage = i + 1;
            writeln!(
                s,
                "{},{},{:.6},{},{:.6},{:.6}",
                r.item_id,
                stage,
                stage as f64 / stages as f64,
                rank,
                1.0 / rank as f64,
                percentile_from_rank(rank, r.gallery_size)
            )
            .unwrap();
        }
    }
    s
}

pub fn emit_csv(results: &[RetrievalResult], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(results)).map_err(|e| Error::io(path, e))
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(summary)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
