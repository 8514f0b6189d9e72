//! Triplet image/sketch embedding network.
//!
//! A shared-weight MLP maps a flattened raster to a 64-d unit vector:
//! two affine+relu feature layers, a linear embedding head, and a soft
//! attention gate `softmax(W_att e_raw + b_att)` applied elementwise before
//! L2 normalisation.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::tensor::{
    activation_backward_in_place, activation_in_place, dot, matvec_into, matvec_t_acc, outer_acc,
};
use crate::numeric::{
    Activation, Checkpoint, OptimizerKind, OptimizerState, ParamId, ParamSet, Scalar, Tensor,
};
use crate::rng;
use crate::sketchgen::{Dataset, Raster, SketchItem, Split};

pub const EMBED_DIM: usize = 64;
pub const HIDDEN: [usize; 2] = [256, 128];
pub const EMBEDDINGS_TENSOR: &str = "embeddings";

const LAYERS: [&str; 3] = ["l1", "l2", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<T: Scalar = f32> {
    pub params: ParamSet<T>,
    input_dim: usize,
    w: [ParamId; 4],
    b: [ParamId; 4],
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EmbedCache<T> {
    nz: Vec<(usize, T)>,
    h1: Vec<T>,
    h2: Vec<T>,
    raw: Vec<T>,
    gate: Vec<T>,
    norm: T,
    pub e: Vec<T>,
}

impl<T: Scalar> Embedder<T> {
    pub fn new(input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("embedder input must be non-empty".into()));
        }
        let mut params = ParamSet::new();
        let dims = [input_dim, HIDDEN[0], HIDDEN[1], EMBED_DIM, EMBED_DIM];
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (i, name) in LAYERS.iter().chain(["attention"].iter()).enumerate() {
            w.push(params.insert_weight(
                format!("embedder/{name}/w"),
                dims[i + 1],
                dims[i],
                rng,
            )?);
            b.push(params.insert_bias(format!("embedder/{name}/b"), dims[i + 1])?);
        }
        Ok(Self {
            params,
            input_dim,
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
        })
    }

    /// Rebuild around an existing parameter set (e.g. one loaded from disk).
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for name in LAYERS.iter().chain(["attention"].iter()) {
            w.push(params.require(&format!("embedder/{name}/w"))?);
            b.push(params.require(&format!("embedder/{name}/b"))?);
        }
        let input_dim = params.entry(w[0]).value.cols();
        let out = Self {
            params,
            input_dim,
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
        };
        let expect = [
            [HIDDEN[0], input_dim],
            [HIDDEN[1], HIDDEN[0]],
            [EMBED_DIM, HIDDEN[1]],
            [EMBED_DIM, EMBED_DIM],
        ];
        for (id, shape) in out.w.iter().zip(expect) {
            if out.params.entry(*id).value.shape() != shape {
                return Err(Error::Dimension(format!(
                    "`{}` has shape {:?}, expected {shape:?}",
                    out.params.entry(*id).name,
                    out.params.entry(*id).value.shape()
                )));
            }
        }
        Ok(out)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn cast<U: Scalar>(&self) -> Embedder<U> {
        Embedder {
            params: self.params.cast(),
            input_dim: self.input_dim,
            w: self.w,
            b: self.b,
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<EmbedCache<T>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "embedder expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let p = &self.params;
        // Rasters are mostly background, so the first layer works column-wise
        // over the non-zero inputs only.
        let nz: Vec<(usize, T)> = x
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(j, &v)| (j, v))
            .collect();
        let w1 = p.value(self.w[0]);
        let mut h1 = p.value(self.b[0]).to_vec();
        for (r, out) in h1.iter_mut().enumerate() {
            let row = &w1[r * self.input_dim..(r + 1) * self.input_dim];
            let mut s = T::zero();
            for &(j, v) in &nz {
                s += row[j] * v;
            }
            *out += s;
        }
        activation_in_place(Activation::Relu, &mut h1);

        let mut h2 = vec![T::zero(); HIDDEN[1]];
        matvec_into(p.value(self.w[1]), &h1, Some(p.value(self.b[1])), &mut h2);
        activation_in_place(Activation::Relu, &mut h2);

        let mut raw = vec![T::zero(); EMBED_DIM];
        matvec_into(p.value(self.w[2]), &h2, Some(p.value(self.b[2])), &mut raw);

        let mut gate = vec![T::zero(); EMBED_DIM];
        matvec_into(
            p.value(self.w[3]),
            &raw,
            Some(p.value(self.b[3])),
            &mut gate,
        );
        activation_in_place(Activation::Softmax, &mut gate);

        let u: Vec<T> = raw.iter().zip(&gate).map(|(&r, &g)| r * g).collect();
        let norm = dot(&u, &u).sqrt();
        let e = if norm > T::of(1e-12) {
            u.iter().map(|&v| v / norm).collect()
        } else {
            warn!("embedding collapsed to zero; using the uniform unit vector");
            vec![T::one() / T::of((EMBED_DIM as f64).sqrt()); EMBED_DIM]
        };
        Ok(EmbedCache {
            nz,
            h1,
            h2,
            raw,
            gate,
            norm,
            e,
        })
    }

    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x)?.e)
    }

    /// Accumulate `∂L/∂θ` into the parameter gradients given `∂L/∂e`.
    pub fn backward(&mut self, cache: &EmbedCache<T>, de: &[T]) {
        if cache.norm <= T::of(1e-12) {
            return;
        }
        let e = &cache.e;
        let proj = dot(e, de);
        let du: Vec<T> = de
            .iter()
            .zip(e)
            .map(|(&d, &ei)| (d - ei * proj) / cache.norm)
            .collect();

        let mut dgate: Vec<T> = du.iter().zip(&cache.raw).map(|(&d, &r)| d * r).collect();
        activation_backward_in_place(Activation::Softmax, &cache.gate, &mut dgate);
        let mut draw: Vec<T> = du.iter().zip(&cache.gate).map(|(&d, &g)| d * g).collect();
        matvec_t_acc(self.params.value(self.w[3]), &dgate, &mut draw);
        outer_acc(self.params.grad_mut(self.w[3]), &dgate, &cache.raw);
        add(self.params.grad_mut(self.b[3]), &dgate);

        let mut dh2 = vec![T::zero(); HIDDEN[1]];
        matvec_t_acc(self.params.value(self.w[2]), &draw, &mut dh2);
        outer_acc(self.params.grad_mut(self.w[2]), &draw, &cache.h2);
        add(self.params.grad_mut(self.b[2]), &draw);
        activation_backward_in_place(Activation::Relu, &cache.h2, &mut dh2);

        let mut dh1 = vec![T::zero(); HIDDEN[0]];
        matvec_t_acc(self.params.value(self.w[1]), &dh2, &mut dh1);
        outer_acc(self.params.grad_mut(self.w[1]), &dh2, &cache.h1);
        add(self.params.grad_mut(self.b[1]), &dh2);
        activation_backward_in_place(Activation::Relu, &cache.h1, &mut dh1);

        let cols = self.input_dim;
        let gw1 = self.params.grad_mut(self.w[0]);
        for (r, &d) in dh1.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            let row = &mut gw1[r * cols..(r + 1) * cols];
            for &(j, v) in &cache.nz {
                row[j] += d * v;
            }
        }
        add(self.params.grad_mut(self.b[0]), &dh1);
    }
}

fn add<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

/// Inputs of one triplet, already flattened.
pub struct TripletInput<'a, T> {
    pub anchor: &'a [T],
    pub positive: &'a [T],
    pub negative: &'a [T],
}

/// Mean triplet loss over `batch`; when `accumulate` is set the gradient is
/// added to the embedder's parameter gradients. Returns the loss and the number
/// of triplets with an active hinge.
pub fn triplet_batch<T: Scalar>(
    model: &mut Embedder<T>,
    batch: &[TripletInput<'_, T>],
    margin: f64,
    accumulate: bool,
) -> Result<(f64, usize)> {
    let n = T::of(batch.len() as f64);
    let mut total = 0.0;
    let mut active = 0;
    for tr in batch {
        let ca = model.forward(tr.anchor)?;
        let cp = model.forward(tr.positive)?;
        let cn = model.forward(tr.negative)?;
        let dp = squared_distance(&ca.e, &cp.e);
        let dn = squared_distance(&ca.e, &cn.e);
        let l = T::of(margin) + dp - dn;
        if l <= T::zero() {
            continue;
        }
        total += l.f64();
        active += 1;
        if accumulate {
            let two = T::of(2.0) / n;
            let ga: Vec<T> =
                cn.e.iter()
                    .zip(&cp.e)
                    .map(|(&en, &ep)| two * (en - ep))
                    .collect();
            let gp: Vec<T> =
                ca.e.iter()
                    .zip(&cp.e)
                    .map(|(&a, &p)| -two * (a - p))
                    .collect();
            let gn: Vec<T> =
                ca.e.iter()
                    .zip(&cn.e)
                    .map(|(&a, &q)| two * (a - q))
                    .collect();
            model.backward(&ca, &ga);
            model.backward(&cp, &gp);
            model.backward(&cn, &gn);
        }
    }
    Ok((total / batch.len().max(1) as f64, active))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub epochs: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Sketch dilation radius used for anchors.
    pub dilation: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            margin: 0.3,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            dilation: crate::sketchgen::DEFAULT_DILATION,
        }
    }
}

/// Frozen item-id → unit embedding map, in a fixed id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * EMBED_DIM {
            return Err(Error::Dimension(format!(
                "{} ids need {} values, got {}",
                ids.len(),
                ids.len() * EMBED_DIM,
                data.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate embedding id `{id}`")));
            }
        }
        Ok(Self { ids, data, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.position(id)
            .ok_or_else(|| Error::Lookup(format!("no embedding for item `{id}`")))
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.vector(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(EMBED_DIM))
    }

    /// The entries for `ids`, in that order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out_ids = Vec::new();
        let mut data = Vec::new();
        for id in ids {
            let i = self.require(id)?;
            out_ids.push(id.to_string());
            data.extend_from_slice(self.vector(i));
        }
        Self::new(out_ids, data)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.len().max(1), EMBED_DIM],
            if self.is_empty() {
                vec![0.0; EMBED_DIM]
            } else {
                self.data.clone()
            },
        )
        .expect("shape matches data")
    }

    pub fn from_tensor(ids: Vec<String>, t: &Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != EMBED_DIM || t.shape()[0] != ids.len() {
            return Err(Error::Dimension(format!(
                "embedding tensor {:?} does not match {} ids",
                t.shape(),
                ids.len()
            )));
        }
        Self::new(ids, t.data().to_vec())
    }

    /// Store as the `embeddings` tensor plus the id order.
    pub fn write_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(EMBEDDINGS_TENSOR, self.to_tensor());
        ck.set_meta("embedding_ids", serde_json::to_string(&self.ids)?);
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let ids: Vec<String> = serde_json::from_str(ck.require_meta("embedding_ids")?)?;
        Self::from_tensor(ids, ck.tensor(EMBEDDINGS_TENSOR)?)
    }

    /// JSON array of ids, in tensor row order.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.ids)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

pub fn raster_input(r: &Raster) -> &[f32] {
    r.pixels()
}

/// Embed every item image with a frozen model.
pub fn embedding_table(model: &Embedder<f32>, items: &[SketchItem]) -> Result<EmbeddingTable> {
    let mut ids = Vec::with_capacity(items.len());
    let mut data = Vec::with_capacity(items.len() * EMBED_DIM);
    for it in items {
        ids.push(it.id.clone());
        data.extend(model.embed(raster_input(&it.image))?);
    }
    EmbeddingTable::new(ids, data)
}

#[derive(Clone, Debug)]
pub struct EmbedderRun {
    pub model: Embedder<f32>,
    pub table: EmbeddingTable,
    /// Mean triplet loss per epoch.
    pub losses: Vec<f64>,
}

/// Train on the train split with uniformly sampled negatives, then freeze the
/// model and embed every image in the dataset.
pub fn train_embedder(data: &Dataset, cfg: &EmbedderConfig) -> Result<EmbedderRun> {
    if data.num_classes() < 2 {
        return Err(Error::Config(
            "embedder training needs at least 2 classes".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be positive".into()));
    }
    if !(cfg.margin > 0.0) {
        return Err(Error::Config(format!(
            "margin must be positive, got {}",
            cfg.margin
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut init_rng = rng::derived(cfg.seed, 0);
    let mut model = Embedder::<f32>::new(data.width * data.height, &mut init_rng)?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.optimizer)?;

    let train: Vec<&SketchItem> = data
        .items
        .iter()
        .filter(|i| i.split == Split::Train)
        .collect();
    if train.len() < 2 {
        return Err(Error::Input(
            "embedder training needs at least 2 train items".into(),
        ));
    }
    let sketches: Vec<Raster> = train
        .iter()
        .map(|it| it.full_sketch(cfg.dilation))
        .collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut rng = rng::derived(cfg.seed, 1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TripletInput<'_, f32>> = chunk
                .iter()
                .map(|&a| {
                    let mut n = rng.random_range(0..train.len() - 1);
                    if n >= a {
                        n += 1;
                    }
                    TripletInput {
                        anchor: sketches[a].pixels(),
                        positive: train[a].image.pixels(),
                        negative: train[n].image.pixels(),
                    }
                })
                .collect();
            let (loss, active) = triplet_batch(&mut model, &batch, cfg.margin, true)?;
            epoch_loss += loss * chunk.len() as f64;
            if active > 0 {
                opt.step(&mut model.params)?;
            } else {
                model.params.zero_grads();
            }
        }
        losses.push(epoch_loss / train.len() as f64);
    }
    let table = embedding_table(&model, &data.items)?;
    Ok(EmbedderRun {
        model,
        table,
        losses,
    })
}

/// An untrained model and the table it produces.
pub fn initial_embedder(data: &Dataset, seed: u64) -> Result<EmbedderRun> {
    let mut init_rng = rng::derived(seed, 0);
    let model = Embedder::<f32>::new(data.width * data.height, &mut init_rng)?;
    let table = embedding_table(&model, &data.items)?;
    Ok(EmbedderRun {
        model,
        table,
        losses: Vec::new(),
    })
}

impl EmbedderRun {
    pub fn to_checkpoint(&self, margin: f64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_params(&self.model.params);
        self.table.write_into(&mut ck)?;
        ck.set_meta("kind", "embedder");
        ck.set_meta("margin", margin.to_string());
        ck.set_meta("input_dim", self.model.input_dim().to_string());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut params = ParamSet::<f32>::new();
        for (name, t) in &ck.tensors {
            if name.starts_with("embedder/") {
                params.insert(name.clone(), t.clone())?;
            }
        }
        let model = Embedder::from_params(reorder(params)?)?;
        let table = EmbeddingTable::read_from(ck)?;
        Ok(Self {
            model,
            table,
            losses: Vec::new(),
        })
    }
}

/// Checkpoints store tensors sorted by name; restore the construction order.
fn reorder(params: ParamSet<f32>) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for name in LAYERS.iter().chain(["attention"].iter()) {
        for part in ["w", "b"] {
            let key = format!("embedder/{name}/{part}");
            let p = params
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            out.insert(key, p.value.clone())?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions};
    use crate::sketchgen::{generate_dataset, GenConfig};

    fn small_model(seed: u64) -> Embedder<f64> {
        Embedder::new(64, &mut rng::seeded(seed)).unwrap()
    }

    fn random_input(seed: u64, len: usize) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..len)
            .map(|_| {
                if r.random_bool(0.4) {
                    r.random_range(0.0..1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_loss(0.2, 0.9, 0.3), 0.0);
        assert!((triplet_loss(0.5, 0.4, 0.3) - 0.4).abs() < 1e-12);
        assert!((triplet_loss(0.7, 0.7, 0.3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn output_is_unit_and_gate_sums_to_one() {
        let m = small_model(1);
        let x = random_input(2, 64);
        let c = m.forward(&x).unwrap();
        assert!((dot(&c.e, &c.e) - 1.0).abs() < 1e-12);
        assert!((c.gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.e, m.embed(&x).unwrap());
        assert!(m.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_embedding_falls_back_to_uniform() {
        let mut m = small_model(1);
        for p in m.params.iter_mut() {
            p.value.fill(0.0);
        }
        let e = m.embed(&random_input(3, 64)).unwrap();
        assert!(e.iter().all(|&v| (v - 0.125).abs() < 1e-12));
    }

    #[test]
    fn branches_share_parameters() {
        // The anchor, positive and negative paths are the same forward call.
        let m = small_model(5);
        let x = random_input(6, 64);
        let batch = [TripletInput {
            anchor: &x,
            positive: &x,
            negative: &x,
        }];
        let mut probe = m.clone();
        let (loss, _) = triplet_batch(&mut probe, &batch, 0.3, false).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut m = small_model(seed);
            let xs: Vec<Vec<f64>> = (0..6).map(|k| random_input(100 * seed + k, 64)).collect();
            let batch: Vec<_> = (0..2)
                .map(|k| TripletInput {
                    anchor: &xs[3 * k][..],
                    positive: &xs[3 * k + 1][..],
                    negative: &xs[3 * k + 2][..],
                })
                .collect();
            let margin = 2.0;
            triplet_batch(&mut m, &batch, margin, true).unwrap();
            let shape = m.clone();
            let report = finite_diff_check(
                |p| {
                    let mut probe = shape.clone();
                    probe.params = p.clone();
                    triplet_batch(&mut probe, &batch, margin, false).unwrap().0
                },
                &m.params,
                &GradCheckOptions {
                    max_coords_per_tensor: Some(40),
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn inactive_hinge_leaves_gradients_zero() {
        let mut m = small_model(9);
        let x = random_input(1, 64);
        let y = random_input(2, 64);
        let batch = [TripletInput {
            anchor: &x,
            positive: &x,
            negative: &y,
        }];
        // margin small enough that 0 + margin − d_neg < 0
        let (loss, active) = triplet_batch(&mut m, &batch, 1e-9, true).unwrap();
        assert_eq!((loss, active), (0.0, 0));
        assert!(m
            .params
            .iter()
            .all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn table_round_trips_through_checkpoint() {
        let data = generate_dataset(&GenConfig {
            n_classes: 3,
            items_per_class: 2,
            seed: 2,
            ..GenConfig::default()
        })
        .unwrap();
        let run = initial_embedder(&data, 4).unwrap();
        for (_, e) in run.table.iter() {
            let n: f32 = e.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let ck = run.to_checkpoint(0.3).unwrap();
        let back =
            EmbedderRun::from_checkpoint(&Checkpoint::read_from(&ck.to_bytes()[..]).unwrap())
                .unwrap();
        assert_eq!(back.table, run.table);
        let again = embedding_table(&back.model, &data.items).unwrap();
        assert_eq!(again, run.table);
        assert!(run.table.require("nope").is_err());
    }

    #[test]
    fn training_separates_positives_from_negatives() {
        let data = generate_dataset(&GenConfig {
            n_classes: 8,
            items_per_class: 4,
            seed: 11,
            ..GenConfig::default()
        })
        .unwrap();
        let run = train_embedder(
            &data,
            &EmbedderConfig {
                epochs: 15,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(run.losses.last().unwrap() < &run.losses[0]);
        let test: Vec<_> = data
            .items
            .iter()
            .filter(|i| i.split == Split::Test)
            .collect();
        let (mut pos, mut neg) = (0.0, 0.0);
        for (k, it) in test.iter().enumerate() {
            let a = run.model.embed(it.full_sketch(1).pixels()).unwrap();
            pos += squared_distance(&a, run.table.get(&it.id).unwrap());
            let other = test[(k + 1) % test.len()];
            neg += squared_distance(&a, run.table.get(&other.id).unwrap());
        }
        assert!(pos < neg, "pos {pos} neg {neg}");
    }
}
