//! Recurrent attention agent: retina sensor, glimpse network, RNN core,
//! action head and a K-head Gaussian locator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedder::EMBED_DIM;
use crate::error::{Error, Result};
use crate::numeric::tensor::{
    activation_backward_in_place, activation_in_place, dot, matvec_into, matvec_t_acc, outer_acc,
};
use crate::numeric::{Activation, Checkpoint, ParamId, ParamSet, Scalar, Tensor};
use crate::sketchgen::Raster;

pub const HIDDEN_DIM: usize = 256;
pub const GLIMPSE_DIM: usize = 128;
pub const WHAT_DIM: usize = 128;
pub const WHERE_DIM: usize = 128;
pub const ACTION_DIM: usize = EMBED_DIM;
pub const H0_STD: f64 = 0.1;
pub const H0_TENSOR: &str = "rnn/h0";

pub type Location<T = f64> = [T; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlimpseConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub scale_factor: f64,
}

impl Default for GlimpseConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            depth: 1,
            scale_factor: 1.0,
        }
    }
}

impl GlimpseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::Config(
                "glimpse patch_size must be at least 2".into(),
            ));
        }
        if self.depth < 1 {
            return Err(Error::Config("glimpse depth must be at least 1".into()));
        }
        if !(self.scale_factor >= 1.0) {
            return Err(Error::Config(
                "glimpse scale_factor must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn retina_len(&self) -> usize {
        self.depth * self.patch_size * self.patch_size
    }

    fn crop_side(&self, d: usize) -> usize {
        (self.patch_size as f64 * self.scale_factor.powi(d as i32)).round() as usize
    }
}

/// Agent coordinate in `[−1,1]` → nearest pixel index.
pub fn agent_to_pixel(v: f64, extent: usize) -> isize {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * (extent as f64 - 1.0)).round() as isize
}

pub fn pixel_to_agent(p: usize, extent: usize) -> f64 {
    2.0 * p as f64 / (extent as f64 - 1.0) - 1.0
}

/// Area-averaging weights mapping `src` samples onto `dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(src))
                .filter_map(|j| {
                    let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Multi-scale retina crop around `v`, zero-padded outside the raster, every
/// scale area-averaged down to `patch_size²` and concatenated.
pub fn extract_retina<T: Scalar>(raster: &Raster, v: Location, cfg: &GlimpseConfig) -> Vec<T> {
    let (w, h) = (raster.width(), raster.height());
    let cx = agent_to_pixel(v[0], w);
    let cy = agent_to_pixel(v[1], h);
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(cfg.retina_len());
    for d in 0..cfg.depth {
        let side = cfg.crop_side(d);
        let x0 = cx - (side / 2) as isize;
        let y0 = cy - (side / 2) as isize;
        if side == p {
            for r in 0..p {
                for c in 0..p {
                    out.push(T::of(
                        raster.get_padded(x0 + c as isize, y0 + r as isize) as f64
                    ));
                }
            }
            continue;
        }
        let wts = area_weights(side, p);
        for wr in &wts {
            for wc in &wts {
                let mut s = 0.0;
                for &(r, a) in wr {
                    for &(c, b) in wc {
                        s += a * b * raster.get_padded(x0 + c as isize, y0 + r as isize) as f64;
                    }
                }
                out.push(T::of(s));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub glimpse: GlimpseConfig,
    pub heads: usize,
    /// Project the action output onto the unit sphere.
    pub normalize_action: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            glimpse: GlimpseConfig::default(),
            heads: 6,
            normalize_action: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    rho_w: ParamId,
    rho_b: ParamId,
    loc_w: ParamId,
    loc_b: ParamId,
    what_w: ParamId,
    where_w: ParamId,
    out_b: ParamId,
    w_hh: ParamId,
    w_gh: ParamId,
    b_h: ParamId,
    act_w: ParamId,
    act_b: ParamId,
    heads: Vec<(ParamId, ParamId)>,
}

impl Ids {
    fn resolve<T: Scalar>(p: &ParamSet<T>, heads: usize) -> Result<Self> {
        Ok(Self {
            rho_w: p.require("glimpse/rho_w")?,
            rho_b: p.require("glimpse/rho_b")?,
            loc_w: p.require("glimpse/loc_w")?,
            loc_b: p.require("glimpse/loc_b")?,
            what_w: p.require("glimpse/what_w")?,
            where_w: p.require("glimpse/where_w")?,
            out_b: p.require("glimpse/out_b")?,
            w_hh: p.require("rnn/w_hh")?,
            w_gh: p.require("rnn/w_gh")?,
            b_h: p.require("rnn/b")?,
            act_w: p.require("action/w")?,
            act_b: p.require("action/b")?,
            heads: (1..=heads)
                .map(|k| {
                    Ok((
                        p.require(&head_name(k, "w"))?,
                        p.require(&head_name(k, "b"))?,
                    ))
                })
                .collect::<Result<_>>()?,
        })
    }
}

pub fn head_name(k: usize, part: &str) -> String {
    format!("locator/head{k}/{part}")
}

/// Which parameter group a name belongs to.
pub fn is_locator_param(name: &str) -> bool {
    name.starts_with("locator/")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent<T: Scalar = f32> {
    pub params: ParamSet<T>,
    pub cfg: AgentConfig,
    pub h0: Vec<T>,
    ids: Ids,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseCache<T> {
    pub rho: Vec<T>,
    pub v: Location<T>,
    pub h_rho: Vec<T>,
    pub h_v: Vec<T>,
    pub g: Vec<T>,
}

/// Everything one forward step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache<T> {
    pub glimpse: GlimpseCache<T>,
    pub h_prev: Vec<T>,
    pub h: Vec<T>,
    a_raw: Vec<T>,
    pub a: Vec<T>,
}

fn add<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

impl<T: Scalar> Agent<T> {
    pub fn new(cfg: AgentConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.glimpse.validate()?;
        if cfg.heads < 1 {
            return Err(Error::Config("the locator needs at least one head".into()));
        }
        let mut p = ParamSet::new();
        p.insert_weight("glimpse/rho_w", WHAT_DIM, cfg.glimpse.retina_len(), rng)?;
        p.insert_bias("glimpse/rho_b", WHAT_DIM)?;
        p.insert_weight("glimpse/loc_w", WHERE_DIM, 2, rng)?;
        p.insert_bias("glimpse/loc_b", WHERE_DIM)?;
        p.insert_weight("glimpse/what_w", GLIMPSE_DIM, WHAT_DIM, rng)?;
        p.insert_weight("glimpse/where_w", GLIMPSE_DIM, WHERE_DIM, rng)?;
        p.insert_bias("glimpse/out_b", GLIMPSE_DIM)?;
        p.insert_weight("rnn/w_hh", HIDDEN_DIM, HIDDEN_DIM, rng)?;
        p.insert_weight("rnn/w_gh", HIDDEN_DIM, GLIMPSE_DIM, rng)?;
        p.insert_bias("rnn/b", HIDDEN_DIM)?;
        p.insert_weight("action/w", ACTION_DIM, HIDDEN_DIM, rng)?;
        p.insert_bias("action/b", ACTION_DIM)?;
        for k in 1..=cfg.heads {
            p.insert_weight(head_name(k, "w"), 2, HIDDEN_DIM, rng)?;
            p.insert_bias(head_name(k, "b"), 2)?;
        }
        let h0 = (0..HIDDEN_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(H0_STD * z)
            })
            .collect();
        let ids = Ids::resolve(&p, cfg.heads)?;
        Ok(Self {
            params: p,
            cfg,
            h0,
            ids,
        })
    }

    pub fn heads(&self) -> usize {
        self.cfg.heads
    }

    pub fn cast<U: Scalar>(&self) -> Agent<U> {
        Agent {
            params: self.params.cast(),
            cfg: self.cfg,
            h0: self.h0.iter().map(|v| U::of(v.f64())).collect(),
            ids: self.ids.clone(),
        }
    }

    pub fn glimpse_forward(&self, rho: Vec<T>, v: Location<T>) -> Result<GlimpseCache<T>> {
        if rho.len() != self.cfg.glimpse.retina_len() {
            return Err(Error::Dimension(format!(
                "retina has {} entries, expected {}",
                rho.len(),
                self.cfg.glimpse.retina_len()
            )));
        }
        let p = &self.params;
        let i = &self.ids;
        let mut h_rho = vec![T::zero(); WHAT_DIM];
        matvec_into(p.value(i.rho_w), &rho, Some(p.value(i.rho_b)), &mut h_rho);
        activation_in_place(Activation::Relu, &mut h_rho);
        let mut h_v = vec![T::zero(); WHERE_DIM];
        matvec_into(p.value(i.loc_w), &v, Some(p.value(i.loc_b)), &mut h_v);
        activation_in_place(Activation::Relu, &mut h_v);
        let mut g = vec![T::zero(); GLIMPSE_DIM];
        matvec_into(p.value(i.what_w), &h_rho, Some(p.value(i.out_b)), &mut g);
        let mut tmp = vec![T::zero(); GLIMPSE_DIM];
        matvec_into(p.value(i.where_w), &h_v, None, &mut tmp);
        add(&mut g, &tmp);
        activation_in_place(Activation::Relu, &mut g);
        Ok(GlimpseCache {
            rho,
            v,
            h_rho,
            h_v,
            g,
        })
    }

    /// `dg` is the gradient with respect to the glimpse output `g`.
    pub fn glimpse_backward(&mut self, c: &GlimpseCache<T>, dg: &[T]) {
        let i = self.ids.clone();
        let p = &mut self.params;
        let mut dz = dg.to_vec();
        activation_backward_in_place(Activation::Relu, &c.g, &mut dz);
        outer_acc(p.grad_mut(i.what_w), &dz, &c.h_rho);
        outer_acc(p.grad_mut(i.where_w), &dz, &c.h_v);
        add(p.grad_mut(i.out_b), &dz);

        let mut dh_rho = vec![T::zero(); WHAT_DIM];
        matvec_t_acc(p.value(i.what_w), &dz, &mut dh_rho);
        activation_backward_in_place(Activation::Relu, &c.h_rho, &mut dh_rho);
        outer_acc(p.grad_mut(i.rho_w), &dh_rho, &c.rho);
        add(p.grad_mut(i.rho_b), &dh_rho);

        let mut dh_v = vec![T::zero(); WHERE_DIM];
        matvec_t_acc(p.value(i.where_w), &dz, &mut dh_v);
        activation_backward_in_place(Activation::Relu, &c.h_v, &mut dh_v);
        outer_acc(p.grad_mut(i.loc_w), &dh_v, &c.v);
        add(p.grad_mut(i.loc_b), &dh_v);
    }

    pub fn rnn_step(&self, h_prev: &[T], g: &[T]) -> Vec<T> {
        let p = &self.params;
        let mut h = vec![T::zero(); HIDDEN_DIM];
        matvec_into(
            p.value(self.ids.w_hh),
            h_prev,
            Some(p.value(self.ids.b_h)),
            &mut h,
        );
        let mut tmp = vec![T::zero(); HIDDEN_DIM];
        matvec_into(p.value(self.ids.w_gh), g, None, &mut tmp);
        add(&mut h, &tmp);
        activation_in_place(Activation::Relu, &mut h);
        h
    }

    /// Returns `(∂L/∂h_prev, ∂L/∂g)` and accumulates the RNN weight gradients.
    pub fn rnn_backward(&mut self, h_prev: &[T], g: &[T], h: &[T], dh: &[T]) -> (Vec<T>, Vec<T>) {
        let i = self.ids.clone();
        let p = &mut self.params;
        let mut dz = dh.to_vec();
        activation_backward_in_place(Activation::Relu, h, &mut dz);
        outer_acc(p.grad_mut(i.w_hh), &dz, h_prev);
        outer_acc(p.grad_mut(i.w_gh), &dz, g);
        add(p.grad_mut(i.b_h), &dz);
        let mut dh_prev = vec![T::zero(); HIDDEN_DIM];
        matvec_t_acc(p.value(i.w_hh), &dz, &mut dh_prev);
        let mut dg = vec![T::zero(); GLIMPSE_DIM];
        matvec_t_acc(p.value(i.w_gh), &dz, &mut dg);
        (dh_prev, dg)
    }

    /// `(a_raw, a)`; the two coincide unless actions are normalised.
    fn action_parts(&self, h: &[T]) -> (Vec<T>, Vec<T>) {
        let mut a = vec![T::zero(); ACTION_DIM];
        matvec_into(
            self.params.value(self.ids.act_w),
            h,
            Some(self.params.value(self.ids.act_b)),
            &mut a,
        );
        if self.cfg.normalize_action {
            let n = dot(&a, &a).sqrt().max(T::of(1e-12));
            let unit = a.iter().map(|&x| x / n).collect();
            (a, unit)
        } else {
            (a.clone(), a)
        }
    }

    pub fn action_forward(&self, h: &[T]) -> Vec<T> {
        self.action_parts(h).1
    }

    fn action_backward(&mut self, h: &[T], a_raw: &[T], a: &[T], da: &[T]) -> Vec<T> {
        let draw: Vec<T> = if self.cfg.normalize_action {
            let n = dot(a_raw, a_raw).sqrt().max(T::of(1e-12));
            let proj = dot(a, da);
            da.iter()
                .zip(a)
                .map(|(&d, &u)| (d - u * proj) / n)
                .collect()
        } else {
            da.to_vec()
        };
        let i = self.ids.clone();
        outer_acc(self.params.grad_mut(i.act_w), &draw, h);
        add(self.params.grad_mut(i.act_b), &draw);
        let mut dh = vec![T::zero(); HIDDEN_DIM];
        matvec_t_acc(self.params.value(i.act_w), &draw, &mut dh);
        dh
    }

    fn head(&self, k: usize) -> Result<(ParamId, ParamId)> {
        if k == 0 || k > self.cfg.heads {
            return Err(Error::Index(format!(
                "locator head {k} outside 1..={}",
                self.cfg.heads
            )));
        }
        Ok(self.ids.heads[k - 1])
    }

    /// `tanh(W_k h + b_k)` for the 1-based head `k`.
    pub fn locator_mean(&self, h: &[T], k: usize) -> Result<Location<T>> {
        let (w, b) = self.head(k)?;
        let mut mu = [T::zero(); 2];
        matvec_into(self.params.value(w), h, Some(self.params.value(b)), &mut mu);
        activation_in_place(Activation::Tanh, &mut mu);
        Ok(mu)
    }

    /// Accumulate `dmu ⊙ (1 − μ²) ⊗ h` into head `k`.
    pub fn locator_backward(
        &mut self,
        h: &[T],
        mu: Location<T>,
        dmu: Location<T>,
        k: usize,
    ) -> Result<()> {
        let (w, b) = self.head(k)?;
        let mut dz = dmu;
        activation_backward_in_place(Activation::Tanh, &mu, &mut dz);
        outer_acc(self.params.grad_mut(w), &dz, h);
        add(self.params.grad_mut(b), &dz);
        Ok(())
    }

    /// Look at `raster` at `v`, advance the state and predict an embedding.
    pub fn step(&self, raster: &Raster, v: Location, h_prev: &[T]) -> Result<StepCache<T>> {
        let rho = extract_retina(raster, v, &self.cfg.glimpse);
        self.step_from_retina(rho, [T::of(v[0]), T::of(v[1])], h_prev)
    }

    pub fn step_from_retina(
        &self,
        rho: Vec<T>,
        v: Location<T>,
        h_prev: &[T],
    ) -> Result<StepCache<T>> {
        let glimpse = self.glimpse_forward(rho, v)?;
        let h = self.rnn_step(h_prev, &glimpse.g);
        let (a_raw, a) = self.action_parts(&h);
        Ok(StepCache {
            glimpse,
            h_prev: h_prev.to_vec(),
            h,
            a_raw,
            a,
        })
    }

    /// Backpropagation through time over one episode given `∂L/∂a_t` per
    /// step. Locations are treated as constants, so nothing reaches the
    /// locator heads.
    pub fn backward_episode(&mut self, steps: &[StepCache<T>], da: &[Vec<T>]) {
        let mut carry = vec![T::zero(); HIDDEN_DIM];
        for (s, d) in steps.iter().zip(da).rev() {
            let mut dh = self.action_backward(&s.h, &s.a_raw, &s.a, d);
            add(&mut dh, &carry);
            let (dh_prev, dg) = self.rnn_backward(&s.h_prev, &s.glimpse.g, &s.h, &dh);
            self.glimpse_backward(&s.glimpse, &dg);
            carry = dh_prev;
        }
    }

    pub fn greedy_start(&self) -> GreedyState<T> {
        GreedyState {
            h: self.h0.clone(),
            v: [0.0, 0.0],
            t: 0,
            trace: Vec::new(),
        }
    }

    /// One greedy step: glimpse at the current location, advance, then move
    /// to the mean of head 1. Returns the predicted embedding.
    pub fn greedy_step(&self, st: &mut GreedyState<T>, raster: &Raster) -> Result<Vec<T>> {
        let c = self.step(raster, st.v, &st.h)?;
        st.trace.push(st.v);
        let mu = self.locator_mean(&c.h, 1)?;
        st.v = [mu[0].f64(), mu[1].f64()];
        st.h = c.h;
        st.t += 1;
        Ok(c.a)
    }

    /// Predicted embedding after each of the given stage rasters.
    pub fn greedy_rollout(&self, stages: &[Raster]) -> Result<Vec<Vec<T>>> {
        let mut st = self.greedy_start();
        stages
            .iter()
            .map(|r| self.greedy_step(&mut st, r))
            .collect()
    }
}

impl Agent<f32> {
    pub fn write_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert_params(&self.params);
        ck.insert(H0_TENSOR, Tensor::vector(self.h0.clone()));
        ck.set_meta("agent_config", serde_json::to_string(&self.cfg)?);
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let cfg: AgentConfig = serde_json::from_str(ck.require_meta("agent_config")?)?;
        let mut fresh = Agent::<f32>::new(cfg, &mut crate::rng::seeded(0))?;
        ck.load_params(&mut fresh.params)?;
        let h0 = ck.tensor(H0_TENSOR)?;
        if h0.len() != HIDDEN_DIM {
            return Err(Error::Format(format!(
                "`{H0_TENSOR}` has {} entries",
                h0.len()
            )));
        }
        fresh.h0 = h0.data().to_vec();
        Ok(fresh)
    }
}

/// Per-session recurrent state for greedy inference.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyState<T> {
    pub h: Vec<T>,
    pub v: Location,
    pub t: usize,
    /// Locations attended so far, one per step.
    pub trace: Vec<Location>,
}

/// A location draw and the Gaussian score at the unclamped sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationSample {
    pub v_raw: Location,
    pub v: Location,
    /// `∂ log π / ∂μ = (v_raw − μ)/σ²`.
    pub score: Location,
}

pub fn gaussian_score(v_raw: Location, mu: Location, sigma: Location) -> Location {
    [
        (v_raw[0] - mu[0]) / (sigma[0] * sigma[0]),
        (v_raw[1] - mu[1]) / (sigma[1] * sigma[1]),
    ]
}

pub fn gaussian_log_density(v_raw: Location, mu: Location, sigma: Location) -> f64 {
    (0..2)
        .map(|i| {
            let z = (v_raw[i] - mu[i]) / sigma[i];
            -0.5 * z * z - sigma[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

pub fn sample_location(
    mu: Location,
    sigma: Location,
    rng: &mut impl Rng,
) -> Result<LocationSample> {
    if !(sigma[0] > 0.0 && sigma[1] > 0.0) {
        return Err(Error::Config(format!("σ must be positive, got {sigma:?}")));
    }
    let z0: f64 = StandardNormal.sample(rng);
    let z1: f64 = StandardNormal.sample(rng);
    let v_raw = [mu[0] + sigma[0] * z0, mu[1] + sigma[1] * z1];
    Ok(LocationSample {
        v_raw,
        v: [v_raw[0].clamp(-1.0, 1.0), v_raw[1].clamp(-1.0, 1.0)],
        score: gaussian_score(v_raw, mu, sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions};
    use crate::rng;
    use proptest::prelude::*;

    /// Biases are randomised so that no unit sits exactly on a relu kink.
    fn agent(seed: u64, heads: usize) -> Agent<f64> {
        let mut r = rng::seeded(seed);
        let mut a = Agent::new(
            AgentConfig {
                heads,
                ..Default::default()
            },
            &mut r,
        )
        .unwrap();
        for p in a.params.iter_mut().filter(|p| p.value.shape().len() == 1) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = r.random_range(-0.1..0.1));
        }
        a
    }

    fn random_raster(seed: u64) -> Raster {
        let mut r = rng::seeded(seed);
        let px = (0..64 * 64)
            .map(|_| {
                if r.random_bool(0.3) {
                    r.random_range(0.0..=1.0f32)
                } else {
                    0.0
                }
            })
            .collect();
        Raster::from_pixels(64, 64, px).unwrap()
    }

    #[test]
    fn retina_of_blank_is_zero() {
        let r = Raster::new(64, 64);
        let rho: Vec<f64> = extract_retina(&r, [0.3, -0.7], &GlimpseConfig::default());
        assert_eq!(rho.len(), 64);
        assert!(rho.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn retina_sees_one_center_pixel() {
        let mut r = Raster::new(64, 64);
        let c = agent_to_pixel(0.0, 64) as usize;
        r.set(c, c, 1.0);
        let rho: Vec<f64> = extract_retina(&r, [0.0, 0.0], &GlimpseConfig::default());
        assert_eq!(rho.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(rho[4 * 8 + 4], 1.0);
    }

    #[test]
    fn corner_retina_is_padded() {
        let r = Raster::from_pixels(64, 64, vec![1.0; 64 * 64]).unwrap();
        let rho: Vec<f64> = extract_retina(&r, [-1.0, -1.0], &GlimpseConfig::default());
        for row in 0..8 {
            for col in 0..8 {
                let expect = if row >= 4 && col >= 4 { 1.0 } else { 0.0 };
                assert_eq!(rho[row * 8 + col], expect, "({row},{col})");
            }
        }
    }

    #[test]
    fn coarser_scales_average_area() {
        let r = Raster::from_pixels(64, 64, vec![1.0; 64 * 64]).unwrap();
        let cfg = GlimpseConfig {
            patch_size: 8,
            depth: 3,
            scale_factor: 2.0,
        };
        let rho: Vec<f64> = extract_retina(&r, [0.0, 0.0], &cfg);
        assert_eq!(rho.len(), 192);
        assert!(rho[..128].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // the 32-pixel crop reaches the border on the top/left by 16−31 pixels
        let fine_ok = rho[128..].iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v));
        assert!(fine_ok);
        let w = area_weights(12, 8);
        for row in &w {
            assert!((row.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_round_trip() {
        for p in 0..64 {
            assert_eq!(agent_to_pixel(pixel_to_agent(p, 64), 64), p as isize);
        }
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut a = agent(1, 2);
        for p in a.params.iter_mut() {
            p.value.fill(0.0);
        }
        let c = a
            .step(&random_raster(1), [0.2, 0.1], &a.h0.clone())
            .unwrap();
        assert!(c.glimpse.g.iter().all(|&v| v == 0.0));
        assert!(c.h.iter().all(|&v| v == 0.0));
        assert!(c.a.iter().all(|&v| v == 0.0));
        assert_eq!(a.locator_mean(&c.h, 2).unwrap(), [0.0, 0.0]);
        assert!(matches!(a.locator_mean(&c.h, 3), Err(Error::Index(_))));
        assert!(matches!(a.locator_mean(&c.h, 0), Err(Error::Index(_))));
    }

    #[test]
    fn action_is_affine() {
        let a = agent(2, 1);
        let h1: Vec<f64> = (0..HIDDEN_DIM).map(|i| (i as f64).sin()).collect();
        let h2: Vec<f64> = (0..HIDDEN_DIM).map(|i| (i as f64 * 0.3).cos()).collect();
        let sum: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| x + y).collect();
        let b = a.params.get("action/b").unwrap().value.data().to_vec();
        let lhs = a.action_forward(&sum);
        let (y1, y2) = (a.action_forward(&h1), a.action_forward(&h2));
        for i in 0..ACTION_DIM {
            assert!((lhs[i] - (y1[i] + y2[i] - b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn supervised_loss_examples() {
        let e: Vec<f64> = (0..64).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let mut a = e.clone();
        assert_eq!(crate::embedder::squared_distance(&a, &e), 0.0);
        a[0] += 0.1;
        assert!((crate::embedder::squared_distance(&a, &e) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn gaussian_score_example_and_fd() {
        let s = gaussian_score([0.5, 0.0], [0.0, 0.0], [0.5, 0.5]);
        assert_eq!(s, [2.0, 0.0]);
        let eps = 1e-6;
        let fd = (gaussian_log_density([0.5, 0.0], [eps, 0.0], [0.5, 0.5])
            - gaussian_log_density([0.5, 0.0], [-eps, 0.0], [0.5, 0.5]))
            / (2.0 * eps);
        assert!((fd - 2.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_statistics() {
        let mut r = rng::seeded(3);
        assert!(sample_location([0.0, 0.0], [0.0, 0.1], &mut r).is_err());
        let tiny = sample_location([0.3, -0.2], [1e-9, 1e-9], &mut r).unwrap();
        assert!((tiny.v_raw[0] - 0.3).abs() < 1e-6 && (tiny.v_raw[1] + 0.2).abs() < 1e-6);

        let (mu, sigma) = ([0.2, -0.1], [0.3, 0.4]);
        let n = 100_000;
        let (mut mean, mut score) = ([0.0; 2], [0.0; 2]);
        let mut score_sq = [0.0; 2];
        for _ in 0..n {
            let s = sample_location(mu, sigma, &mut r).unwrap();
            for i in 0..2 {
                mean[i] += s.v_raw[i] / n as f64;
                score[i] += s.score[i] / n as f64;
                score_sq[i] += s.score[i] * s.score[i] / n as f64;
            }
        }
        for i in 0..2 {
            assert!((mean[i] - mu[i]).abs() < 3.0 * sigma[i] / (n as f64).sqrt());
            let se = (score_sq[i] / n as f64).sqrt();
            assert!(
                score[i].abs() < 4.0 * se,
                "score mean {} se {}",
                score[i],
                se
            );
        }
    }

    fn episode_loss(a: &Agent<f64>, rasters: &[Raster], locs: &[Location], target: &[f64]) -> f64 {
        let mut h = a.h0.clone();
        let mut loss = 0.0;
        for (r, &v) in rasters.iter().zip(locs) {
            let c = a.step(r, v, &h).unwrap();
            loss += crate::embedder::squared_distance(&c.a, target);
            h = c.h;
        }
        loss
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        for seed in 0..2 {
            for normalize in [false, true] {
                let mut a = agent(seed, 2);
                a.cfg.normalize_action = normalize;
                let rasters: Vec<Raster> = (0..3).map(|k| random_raster(seed * 10 + k)).collect();
                let locs = [[0.0, 0.0], [0.3, -0.4], [-0.6, 0.2]];
                let target: Vec<f64> = (0..64)
                    .map(|i| ((i + seed as usize) as f64).cos() / 8.0)
                    .collect();
                let mut h = a.h0.clone();
                let mut steps = Vec::new();
                for (r, &v) in rasters.iter().zip(&locs) {
                    let c = a.step(r, v, &h).unwrap();
                    h = c.h.clone();
                    steps.push(c);
                }
                let da: Vec<Vec<f64>> = steps
                    .iter()
                    .map(|s| {
                        s.a.iter()
                            .zip(&target)
                            .map(|(x, y)| 2.0 * (x - y))
                            .collect()
                    })
                    .collect();
                a.backward_episode(&steps, &da);
                let frozen = a.clone();
                let report = finite_diff_check(
                    |p| {
                        let mut probe = frozen.clone();
                        probe.params = p.clone();
                        episode_loss(&probe, &rasters, &locs, &target)
                    },
                    &a.params,
                    &GradCheckOptions {
                        max_coords_per_tensor: Some(30),
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap();
                assert!(report.max_relative_error < 1e-4, "{report:?}");
                assert!(a
                    .params
                    .iter()
                    .filter(|p| is_locator_param(&p.name))
                    .all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
            }
        }
    }

    #[test]
    fn locator_gradient_matches_finite_differences() {
        let mut a = agent(4, 3);
        let h: Vec<f64> = (0..HIDDEN_DIM)
            .map(|i| ((i * 7) as f64).sin().abs())
            .collect();
        let w = [0.7, -1.3];
        let mu = a.locator_mean(&h, 2).unwrap();
        a.locator_backward(&h, mu, w, 2).unwrap();
        let frozen = a.clone();
        let report = finite_diff_check(
            |p| {
                let mut probe = frozen.clone();
                probe.params = p.clone();
                let m = probe.locator_mean(&h, 2).unwrap();
                w[0] * m[0] + w[1] * m[1]
            },
            &a.params,
            &GradCheckOptions {
                max_coords_per_tensor: Some(20),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Agent::<f32>::new(AgentConfig::default(), &mut rng::seeded(8)).unwrap();
        let mut ck = Checkpoint::new();
        a.write_into(&mut ck).unwrap();
        let back = Agent::read_from(&Checkpoint::read_from(&ck.to_bytes()[..]).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn greedy_rollout_is_deterministic() {
        let a = agent(5, 2);
        let rs: Vec<Raster> = (0..4).map(random_raster).collect();
        assert_eq!(
            a.greedy_rollout(&rs).unwrap(),
            a.greedy_rollout(&rs).unwrap()
        );
        let mut st = a.greedy_start();
        for r in &rs {
            a.greedy_step(&mut st, r).unwrap();
        }
        assert_eq!(st.trace.len(), 4);
        assert_eq!(st.trace[0], [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn retina_translation_consistent(dx in -10isize..10, dy in -10isize..10, seed in 0u64..50) {
            let base = random_raster(seed);
            let mut shifted = Raster::new(64, 64);
            for row in 0..64isize {
                for col in 0..64isize {
                    shifted.set(
                        (col + 64 + dx) as usize % 64,
                        (row + 64 + dy) as usize % 64,
                        base.get(col as usize, row as usize),
                    );
                }
            }
            let (px, py) = (30usize, 28usize);
            let v = [pixel_to_agent(px, 64), pixel_to_agent(py, 64)];
            let v2 = [
                pixel_to_agent((px as isize + dx) as usize, 64),
                pixel_to_agent((py as isize + dy) as usize, 64),
            ];
            let a: Vec<f32> = extract_retina(&base, v, &GlimpseConfig::default());
            let b: Vec<f32> = extract_retina(&shifted, v2, &GlimpseConfig::default());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn outputs_respect_ranges(seed in 0u64..20, x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
            let a = agent(seed, 2);
            let c = a.step(&random_raster(seed), [x, y], &a.h0).unwrap();
            prop_assert!(c.glimpse.g.iter().all(|&v| v >= 0.0));
            prop_assert!(c.h.iter().all(|&v| v >= 0.0 && v.is_finite()));
            let mu = a.locator_mean(&c.h, 1).unwrap();
            prop_assert!(mu[0].abs() < 1.0 && mu[1].abs() < 1.0);
        }
    }
}
