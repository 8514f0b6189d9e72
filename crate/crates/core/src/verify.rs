//! Finite-difference checks of every analytic gradient, per component.
//!
//! Each check builds a small random instance in f64, runs the analytic
//! backward pass and compares it with central differences of the matching
//! loss, restricted to the parameters of the component under test.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::agent::{
    gaussian_log_density, head_name, is_locator_param, sample_location, Agent, AgentConfig,
    Location,
};
use crate::embedder::{squared_distance, triplet_batch, Embedder, TripletInput};
use crate::error::{Error, Result};
use crate::numeric::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamSet};
use crate::reward::{policy_gradient, EpisodeTrace, Experience, ReturnForm};
use crate::rng;
use crate::sketchgen::Raster;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const SEEDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Glimpse,
    Rnn,
    Action,
    Locator,
    Embedder,
    Hybrid,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Glimpse,
        Component::Rnn,
        Component::Action,
        Component::Locator,
        Component::Embedder,
        Component::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Glimpse => "glimpse",
            Component::Rnn => "rnn",
            Component::Action => "action",
            Component::Locator => "locator",
            Component::Embedder => "embedder",
            Component::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seeds: u64,
    pub eps: f64,
    pub coords_per_tensor: usize,
    /// Corrupt one analytic gradient entry; the check must then fail.
    pub inject_bug: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seeds: SEEDS,
            eps: EPS,
            coords_per_tensor: 24,
            inject_bug: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: Component,
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub per_seed: Vec<GradCheckReport>,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

/// Agent whose biases are random, so no unit sits exactly on a relu kink.
pub fn probe_agent(seed: u64, heads: usize) -> Result<Agent<f64>> {
    let mut r = rng::seeded(seed);
    let mut a = Agent::new(
        AgentConfig {
            heads,
            ..Default::default()
        },
        &mut r,
    )?;
    for p in a.params.iter_mut().filter(|p| p.value.shape().len() == 1) {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.1..0.1));
    }
    Ok(a)
}

pub fn probe_raster(seed: u64) -> Raster {
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
    Raster::from_pixels(64, 64, px).expect("64×64")
}

fn probe_target(r: &mut impl Rng) -> Vec<f64> {
    (0..64).map(|_| r.random_range(-0.2..0.2)).collect()
}

/// Copy of the parameters accepted by `keep`, gradients included.
fn restrict(params: &ParamSet<f64>, keep: impl Fn(&str) -> bool) -> Result<ParamSet<f64>> {
    let mut out = ParamSet::new();
    for p in params.iter().filter(|p| keep(&p.name)) {
        let id = out.insert(p.name.clone(), p.value.clone())?;
        out.grad_mut(id).copy_from_slice(p.grad.data());
    }
    Ok(out)
}

fn overlay(base: &Agent<f64>, sub: &ParamSet<f64>) -> Agent<f64> {
    let mut a = base.clone();
    for p in sub.iter() {
        let id = a.params.id(&p.name).expect("same names");
        a.params.value_mut(id).copy_from_slice(p.value.data());
    }
    a
}

fn corrupt(sub: &mut ParamSet<f64>) {
    if let Some(p) = sub.iter_mut().next() {
        p.grad
            .data_mut()
            .iter_mut()
            .for_each(|g| *g = 1.5 * *g + 1e-3);
    }
}

fn run_check(
    sub: &mut ParamSet<f64>,
    opts: &CheckOptions,
    seed: u64,
    loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> Result<GradCheckReport> {
    if opts.inject_bug {
        corrupt(sub);
    }
    finite_diff_check(
        loss,
        sub,
        &GradCheckOptions {
            eps: opts.eps,
            max_coords_per_tensor: Some(opts.coords_per_tensor),
            seed,
        },
    )
}

fn episode(a: &Agent<f64>, rasters: &[Raster], locs: &[Location], target: &[f64]) -> f64 {
    let mut h = a.h0.clone();
    let mut loss = 0.0;
    for (r, &v) in rasters.iter().zip(locs) {
        let c = a.step(r, v, &h).expect("valid step");
        loss += squared_distance(&c.a, target);
        h = c.h;
    }
    loss
}

fn supervised(
    seed: u64,
    steps: usize,
    prefix: &'static str,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let mut a = probe_agent(seed, 2)?;
    let mut r = rng::derived(seed, 1);
    let rasters: Vec<Raster> = (0..steps)
        .map(|k| probe_raster(seed * 100 + k as u64))
        .collect();
    let locs: Vec<Location> = (0..steps)
        .map(|t| {
            if t == 0 {
                [0.0, 0.0]
            } else {
                [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)]
            }
        })
        .collect();
    let target = probe_target(&mut r);
    let mut h = a.h0.clone();
    let mut caches = Vec::new();
    for (ras, &v) in rasters.iter().zip(&locs) {
        let c = a.step(ras, v, &h)?;
        h = c.h.clone();
        caches.push(c);
    }
    let da: Vec<Vec<f64>> = caches
        .iter()
        .map(|c| {
            c.a.iter()
                .zip(&target)
                .map(|(x, y)| 2.0 * (x - y))
                .collect()
        })
        .collect();
    a.backward_episode(&caches, &da);
    let mut sub = restrict(&a.params, |n| n.starts_with(prefix))?;
    run_check(&mut sub, opts, seed, |p| {
        episode(&overlay(&a, p), &rasters, &locs, &target)
    })
}

fn locator(seed: u64, opts: &CheckOptions) -> Result<GradCheckReport> {
    let mut a = probe_agent(seed, 3)?;
    let mut r = rng::derived(seed, 2);
    let h: Vec<f64> = (0..crate::agent::HIDDEN_DIM)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let w = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
    let k = 1 + (seed as usize % 3);
    let mu = a.locator_mean(&h, k)?;
    a.locator_backward(&h, mu, w, k)?;
    let mut sub = restrict(&a.params, is_locator_param)?;
    run_check(&mut sub, opts, seed, |p| {
        let m = overlay(&a, p).locator_mean(&h, k).expect("valid head");
        w[0] * m[0] + w[1] * m[1]
    })
}

fn embedder(seed: u64, opts: &CheckOptions) -> Result<GradCheckReport> {
    let dim = 64 * 64;
    let mut m: Embedder<f64> = Embedder::new(dim, &mut rng::seeded(seed))?;
    let mut r = rng::derived(seed, 3);
    let xs: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if r.random_bool(0.1) {
                        r.random_range(0.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let batch: Vec<_> = (0..2)
        .map(|k| TripletInput {
            anchor: &xs[3 * k][..],
            positive: &xs[3 * k + 1][..],
            negative: &xs[3 * k + 2][..],
        })
        .collect();
    // a margin this wide keeps every hinge active
    let margin = 5.0;
    triplet_batch(&mut m, &batch, margin, true)?;
    let mut sub = restrict(&m.params, |_| true)?;
    let base = m.clone();
    run_check(&mut sub, opts, seed, |p| {
        let mut probe = base.clone();
        for q in p.iter() {
            let id = probe.params.id(&q.name).expect("same names");
            probe.params.value_mut(id).copy_from_slice(q.value.data());
        }
        triplet_batch(&mut probe, &batch, margin, false)
            .expect("valid batch")
            .0
    })
}

/// T=3, K=2 episode: supervised loss through the trunk plus the negated
/// policy-gradient surrogate for the heads, with frozen samples and states.
fn hybrid(seed: u64, opts: &CheckOptions) -> Result<GradCheckReport> {
    const T: usize = 3;
    const K: usize = 2;
    let mut a = probe_agent(seed, K)?;
    let mut r = rng::derived(seed, 4);
    let target = probe_target(&mut r);
    let sigma = [0.3, 0.3];
    let mut traces = Vec::new();
    let mut episodes = Vec::new();
    for ep in 0..2u64 {
        let head = 1 + ep as usize % K;
        let rasters: Vec<Raster> = (0..T)
            .map(|t| probe_raster(seed * 1000 + ep * 10 + t as u64))
            .collect();
        let mut h = a.h0.clone();
        let mut v: Location = [0.0, 0.0];
        let mut sample = None;
        let mut steps = Vec::new();
        let mut caches = Vec::new();
        let mut locs = Vec::new();
        for (t, ras) in rasters.iter().enumerate() {
            locs.push(v);
            let c = a.step(ras, v, &h)?;
            steps.push(Experience {
                t,
                h: h.iter().map(|&x| x as f32).collect(),
                sample,
                sigma,
                reward: r.random_range(0.0..1.0),
                h_next: c.h.iter().map(|&x| x as f32).collect(),
                masks: (0..K).map(|_| r.random_bool(0.7)).collect(),
            });
            let mu = a.locator_mean(&c.h, head)?;
            let s = sample_location(mu, sigma, &mut r)?;
            v = s.v;
            sample = Some(s);
            h = c.h.clone();
            caches.push(c);
        }
        let mut tr = EpisodeTrace {
            item_id: format!("probe{ep}"),
            head,
            episode: ep,
            steps,
            actions: Vec::new(),
            returns: Vec::new(),
            supervised_loss: 0.0,
        };
        tr.finalize(0.9, ReturnForm::FromCurrent);
        traces.push(tr);
        episodes.push((rasters, locs, caches));
    }
    let n = traces.len() as f64;
    for (_, _, caches) in &episodes {
        let da: Vec<Vec<f64>> = caches
            .iter()
            .map(|c| {
                c.a.iter()
                    .zip(&target)
                    .map(|(x, y)| 2.0 * (x - y) / n)
                    .collect()
            })
            .collect();
        a.backward_episode(caches, &da);
    }
    for k in 1..=K {
        let g = policy_gradient(&traces, &a, k, 0.0, false)?;
        let wid = a.params.require(&head_name(k, "w"))?;
        let bid = a.params.require(&head_name(k, "b"))?;
        a.params
            .grad_mut(wid)
            .iter_mut()
            .zip(&g.w)
            .for_each(|(d, s)| *d = -s);
        a.params
            .grad_mut(bid)
            .iter_mut()
            .zip(&g.b)
            .for_each(|(d, s)| *d = -s);
    }
    let mut sub = restrict(&a.params, |_| true)?;
    run_check(&mut sub, opts, seed, |p| {
        let probe = overlay(&a, p);
        let sup: f64 = episodes
            .iter()
            .map(|(ras, locs, _)| episode(&probe, ras, locs, &target))
            .sum::<f64>()
            / n;
        let mut pg = 0.0;
        for k in 1..=K {
            for tr in &traces {
                for (s, &g) in tr.steps.iter().zip(&tr.returns) {
                    let (Some(smp), true) = (s.sample, s.masks[k - 1]) else {
                        continue;
                    };
                    let h: Vec<f64> = s.h.iter().map(|&x| x as f64).collect();
                    let mu = probe.locator_mean(&h, k).expect("valid head");
                    pg += g * gaussian_log_density(smp.v_raw, mu, s.sigma);
                }
            }
        }
        sup - pg / n
    })
}

pub fn check_once(c: Component, seed: u64, opts: &CheckOptions) -> Result<GradCheckReport> {
    match c {
        Component::Glimpse => supervised(seed, 1, "glimpse/", opts),
        Component::Rnn => supervised(seed, 3, "rnn/", opts),
        Component::Action => supervised(seed, 1, "action/", opts),
        Component::Locator => locator(seed, opts),
        Component::Embedder => embedder(seed, opts),
        Component::Hybrid => hybrid(seed, opts),
    }
}

pub fn check_component(c: Component, opts: &CheckOptions) -> Result<ComponentReport> {
    let per_seed = (0..opts.seeds)
        .map(|s| check_once(c, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let worst = per_seed
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error));
    Ok(ComponentReport {
        component: c,
        max_relative_error: worst.map_or(0.0, |w| w.max_relative_error),
        worst_param: worst.and_then(|w| w.worst_param.clone()),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("gru".parse::<Component>().is_err());
    }

    #[test]
    fn every_component_passes_one_seed() {
        let opts = CheckOptions {
            seeds: 1,
            coords_per_tensor: 8,
            ..Default::default()
        };
        for c in Component::ALL {
            let r = check_component(c, &opts).unwrap();
            assert!(r.passed(), "{c}: {r:?}");
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        let opts = CheckOptions {
            seeds: 1,
            inject_bug: true,
            ..Default::default()
        };
        for c in [Component::Action, Component::Locator] {
            let r = check_component(c, &opts).unwrap();
            assert!(!r.passed(), "{c}");
            assert!(r.worst_param.is_some());
        }
    }
}
