//! Ranking reward, adaptive threshold, discounted returns and the
//! bootstrapped Monte Carlo policy gradient.

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, LocationSample};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::rank_of;
use crate::numeric::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: -2.0,
            gamma: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "reward.alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "reward.gamma must be in (0,1], got {}",
                self.gamma
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("reward.beta must be finite".into()));
        }
        Ok(())
    }
}

/// Reciprocal rank of the target; ties count against it.
pub fn score(a: &[f32], target_id: &str, gallery: &EmbeddingTable) -> Result<f64> {
    Ok(1.0 / rank_of(a, target_id, gallery)? as f64)
}

/// `η_t = 1 / (1 + exp(−α t + β))`.
pub fn threshold(t: u64, cfg: &RewardConfig) -> f64 {
    1.0 / (1.0 + (-cfg.alpha * t as f64 + cfg.beta).exp())
}

pub fn reward(score: f64, eta: f64) -> f64 {
    if score >= eta {
        1.0
    } else {
        0.0
    }
}

/// How a step's return is aligned with the reward sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnForm {
    /// `G_t = Σ_{k≥0} γ^k R_{t+k}`.
    #[default]
    FromCurrent,
    /// `G_t = Σ_{k≥1} γ^{k−1} R_{t+k}`.
    FromNext,
}

/// All returns in one backward sweep, `G_t = R_t + γ G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

pub fn discounted_return(rewards: &[f64], gamma: f64, t: usize) -> f64 {
    discounted_returns(&rewards[t..], gamma)
        .first()
        .copied()
        .unwrap_or(0.0)
}

pub fn returns_with(rewards: &[f64], gamma: f64, form: ReturnForm) -> Vec<f64> {
    match form {
        ReturnForm::FromCurrent => discounted_returns(rewards, gamma),
        ReturnForm::FromNext => {
            let mut g = discounted_returns(rewards, gamma);
            g.remove(0);
            g.push(0.0);
            g
        }
    }
}

/// One recorded step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub t: usize,
    /// State the location was drawn from.
    pub h: Vec<f32>,
    /// `None` only for the fixed initial location.
    pub sample: Option<LocationSample>,
    pub sigma: [f64; 2],
    pub reward: f64,
    pub h_next: Vec<f32>,
    pub masks: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub item_id: String,
    pub head: usize,
    pub episode: u64,
    pub steps: Vec<Experience>,
    pub actions: Vec<Vec<f32>>,
    pub returns: Vec<f64>,
    pub supervised_loss: f64,
}

impl EpisodeTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn finalize(&mut self, gamma: f64, form: ReturnForm) {
        self.returns = returns_with(&self.rewards(), gamma, form);
    }
}

/// Ascent direction for one head's `(W, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    /// Experiences that passed the mask and carried a log-density term.
    pub contributions: usize,
}

/// `(1/M) Σ_m Σ_t ω^k_{m,t} ∇ log π_k(v_t | h_t) (G_t − baseline)`.
///
/// Head `k` is scored with its own mean at the recorded state. With
/// `own_head_only` only traces executed by head `k` are used.
pub fn policy_gradient<T: Scalar>(
    traces: &[EpisodeTrace],
    agent: &Agent<T>,
    k: usize,
    baseline: f64,
    own_head_only: bool,
) -> Result<HeadGradient<T>> {
    let dim = agent
        .params
        .get(&crate::agent::head_name(k, "w"))
        .map(|p| p.value.len());
    let Some(dim) = dim else {
        return Err(Error::Index(format!("locator head {k} does not exist")));
    };
    let mut w = vec![T::zero(); dim];
    let mut b = vec![T::zero(); 2];
    let mut contributions = 0;
    let m = traces.len().max(1) as f64;
    for tr in traces {
        if own_head_only && tr.head != k {
            continue;
        }
        if tr.returns.len() != tr.steps.len() {
            return Err(Error::State(format!(
                "trace for `{}` has no returns",
                tr.item_id
            )));
        }
        for (s, &g) in tr.steps.iter().zip(&tr.returns) {
            let Some(sample) = s.sample else {
                if s.t == 0 {
                    continue;
                }
                return Err(Error::State(format!(
                    "step {} of `{}` lacks log-density terms",
                    s.t, tr.item_id
                )));
            };
            if !s.masks.get(k - 1).copied().unwrap_or(false) {
                continue;
            }
            let weight = (g - baseline) / m;
            if weight == 0.0 {
                contributions += 1;
                continue;
            }
            let h: Vec<T> = s.h.iter().map(|&x| T::of(x as f64)).collect();
            let mu = agent.locator_mean(&h, k)?;
            let mut dz = [T::zero(); 2];
            for i in 0..2 {
                let sc = (sample.v_raw[i] - mu[i].f64()) / (s.sigma[i] * s.sigma[i]);
                let m_i = mu[i].f64();
                dz[i] = T::of(weight * sc * (1.0 - m_i * m_i));
            }
            for i in 0..2 {
                b[i] += dz[i];
                let row = &mut w[i * h.len()..(i + 1) * h.len()];
                for (wv, &hv) in row.iter_mut().zip(&h) {
                    *wv += dz[i] * hv;
                }
            }
            contributions += 1;
        }
    }
    Ok(HeadGradient {
        w,
        b,
        contributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_values() {
        let c = RewardConfig::default();
        assert!((threshold(0, &c) - 0.8808).abs() < 1e-4);
        assert!((threshold(100, &c) - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn reward_boundaries() {
        assert_eq!(reward(1.0, 0.5), 1.0);
        assert_eq!(reward(0.5, 0.5), 1.0);
        assert_eq!(reward(0.1, 0.9), 0.0);
    }

    #[test]
    fn return_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 1.0, 0), 3.0);
        assert!((discounted_return(&[0.0, 0.0, 1.0], 0.9, 0) - 0.81).abs() < 1e-12);
        assert!(discounted_returns(&[0.0; 5], 0.9).iter().all(|&g| g == 0.0));
        assert_eq!(
            returns_with(&[1.0, 0.0, 1.0], 0.5, ReturnForm::FromNext),
            [0.5, 1.0, 0.0]
        );
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig {
            gamma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RewardConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }

    fn toy_traces(seed: u64, heads: usize) -> (crate::agent::Agent<f64>, Vec<EpisodeTrace>) {
        use crate::agent::{sample_location, Agent, AgentConfig, HIDDEN_DIM};
        use rand::Rng as _;
        let mut r = crate::rng::seeded(seed);
        let agent: Agent<f64> = Agent::new(
            AgentConfig {
                heads,
                ..Default::default()
            },
            &mut r,
        )
        .unwrap();
        let traces = (0..3)
            .map(|m| {
                let head = 1 + m % heads;
                let steps: Vec<Experience> = (0..3)
                    .map(|t| {
                        let h: Vec<f32> =
                            (0..HIDDEN_DIM).map(|_| r.random_range(0.0..1.0)).collect();
                        let hd: Vec<f64> = h.iter().map(|&x| x as f64).collect();
                        let mu = agent.locator_mean(&hd, head).unwrap();
                        let sigma = [0.3, 0.2];
                        Experience {
                            t,
                            sample: (t > 0).then(|| sample_location(mu, sigma, &mut r).unwrap()),
                            h: h.clone(),
                            sigma,
                            reward: r.random_range(0..2) as f64,
                            h_next: h,
                            masks: (0..heads).map(|_| r.random_bool(0.5)).collect(),
                        }
                    })
                    .collect();
                let mut tr = EpisodeTrace {
                    item_id: format!("x{m}"),
                    head,
                    episode: m as u64,
                    steps,
                    actions: Vec::new(),
                    returns: Vec::new(),
                    supervised_loss: 0.0,
                };
                tr.finalize(0.9, ReturnForm::FromCurrent);
                tr
            })
            .collect();
        (agent, traces)
    }

    /// Surrogate whose gradient is the policy gradient: frozen samples,
    /// states and returns, live head parameters.
    fn surrogate(agent: &crate::agent::Agent<f64>, traces: &[EpisodeTrace], k: usize) -> f64 {
        let mut total = 0.0;
        for tr in traces {
            for (s, &g) in tr.steps.iter().zip(&tr.returns) {
                let (Some(sample), true) = (s.sample, s.masks[k - 1]) else {
                    continue;
                };
                let h: Vec<f64> = s.h.iter().map(|&x| x as f64).collect();
                let mu = agent.locator_mean(&h, k).unwrap();
                total += g * crate::agent::gaussian_log_density(sample.v_raw, mu, s.sigma);
            }
        }
        total / traces.len() as f64
    }

    #[test]
    fn policy_gradient_matches_frozen_sample_differences() {
        use crate::numeric::{finite_diff_check, GradCheckOptions};
        for seed in 0..3 {
            let (mut agent, traces) = toy_traces(seed, 2);
            for k in 1..=2 {
                let g = policy_gradient(&traces, &agent, k, 0.0, false).unwrap();
                agent.params.zero_grads();
                let wid = agent
                    .params
                    .require(&crate::agent::head_name(k, "w"))
                    .unwrap();
                let bid = agent
                    .params
                    .require(&crate::agent::head_name(k, "b"))
                    .unwrap();
                agent.params.grad_mut(wid).copy_from_slice(&g.w);
                agent.params.grad_mut(bid).copy_from_slice(&g.b);
                let frozen = agent.clone();
                let report = finite_diff_check(
                    |p| {
                        let mut probe = frozen.clone();
                        probe.params = p.clone();
                        surrogate(&probe, &traces, k)
                    },
                    &agent.params,
                    &GradCheckOptions {
                        max_coords_per_tensor: Some(64),
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap();
                // other heads and the trunk have zero analytic gradient and
                // numerically zero slope, so they count as exact matches
                assert!(report.max_relative_error < 1e-4, "{report:?}");
            }
        }
    }

    #[test]
    fn zero_returns_or_masks_give_zero_gradient() {
        let (agent, mut traces) = toy_traces(7, 2);
        let mut zero_g = traces.clone();
        for tr in &mut zero_g {
            tr.returns.iter_mut().for_each(|g| *g = 0.0);
        }
        let g = policy_gradient(&zero_g, &agent, 1, 0.0, false).unwrap();
        assert!(g.w.iter().chain(&g.b).all(|&x| x == 0.0));
        for tr in &mut traces {
            for s in &mut tr.steps {
                s.masks[1] = false;
            }
        }
        let g = policy_gradient(&traces, &agent, 2, 0.0, false).unwrap();
        assert!(g.w.iter().chain(&g.b).all(|&x| x == 0.0));
        assert_eq!(g.contributions, 0);
        assert!(policy_gradient(&traces, &agent, 3, 0.0, false).is_err());
        traces[0].steps[1].sample = None;
        assert!(matches!(
            policy_gradient(&traces, &agent, 1, 0.0, false),
            Err(Error::State(_))
        ));
    }

    proptest! {
        #[test]
        fn threshold_monotone(t in 0u64..100_000) {
            let c = RewardConfig::default();
            prop_assert!(threshold(t + 1, &c) >= threshold(t, &c));
        }

        #[test]
        fn recursion_is_exact(r in prop::collection::vec(prop::bool::ANY, 1..40), gamma in 0.01f64..=1.0) {
            let r: Vec<f64> = r.into_iter().map(|b| b as u8 as f64).collect();
            let g = discounted_returns(&r, gamma);
            for t in 0..r.len() {
                let next = if t + 1 < r.len() { g[t + 1] } else { 0.0 };
                prop_assert_eq!(g[t], r[t] + gamma * next);
            }
            let undiscounted = discounted_returns(&r, 1.0);
            prop_assert_eq!(undiscounted[0], r.iter().sum::<f64>());
        }
    }
}
