//! Training loop: sampled-head rollouts with bootstrap masks, an on-policy
//! buffer, decaying exploration, and the hybrid update (policy gradient for
//! the locator heads, supervised BPTT for everything else).

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    is_locator_param, sample_location, Agent, AgentConfig, GlimpseConfig, Location, StepCache,
};
use crate::embedder::{squared_distance, EmbeddingTable};
use crate::error::{Error, Result};
use crate::metrics::{
    acc_at_q, dataset_auir, rank_from_distances, squared_distances, RetrievalResult,
};
use crate::numeric::{Checkpoint, OptimizerKind, OptimizerState};
use crate::reward::{
    policy_gradient, reward, threshold, EpisodeTrace, Experience, ReturnForm, RewardConfig,
};
use crate::rng::{self, Rng as RunRng};
use crate::sketchgen::{Dataset, Raster, SketchItem, Split, DEFAULT_DILATION};

/// What drives the reward threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdClock {
    #[default]
    GlobalEpisode,
    StepInEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Episode rounds per update; each round draws one head.
    #[serde(rename = "M")]
    pub m: usize,
    pub total_cycles: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lr: f64,
    pub mask_p: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub reward: RewardConfig,
    pub seed: u64,
    /// Items rolled out per round.
    pub batch_items: usize,
    pub optimizer: OptimizerKind,
    pub glimpse: GlimpseConfig,
    pub normalize_action: bool,
    /// Feed the complete sketch at every step instead of the growing stages.
    pub fixed_input: bool,
    pub threshold_clock: ThresholdClock,
    pub return_form: ReturnForm,
    /// Subtract a moving average of returns in the policy gradient.
    pub baseline: bool,
    /// Train every head on all buffered traces (masked); otherwise only on
    /// the traces it executed.
    pub share_heads: bool,
    pub dilation: usize,
    /// Write a checkpoint every this many cycles (0: only at the end).
    pub checkpoint_every: usize,
    /// Validate every this many cycles (0: never).
    pub validate_every: usize,
    /// Stop after this many validations without AUIR improvement (0: off).
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 4,
            total_cycles: 100,
            t: 17,
            k: 6,
            lr: 3e-4,
            mask_p: 0.5,
            sigma_start: 0.5,
            sigma_end: 0.05,
            reward: RewardConfig::default(),
            seed: 0,
            batch_items: 16,
            optimizer: OptimizerKind::adam(),
            glimpse: GlimpseConfig::default(),
            normalize_action: false,
            fixed_input: false,
            threshold_clock: ThresholdClock::default(),
            return_form: ReturnForm::default(),
            baseline: false,
            share_heads: true,
            dilation: DEFAULT_DILATION,
            checkpoint_every: 0,
            validate_every: 1,
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return bad("K must be at least 1".into());
        }
        if self.t < 1 {
            return bad("T must be at least 1".into());
        }
        if self.m < 1 {
            return bad("M must be at least 1".into());
        }
        if self.batch_items < 1 {
            return bad("batch_items must be at least 1".into());
        }
        if !(self.mask_p > 0.0 && self.mask_p <= 1.0) {
            return bad(format!("mask_p must be in (0,1], got {}", self.mask_p));
        }
        if !(self.sigma_end > 0.0 && self.sigma_start >= self.sigma_end) {
            return bad(format!(
                "need sigma_start ≥ sigma_end > 0, got {} and {}",
                self.sigma_start, self.sigma_end
            ));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        self.reward.validate()?;
        self.glimpse.validate()
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            glimpse: self.glimpse,
            heads: self.k,
            normalize_action: self.normalize_action,
        }
    }

    pub fn total_rounds(&self) -> u64 {
        (self.total_cycles * self.m) as u64
    }
}

pub fn sample_head(k: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=k)
}

pub fn sample_masks(k: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..k).map(|_| rng.random_bool(p)).collect()
}

/// Geometric decay from `start` at `m = 0` to `end` at `m = total`.
pub fn sigma_schedule(m: u64, total: u64, start: f64, end: f64) -> Location {
    let s = if total == 0 {
        start
    } else {
        let frac = (m.min(total) as f64) / total as f64;
        start * (end / start).powf(frac)
    };
    [s, s]
}

/// A finished episode plus the forward caches its BPTT needs.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trace: EpisodeTrace,
    pub caches: Vec<StepCache<f32>>,
}

/// Fixed environment for one item: stage rasters, target and reward gallery.
pub struct EpisodeEnv<'a> {
    pub item_id: &'a str,
    pub stages: &'a [Raster],
    pub target: &'a [f32],
    pub gallery: &'a EmbeddingTable,
    pub target_index: usize,
}

pub struct EpisodeParams {
    pub head: usize,
    pub sigma: Location,
    pub episode: u64,
}

pub fn run_episode(
    env: &EpisodeEnv<'_>,
    ep: &EpisodeParams,
    agent: &Agent<f32>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let s = env.stages.len();
    if s == 0 {
        return Err(Error::Input(format!(
            "item `{}` has no stages",
            env.item_id
        )));
    }
    let mut h = agent.h0.clone();
    let mut v: Location = [0.0, 0.0];
    let mut sample = None;
    let mut steps = Vec::with_capacity(cfg.t);
    let mut caches = Vec::with_capacity(cfg.t);
    let mut actions = Vec::with_capacity(cfg.t);
    let mut loss = 0.0;
    for t in 0..cfg.t {
        let stage = if cfg.fixed_input { s } else { (t + 1).min(s) };
        let c = agent.step(&env.stages[stage - 1], v, &h)?;
        loss += squared_distance(&c.a, env.target) as f64;
        let rank = rank_from_distances(&squared_distances(&c.a, env.gallery), env.target_index);
        let clock = match cfg.threshold_clock {
            ThresholdClock::GlobalEpisode => ep.episode,
            ThresholdClock::StepInEpisode => t as u64,
        };
        let r = reward(1.0 / rank as f64, threshold(clock, &cfg.reward));
        steps.push(Experience {
            t,
            h: h.clone(),
            sample,
            sigma: ep.sigma,
            reward: r,
            h_next: c.h.clone(),
            masks: sample_masks(cfg.k, cfg.mask_p, rng),
        });
        if t + 1 < cfg.t {
            let mu = agent.locator_mean(&c.h, ep.head)?;
            let draw = sample_location([mu[0] as f64, mu[1] as f64], ep.sigma, rng)?;
            v = draw.v;
            sample = Some(draw);
        }
        h = c.h.clone();
        actions.push(c.a.clone());
        caches.push(c);
    }
    let mut trace = EpisodeTrace {
        item_id: env.item_id.to_string(),
        head: ep.head,
        episode: ep.episode,
        steps,
        actions,
        returns: Vec::new(),
        supervised_loss: loss,
    };
    trace.finalize(cfg.reward.gamma, cfg.return_form);
    Ok(Rollout { trace, caches })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleStats {
    pub mean_reward: f64,
    pub supervised_loss: f64,
    /// Heads that received at least one masked experience.
    pub updated_heads: Vec<usize>,
}

/// Apply one hybrid update from `buffer`, then empty it.
pub fn update_cycle(
    buffer: &mut Vec<Rollout>,
    agent: &mut Agent<f32>,
    targets: &[&[f32]],
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    baseline: f64,
) -> Result<CycleStats> {
    if buffer.is_empty() {
        return Err(Error::State("update requested with an empty buffer".into()));
    }
    if targets.len() != buffer.len() {
        return Err(Error::Dimension(
            "one target per rollout is required".into(),
        ));
    }
    agent.params.zero_grads();
    let traces: Vec<EpisodeTrace> = buffer.iter().map(|r| r.trace.clone()).collect();

    let mut updated_heads = Vec::new();
    for k in 1..=agent.heads() {
        let g = policy_gradient(&traces, agent, k, baseline, !cfg.share_heads)?;
        if g.contributions == 0 {
            continue;
        }
        updated_heads.push(k);
        let wid = agent.params.require(&crate::agent::head_name(k, "w"))?;
        let bid = agent.params.require(&crate::agent::head_name(k, "b"))?;
        for (dst, &src) in agent.params.grad_mut(wid).iter_mut().zip(&g.w) {
            *dst = -src;
        }
        for (dst, &src) in agent.params.grad_mut(bid).iter_mut().zip(&g.b) {
            *dst = -src;
        }
    }

    let n = buffer.len() as f32;
    let mut total_loss = 0.0;
    let mut rewards = 0.0;
    let mut steps = 0usize;
    for (ro, target) in buffer.iter().zip(targets) {
        let da: Vec<Vec<f32>> = ro
            .caches
            .iter()
            .map(|c| {
                c.a.iter()
                    .zip(target.iter())
                    .map(|(&a, &e)| 2.0 * (a - e) / n)
                    .collect()
            })
            .collect();
        agent.backward_episode(&ro.caches, &da);
        total_loss += ro.trace.supervised_loss;
        rewards += ro.trace.rewards().iter().sum::<f64>();
        steps += ro.trace.steps.len();
    }

    let heads: Vec<String> = updated_heads
        .iter()
        .map(|k| format!("locator/head{k}/"))
        .collect();
    opt.step_where(&mut agent.params, |name| {
        !is_locator_param(name) || heads.iter().any(|h| name.starts_with(h.as_str()))
    })?;
    let stats = CycleStats {
        mean_reward: rewards / steps.max(1) as f64,
        supervised_loss: total_loss / buffer.len() as f64,
        updated_heads,
    };
    buffer.clear();
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub cycle: usize,
    pub mean_reward: f64,
    pub supervised_loss: f64,
    pub val_auir: f64,
    pub val_acc5: f64,
    pub sigma: f64,
    pub eta: f64,
}

pub const METRICS_HEADER: &str = "cycle,mean_reward,supervised_loss,val_auir,val_acc5,sigma,eta";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.cycle, r.mean_reward, r.supervised_loss, r.val_auir, r.val_acc5, r.sigma, r.eta
        )
        .unwrap();
    }
    s
}

/// Greedy retrieval for `items` against the gallery of their own images.
pub fn evaluate(
    agent: &Agent<f32>,
    items: &[&SketchItem],
    table: &EmbeddingTable,
    dilation: usize,
) -> Result<Vec<RetrievalResult>> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let gallery = table.subset(items.iter().map(|i| i.id.as_str()))?;
    items
        .iter()
        .enumerate()
        .map(|(idx, it)| {
            let stages = it.stage_rasters(dilation)?;
            let preds = agent.greedy_rollout(&stages)?;
            let ranks = preds
                .iter()
                .map(|a| rank_from_distances(&squared_distances(a, &gallery), idx))
                .collect();
            RetrievalResult::new(it.id.clone(), ranks, gallery.len())
        })
        .collect()
}

struct TrainItem {
    id: String,
    stages: Vec<Raster>,
    target_index: usize,
}

/// Resumable training state.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub agent: Agent<f32>,
    pub opt: OptimizerState<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Completed update cycles.
    pub cycle: usize,
    /// Global episode-round counter; drives σ and η.
    pub episode: u64,
    baseline: f64,
    best_auir: f64,
    stale: usize,
    train: Vec<TrainItem>,
    gallery: EmbeddingTable,
    val: Vec<&'a SketchItem>,
    table: &'a EmbeddingTable,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, table: &'a EmbeddingTable, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = Agent::new(cfg.agent_config(), &mut rng::derived(cfg.seed, 0))?;
        let opt = OptimizerState::new(cfg.lr, cfg.optimizer)?;
        let train_items: Vec<&SketchItem> = data
            .items
            .iter()
            .filter(|i| i.split == Split::Train)
            .collect();
        if train_items.is_empty() {
            return Err(Error::Input("the dataset has no training items".into()));
        }
        let gallery = table.subset(train_items.iter().map(|i| i.id.as_str()))?;
        let train = train_items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                Ok(TrainItem {
                    id: it.id.clone(),
                    stages: it.stage_rasters(cfg.dilation)?,
                    target_index: i,
                })
            })
            .collect::<Result<_>>()?;
        let val = data
            .items
            .iter()
            .filter(|i| i.split == Split::Test)
            .collect();
        Ok(Self {
            cfg,
            agent,
            opt,
            metrics: Vec::new(),
            cycle: 0,
            episode: 0,
            baseline: 0.0,
            best_auir: f64::NEG_INFINITY,
            stale: 0,
            train,
            gallery,
            val,
            table,
        })
    }

    pub fn current_sigma(&self) -> f64 {
        sigma_schedule(
            self.episode,
            self.cfg.total_rounds(),
            self.cfg.sigma_start,
            self.cfg.sigma_end,
        )[0]
    }

    pub fn current_eta(&self) -> f64 {
        threshold(self.episode, &self.cfg.reward)
    }

    pub fn validate_now(&self) -> Result<(f64, f64)> {
        if self.val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let res = evaluate(&self.agent, &self.val, self.table, self.cfg.dilation)?;
        Ok((dataset_auir(&res), acc_at_q(&res, 5)))
    }

    /// One cycle: `M` rounds of `batch_items` episodes, then one update.
    pub fn run_cycle(&mut self) -> Result<MetricsRow> {
        let cfg = self.cfg.clone();
        let mut rng: RunRng = rng::derived(cfg.seed, 1_000 + self.cycle as u64);
        let mut buffer = Vec::with_capacity(cfg.m * cfg.batch_items);
        let mut target_ids = Vec::with_capacity(cfg.m * cfg.batch_items);
        let mut sigma = [cfg.sigma_start; 2];
        for _ in 0..cfg.m {
            let head = sample_head(cfg.k, &mut rng);
            sigma = sigma_schedule(
                self.episode,
                cfg.total_rounds(),
                cfg.sigma_start,
                cfg.sigma_end,
            );
            let n = self.train.len();
            let picks = index::sample(&mut rng, n, cfg.batch_items.min(n)).into_vec();
            for i in picks {
                let it = &self.train[i];
                let env = EpisodeEnv {
                    item_id: &it.id,
                    stages: &it.stages,
                    target: self.gallery.vector(it.target_index),
                    gallery: &self.gallery,
                    target_index: it.target_index,
                };
                let ep = EpisodeParams {
                    head,
                    sigma,
                    episode: self.episode,
                };
                buffer.push(run_episode(&env, &ep, &self.agent, &cfg, &mut rng)?);
                target_ids.push(it.target_index);
            }
            self.episode += 1;
        }
        let targets: Vec<&[f32]> = target_ids.iter().map(|&i| self.gallery.vector(i)).collect();
        let mean_return = buffer
            .iter()
            .flat_map(|r| r.trace.returns.iter().skip(1))
            .copied()
            .sum::<f64>()
            / buffer
                .iter()
                .map(|r| r.trace.returns.len().saturating_sub(1))
                .sum::<usize>()
                .max(1) as f64;
        let baseline = if cfg.baseline { self.baseline } else { 0.0 };
        let stats = update_cycle(
            &mut buffer,
            &mut self.agent,
            &targets,
            &mut self.opt,
            &cfg,
            baseline,
        )?;
        if cfg.baseline {
            self.baseline = 0.9 * self.baseline + 0.1 * mean_return;
        }
        self.cycle += 1;

        let (val_auir, val_acc5) = if cfg.validate_every > 0 && self.cycle % cfg.validate_every == 0
        {
            self.validate_now()?
        } else {
            (f64::NAN, f64::NAN)
        };
        if val_auir.is_finite() {
            if val_auir > self.best_auir {
                self.best_auir = val_auir;
                self.stale = 0;
            } else {
                self.stale += 1;
            }
        }
        let row = MetricsRow {
            cycle: self.cycle,
            mean_reward: stats.mean_reward,
            supervised_loss: stats.supervised_loss,
            val_auir,
            val_acc5,
            sigma: sigma[0],
            eta: threshold(self.episode.saturating_sub(1), &cfg.reward),
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn should_stop(&self) -> bool {
        self.cycle >= self.cfg.total_cycles
            || (self.cfg.early_stop_patience > 0 && self.stale >= self.cfg.early_stop_patience)
    }

    /// Run to completion; `on_checkpoint` receives every periodic checkpoint.
    pub fn run(
        &mut self,
        mut on_checkpoint: impl FnMut(&Checkpoint, usize) -> Result<()>,
    ) -> Result<()> {
        while !self.should_stop() {
            self.run_cycle()?;
            if self.cfg.checkpoint_every > 0 && self.cycle % self.cfg.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint()?, self.cycle)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.agent.write_into(&mut ck)?;
        self.table.write_into(&mut ck)?;
        self.opt.write_into(&self.agent.params, &mut ck, "optim/")?;
        ck.set_meta("kind", "agent");
        ck.set_meta("train_config", serde_json::to_string(&self.cfg)?);
        ck.set_meta("cycle", self.cycle.to_string());
        ck.set_meta("episode", self.episode.to_string());
        ck.set_meta("baseline", format!("{:?}", self.baseline));
        ck.set_meta("best_auir", format!("{:?}", self.best_auir));
        ck.set_meta("stale", self.stale.to_string());
        ck.set_meta("metrics", metrics_csv(&self.metrics));
        Ok(ck)
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`]. The
    /// configuration in `cfg` wins, except that the architecture must match.
    pub fn resume(
        data: &'a Dataset,
        table: &'a EmbeddingTable,
        cfg: TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(data, table, cfg)?;
        let agent = Agent::read_from(ck)?;
        if agent.cfg != t.cfg.agent_config() {
            return Err(Error::Config(
                "checkpoint architecture differs from the configuration".into(),
            ));
        }
        t.agent = agent;
        t.opt.read_from(&t.agent.params, ck, "optim/")?;
        let parse = |k: &str| -> Result<String> { Ok(ck.require_meta(k)?.to_string()) };
        let num = |k: &str| -> Result<f64> {
            parse(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad metadata `{k}`")))
        };
        t.cycle = num("cycle")? as usize;
        t.episode = num("episode")? as u64;
        t.baseline = num("baseline")?;
        t.best_auir = num("best_auir")?;
        t.stale = num("stale")? as usize;
        t.metrics = parse_metrics(ck.require_meta("metrics")?)?;
        Ok(t)
    }
}

pub fn parse_metrics(csv: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(
            "metrics table has an unexpected header".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("bad metrics row `{l}`")));
            }
            let x = |i: usize| -> Result<f64> {
                f[i].parse()
                    .map_err(|_| Error::Format(format!("bad metrics value `{}`", f[i])))
            };
            Ok(MetricsRow {
                cycle: f[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad cycle `{}`", f[0])))?,
                mean_reward: x(1)?,
                supervised_loss: x(2)?,
                val_auir: x(3)?,
                val_acc5: x(4)?,
                sigma: x(5)?,
                eta: x(6)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::initial_embedder;
    use crate::sketchgen::{generate_dataset, GenConfig};

    fn data() -> Dataset {
        generate_dataset(&GenConfig {
            n_classes: 4,
            items_per_class: 3,
            seed: 5,
            noise_prob: 0.2,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            m: 2,
            total_cycles: 3,
            t: 5,
            k: 3,
            batch_items: 3,
            ..Default::default()
        }
    }

    #[test]
    fn head_and_mask_sampling() {
        let mut r = rng::seeded(1);
        assert!((0..100).all(|_| sample_head(1, &mut r) == 1));
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[sample_head(6, &mut r) - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01);
        }
        assert!(sample_masks(6, 1.0, &mut r).iter().all(|&m| m));
        let pop: usize = (0..10_000)
            .map(|_| sample_masks(6, 0.5, &mut r).iter().filter(|&&m| m).count())
            .sum();
        assert!((pop as f64 / 10_000.0 - 3.0).abs() < 0.05);
    }

    #[test]
    fn masks_are_independent_across_draws() {
        let mut r = rng::seeded(2);
        let mut table = [[0f64; 2]; 2];
        let n = 20_000;
        let mut prev = sample_masks(1, 0.5, &mut r)[0];
        for _ in 0..n {
            let cur = sample_masks(1, 0.5, &mut r)[0];
            table[prev as usize][cur as usize] += 1.0;
            prev = cur;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let total = n as f64;
        let chi2: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| {
                let e = rows[i] * cols[j] / total;
                (table[i][j] - e).powi(2) / e
            })
            .sum();
        // 1 degree of freedom, 0.01 critical value
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn sigma_schedule_values() {
        assert_eq!(sigma_schedule(0, 100, 0.5, 0.05), [0.5, 0.5]);
        assert!((sigma_schedule(100, 100, 0.5, 0.05)[0] - 0.05).abs() < 1e-15);
        assert!((sigma_schedule(50, 100, 0.5, 0.05)[0] - 0.1581).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for m in 0..=100 {
            let s = sigma_schedule(m, 100, 0.5, 0.05)[0];
            assert!(s <= last && s >= 0.05 - 1e-15);
            last = s;
        }
    }

    #[test]
    fn config_json_uses_exact_names() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        for key in [
            "M",
            "T",
            "K",
            "total_cycles",
            "lr",
            "mask_p",
            "sigma_start",
            "sigma_end",
            "reward",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let bad = serde_json::from_str::<TrainConfig>(r#"{"M": 2, "bogus": 1}"#);
        assert!(bad.unwrap_err().to_string().contains("bogus"));
        assert!(TrainConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            sigma_end: 0.6,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn env_parts(d: &Dataset, emb: &EmbeddingTable) -> (Vec<Raster>, EmbeddingTable, String) {
        let it = &d.items[0];
        let gal = emb
            .subset(
                d.items
                    .iter()
                    .filter(|i| i.split == Split::Train)
                    .map(|i| i.id.as_str()),
            )
            .unwrap();
        (it.stage_rasters(1).unwrap(), gal, it.id.clone())
    }

    #[test]
    fn episode_contract() {
        let d = data();
        let emb = initial_embedder(&d, 1).unwrap().table;
        let (stages, gal, id) = env_parts(&d, &emb);
        let ti = gal.require(&id).unwrap();
        let env = EpisodeEnv {
            item_id: &id,
            stages: &stages,
            target: gal.vector(ti),
            gallery: &gal,
            target_index: ti,
        };
        let cfg = small_cfg();
        let agent = Agent::new(cfg.agent_config(), &mut rng::seeded(3)).unwrap();
        let ep = EpisodeParams {
            head: 2,
            sigma: [0.3, 0.3],
            episode: 7,
        };
        let a = run_episode(&env, &ep, &agent, &cfg, &mut rng::seeded(9)).unwrap();
        let b = run_episode(&env, &ep, &agent, &cfg, &mut rng::seeded(9)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.steps.len(), 5);
        assert!(a.trace.steps[0].sample.is_none());
        assert!(a.trace.steps[1..].iter().all(|s| s.sample.is_some()));
        let recomputed: f64 = a
            .trace
            .actions
            .iter()
            .map(|x| squared_distance(x, gal.vector(ti)) as f64)
            .sum();
        assert!((recomputed - a.trace.supervised_loss).abs() < 1e-9);

        let one = TrainConfig { t: 1, ..cfg };
        let r = run_episode(&env, &ep, &agent, &one, &mut rng::seeded(9)).unwrap();
        assert_eq!(r.trace.steps.len(), 1);
        assert_eq!(r.trace.returns[0], r.trace.steps[0].reward);
    }

    #[test]
    fn gated_heads_are_untouched() {
        let d = data();
        let emb = initial_embedder(&d, 1).unwrap().table;
        let mut t = Trainer::new(&d, &emb, small_cfg()).unwrap();
        let before = t.agent.clone();
        let mut buffer = Vec::new();
        let mut targets = Vec::new();
        let mut rng = rng::seeded(4);
        for it in &t.train {
            let env = EpisodeEnv {
                item_id: &it.id,
                stages: &it.stages,
                target: t.gallery.vector(it.target_index),
                gallery: &t.gallery,
                target_index: it.target_index,
            };
            let ep = EpisodeParams {
                head: 2,
                sigma: [0.4, 0.4],
                episode: 0,
            };
            let mut ro = run_episode(&env, &ep, &t.agent, &t.cfg, &mut rng).unwrap();
            for s in &mut ro.trace.steps {
                s.masks[1] = false;
                s.reward = 1.0;
            }
            ro.trace.finalize(0.9, ReturnForm::FromCurrent);
            buffer.push(ro);
            targets.push(it.target_index);
        }
        let targets: Vec<&[f32]> = targets.iter().map(|&i| t.gallery.vector(i)).collect();
        let cfg = t.cfg.clone();
        update_cycle(&mut buffer, &mut t.agent, &targets, &mut t.opt, &cfg, 0.0).unwrap();
        assert!(buffer.is_empty());
        assert!(t
            .agent
            .params
            .values_equal(&before.params, "locator/head2/"));
        assert!(!t
            .agent
            .params
            .values_equal(&before.params, "locator/head1/"));
        assert!(!t.agent.params.values_equal(&before.params, "rnn/"));
        let mut empty = Vec::new();
        assert!(matches!(
            update_cycle(&mut empty, &mut t.agent, &[], &mut t.opt, &cfg, 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let d = data();
        let emb = initial_embedder(&d, 1).unwrap().table;
        let mut a = Trainer::new(&d, &emb, small_cfg()).unwrap();
        a.run(|_, _| Ok(())).unwrap();
        let mut b = Trainer::new(&d, &emb, small_cfg()).unwrap();
        b.run(|_, _| Ok(())).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(
            a.checkpoint().unwrap().to_bytes(),
            b.checkpoint().unwrap().to_bytes()
        );
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.episode, 6);

        let mut part = Trainer::new(&d, &emb, small_cfg()).unwrap();
        part.run_cycle().unwrap();
        let ck = Checkpoint::read_from(&part.checkpoint().unwrap().to_bytes()[..]).unwrap();
        let mut resumed = Trainer::resume(&d, &emb, small_cfg(), &ck).unwrap();
        assert_eq!(resumed.episode, 2);
        resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(metrics_csv(&resumed.metrics), metrics_csv(&a.metrics));
        assert_eq!(
            resumed.checkpoint().unwrap().to_bytes(),
            a.checkpoint().unwrap().to_bytes()
        );
    }

    #[test]
    fn zero_cycles_returns_initial_state() {
        let d = data();
        let emb = initial_embedder(&d, 1).unwrap().table;
        let cfg = TrainConfig {
            total_cycles: 0,
            ..small_cfg()
        };
        let mut t = Trainer::new(&d, &emb, cfg.clone()).unwrap();
        let init = t.agent.clone();
        t.run(|_, _| Ok(())).unwrap();
        assert!(t.metrics.is_empty());
        assert_eq!(t.agent, init);
    }
}
