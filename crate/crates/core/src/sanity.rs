//! Behavioural checks of the training machinery on tiny problems.

use rand::Rng;

use crate::agent::{head_name, sample_location, Agent, AgentConfig, Location, HIDDEN_DIM};
use crate::embedder::initial_embedder;
use crate::error::Result;
use crate::numeric::{OptimizerKind, OptimizerState};
use crate::reward::{policy_gradient, EpisodeTrace, Experience, ReturnForm};
use crate::rng;
use crate::sketchgen::{generate_dataset, GenConfig, Split};
use crate::trainer::{
    run_episode, sample_head, sample_masks, sigma_schedule, update_cycle, EpisodeEnv,
    EpisodeParams, TrainConfig,
};

pub const QUADRANT_BATCH: usize = 4;

/// One-step bandit for a single locator head. The state is a fixed random
/// vector and the reward is 1 when the sampled location lands in the quadrant
/// diagonally opposite the initial mean. Returns the number of episodes after
/// which the mean first lies inside that quadrant.
pub fn quadrant_benchmark(seed: u64, max_episodes: usize) -> Result<Option<usize>> {
    let mut r = rng::seeded(seed);
    let mut agent = Agent::<f32>::new(
        AgentConfig {
            heads: 1,
            ..Default::default()
        },
        &mut r,
    )?;
    let h: Vec<f32> = (0..HIDDEN_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
    let mean = |a: &Agent<f32>| -> Result<Location> {
        let m = a.locator_mean(&h, 1)?;
        Ok([m[0] as f64, m[1] as f64])
    };
    let mu0 = mean(&agent)?;
    let sign = [-mu0[0].signum(), -mu0[1].signum()];
    let inside = |v: Location| v[0] * sign[0] > 0.0 && v[1] * sign[1] > 0.0;

    let mut opt = OptimizerState::new(3e-4, OptimizerKind::adam())?;
    let wid = agent.params.require(&head_name(1, "w"))?;
    let bid = agent.params.require(&head_name(1, "b"))?;
    let mut traces = Vec::with_capacity(QUADRANT_BATCH);
    for ep in 0..max_episodes {
        let sigma = sigma_schedule(ep as u64, max_episodes as u64, 0.5, 0.05);
        let sample = sample_location(mean(&agent)?, sigma, &mut r)?;
        let mut tr = EpisodeTrace {
            item_id: "quadrant".into(),
            head: 1,
            episode: ep as u64,
            steps: vec![Experience {
                t: 1,
                h: h.clone(),
                sample: Some(sample),
                sigma,
                reward: if inside(sample.v) { 1.0 } else { 0.0 },
                h_next: h.clone(),
                masks: vec![true],
            }],
            actions: Vec::new(),
            returns: Vec::new(),
            supervised_loss: 0.0,
        };
        tr.finalize(1.0, ReturnForm::FromCurrent);
        traces.push(tr);
        if traces.len() < QUADRANT_BATCH {
            continue;
        }
        let g = policy_gradient(&traces, &agent, 1, 0.0, false)?;
        traces.clear();
        agent.params.zero_grads();
        for (d, s) in agent.params.grad_mut(wid).iter_mut().zip(&g.w) {
            *d = -s;
        }
        for (d, s) in agent.params.grad_mut(bid).iter_mut().zip(&g.b) {
            *d = -s;
        }
        opt.step_where(&mut agent.params, |n| n.starts_with("locator/"))?;
        if inside(mean(&agent)?) {
            return Ok(Some(ep + 1));
        }
    }
    Ok(None)
}

/// Runs `batches` update cycles on a small synthetic set. In each, one random
/// head has every mask cleared; returns whether that head's parameters came
/// out bit-identical every time.
pub fn gating_check(seed: u64, batches: usize) -> Result<bool> {
    let data = generate_dataset(&GenConfig {
        n_classes: 4,
        items_per_class: 3,
        seed,
        noise_prob: 0.2,
        ..Default::default()
    })?;
    let table = initial_embedder(&data, seed)?.table;
    let cfg = TrainConfig {
        k: 3,
        t: 5,
        seed,
        ..Default::default()
    };
    let train: Vec<_> = data
        .items
        .iter()
        .filter(|i| i.split == Split::Train)
        .collect();
    let gallery = table.subset(train.iter().map(|i| i.id.as_str()))?;
    let stages = train
        .iter()
        .map(|i| i.stage_rasters(cfg.dilation))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::seeded(seed);
    let mut agent = Agent::new(cfg.agent_config(), &mut r)?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.optimizer)?;

    for b in 0..batches {
        let gated = sample_head(cfg.k, &mut r);
        let mut buffer = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..cfg.batch_items {
            let idx = r.random_range(0..train.len());
            let env = EpisodeEnv {
                item_id: &train[idx].id,
                stages: &stages[idx],
                target: gallery.vector(idx),
                gallery: &gallery,
                target_index: idx,
            };
            let ep = EpisodeParams {
                head: sample_head(cfg.k, &mut r),
                sigma: [0.3, 0.3],
                episode: b as u64,
            };
            let mut ro = run_episode(&env, &ep, &agent, &cfg, &mut r)?;
            for s in &mut ro.trace.steps {
                s.masks = sample_masks(cfg.k, cfg.mask_p, &mut r);
                s.masks[gated - 1] = false;
                s.reward = r.random_range(0.0..1.0);
            }
            let gamma = cfg.reward.gamma;
            ro.trace.finalize(gamma, cfg.return_form);
            buffer.push(ro);
            targets.push(idx);
        }
        let before = agent.clone();
        let targets: Vec<&[f32]> = targets.iter().map(|&i| gallery.vector(i)).collect();
        update_cycle(&mut buffer, &mut agent, &targets, &mut opt, &cfg, 0.0)?;
        let prefix = format!("locator/head{gated}/");
        if !agent.params.values_equal(&before.params, &prefix) {
            return Ok(false);
        }
    }
    Ok(true)
}
