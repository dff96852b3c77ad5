//! Held-out diagnostics for a trained agent: policy returns, safety
//! prediction accuracy, barrier audits on imagined rollouts, and
//! reconstruction quality.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::barrier::{audit_conditions, AuditReport};
use crate::buffer::Episode;
use crate::config::TrainConfig;
use crate::env::HazardWorld;
use crate::error::Result;
use crate::metrics::EpisodeStats;
use crate::model::{GaussianNoise, LatentState, ZeroNoise};
use crate::policy::{imagine, ActMode};
use crate::trainer::{agent_policy, heldout_env_seed, random_policy, run_episode, stream_rng, Agent, Stream};

pub fn stats_of(ep: &Episode) -> EpisodeStats {
    EpisodeStats { total_reward: ep.total_reward(), total_cost: ep.total_cost(), length: ep.total_env_steps() }
}

/// Runs the agent on each env seed. Mean mode acts deterministically.
pub fn run_agent(agent: &Agent, cfg: &TrainConfig, env: &HazardWorld, env_seeds: &[u64], mode: ActMode, exploration: f64) -> Result<Vec<Episode>> {
    env_seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut rng = stream_rng(cfg.seed ^ seed, Stream::Heldout, 1 + i as u64);
            let mut policy = agent_policy(agent, mode, exploration, &mut rng);
            let (ep, _) = run_episode(env, cfg.action_repeat, seed, &mut policy)?;
            Ok(ep)
        })
        .collect()
}

/// Uniform random actions on each env seed.
pub fn run_random(cfg: &TrainConfig, env: &HazardWorld, env_seeds: &[u64], action_seed: u64) -> Result<Vec<Episode>> {
    env_seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut rng = stream_rng(action_seed, Stream::SeedActions, 1_000_000 + i as u64);
            let mut policy = random_policy(&mut rng);
            let (ep, _) = run_episode(env, cfg.action_repeat, seed, &mut policy)?;
            Ok(ep)
        })
        .collect()
}

pub fn heldout_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| heldout_env_seed(seed, i)).collect()
}

/// Held-out episodes alternating between the trained agent (sampling with
/// exploration noise) and uniform random actions, so both safe and unsafe
/// states are well represented.
pub fn heldout_mix(agent: &Agent, cfg: &TrainConfig, env: &HazardWorld, count: usize) -> Result<Vec<Episode>> {
    let seeds = heldout_seeds(cfg.seed, count);
    let (agent_seeds, random_seeds): (Vec<_>, Vec<_>) = seeds.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let agent_seeds: Vec<u64> = agent_seeds.into_iter().map(|(_, &s)| s).collect();
    let random_seeds: Vec<u64> = random_seeds.into_iter().map(|(_, &s)| s).collect();
    let mut a = run_agent(agent, cfg, env, &agent_seeds, ActMode::Sample, cfg.exploration_noise)?.into_iter();
    let mut r = run_random(cfg, env, &random_seeds, cfg.seed ^ 0xA5A5)?.into_iter();
    Ok((0..count).filter_map(|i| if i % 2 == 0 { a.next() } else { r.next() }).collect())
}

/// Posterior means along each episode, stacked into one batch, paired with
/// the true label of the observation each latent was filtered from. The
/// initial observation of every episode is skipped since it has no label.
pub fn labeled_posteriors(agent: &Agent, episodes: &[Episode]) -> Result<(LatentState, Vec<bool>, Vec<usize>)> {
    let mut states = Vec::new();
    let mut labels = Vec::new();
    let mut frame_index = Vec::new();
    let mut offset = 0;
    for ep in episodes {
        let post = agent.filter_episode(ep, &mut ZeroNoise)?;
        for (t, s) in post.into_iter().enumerate().skip(1) {
            states.push(s);
            labels.push(ep.kappas[t - 1] == 1);
            frame_index.push(offset + t);
        }
        offset += ep.observations.len();
    }
    Ok((LatentState::stack(&states)?, labels, frame_index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub accuracy: f64,
    /// Fraction of unsafe states predicted unsafe.
    pub unsafe_recall: Option<f64>,
    /// Fraction of safe states predicted safe.
    pub safe_specificity: Option<f64>,
    pub states: usize,
    pub unsafe_states: usize,
}

pub fn safety_accuracy(agent: &Agent, episodes: &[Episode]) -> Result<SafetyReport> {
    let (states, labels, _) = labeled_posteriors(agent, episodes)?;
    let p = agent.world.predict_safety(&agent.world.params.detached(), &states)?;
    let (mut tp, mut tn, mut n_unsafe) = (0usize, 0usize, 0usize);
    for (&k, &u) in p.data().iter().zip(&labels) {
        let pred = k >= 0.5;
        n_unsafe += usize::from(u);
        tp += usize::from(pred && u);
        tn += usize::from(!pred && !u);
    }
    let n = labels.len();
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(SafetyReport {
        accuracy: (tp + tn) as f64 / n as f64,
        unsafe_recall: frac(tp, n_unsafe),
        safe_specificity: frac(tn, n - n_unsafe),
        states: n,
        unsafe_states: n_unsafe,
    })
}

/// Imagines `horizon` steps from every posterior latent of `episodes` and
/// audits the barrier along the results.
pub fn barrier_audit(agent: &Agent, cfg: &TrainConfig, episodes: &[Episode]) -> Result<AuditReport> {
    let (states, _, _) = labeled_posteriors(agent, episodes)?;
    let mut noise = GaussianNoise(stream_rng(cfg.seed, Stream::Heldout, 0));
    let td = agent.theta.detached();
    let rollout = imagine(&agent.world, &agent.world.params.detached(), &agent.actor, &td, &states, cfg.horizon, ActMode::Sample, &mut noise)?;
    let labeled = rollout.labeled(&agent.barrier, &td)?;
    Ok(audit_conditions(&[labeled], cfg.barrier_lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub model_mse: f64,
    /// MSE of the per-pixel mean image of the same frames.
    pub mean_image_mse: f64,
    /// MSE when each reconstruction is compared with a different frame.
    pub shuffled_mse: f64,
    pub frames: usize,
}

pub fn reconstruction_report(agent: &Agent, episodes: &[Episode], shuffle_seed: u64) -> Result<ReconstructionReport> {
    let (states, _, index) = labeled_posteriors(agent, episodes)?;
    let frames: Vec<&crate::env::Observation> = episodes.iter().flat_map(|e| e.observations.iter()).collect();
    let targets: Vec<Vec<f64>> = index.iter().map(|&i| frames[i].values().collect()).collect();
    let recon = agent.world.decode(&agent.world.params.detached(), &states)?;
    let size = targets[0].len();
    let n = targets.len();
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let rows: Vec<&[f64]> = recon.data().chunks(size).collect();
    let model_mse = rows.iter().zip(&targets).map(|(r, t)| mse(r, t)).sum::<f64>() / n as f64;

    let mut mean = vec![0.0; size];
    for t in &targets {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / n as f64;
        }
    }
    let mean_image_mse = targets.iter().map(|t| mse(&mean, t)).sum::<f64>() / n as f64;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(shuffle_seed, Stream::Heldout, 2));
    let shuffled_mse = rows.iter().zip(&perm).map(|(r, &j)| mse(r, &targets[j])).sum::<f64>() / n as f64;
    Ok(ReconstructionReport { model_mse, mean_image_mse, shuffled_mse, frames: n })
}

/// Decoded posterior means of every observation of one episode, as images.
pub fn reconstruct_episode(agent: &Agent, ep: &Episode) -> Result<Vec<crate::env::Observation>> {
    let post = agent.filter_episode(ep, &mut ZeroNoise)?;
    let states = LatentState::stack(&post)?;
    let img: Var = agent.world.decode(&agent.world.params.detached(), &states)?;
    let [_, h, w] = ep.observations[0].shape();
    img.data()
        .chunks(3 * h * w)
        .map(|c| crate::env::Observation::from_values(h, w, c))
        .collect()
}
