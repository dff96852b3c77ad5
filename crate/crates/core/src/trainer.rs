//! The training loop: random seed episodes, then epochs of model, actor and
//! barrier, and critic updates followed by one collected episode.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::barrier::{barrier_loss_with_extra, Barrier, BarrierLoss};
use crate::buffer::{Episode, ReplayBuffer};
use crate::checkpoint::{Array, Checkpoint};
use crate::config::TrainConfig;
use crate::env::{HazardWorld, Observation, TraceStep};
use crate::error::{Error, Result};
use crate::metrics::{cost_regret, EpochRecord};
use crate::model::{ChunkBatch, GaussianNoise, LatentState, ModelLoss, NoiseSource, WorldModel, ZeroNoise};
use crate::nn::{Bound, ParamStore};
use crate::optim::{clip_global_norm, AdamState};
use crate::policy::{critic_training_set, critic_loss, imagine, imagined_return, policy_loss, ActMode, Actor, Critic};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Independent random streams, each indexed by a counter so that any point
/// of a run can be replayed without carrying generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    SeedActions = 2,
    EnvSeed = 3,
    Collect = 4,
    Chunks = 5,
    ModelNoise = 6,
    Imagine = 7,
    Heldout = 8,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream as u64);
    rng.set_stream(index);
    rng
}

/// Environment seed of the `index`-th episode of a run (seed episodes first).
pub fn episode_env_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, Stream::EnvSeed, index).random()
}

/// Environment seed of the `index`-th held-out evaluation episode.
pub fn heldout_env_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, Stream::Heldout, index).random()
}

/// Every learned component.
#[derive(Clone, Debug)]
pub struct Agent {
    pub world: WorldModel,
    /// Actor and barrier parameters, updated together.
    pub theta: ParamStore,
    pub actor: Actor,
    pub barrier: Barrier,
    pub critic: Critic,
}

impl Agent {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let mcfg = cfg.model();
        let feat = mcfg.feature_dim();
        let world = WorldModel::new(mcfg, &mut rng)?;
        let mut theta = ParamStore::new();
        let actor = Actor::new(&mut theta, feat, cfg.hidden_dim, HazardWorld::ACTION_DIM, &mut rng);
        let barrier = Barrier::new(&mut theta, feat, &cfg.barrier(), &mut rng);
        let critic = Critic::new(feat, cfg.hidden_dim, &mut rng);
        Ok(Agent { world, theta, actor, barrier, critic })
    }

    pub fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push_store("world", &self.world.params)?;
        ck.push_store("theta", &self.theta)?;
        ck.push_store("critic", &self.critic.params)
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("world", &mut self.world.params)?;
        ck.load_store("theta", &mut self.theta)?;
        ck.load_store("critic", &mut self.critic.params)
    }

    /// One filtering step on a real observation.
    pub fn observe(&self, prev: &LatentState, action: [f64; 2], obs: &Observation, noise: &mut dyn NoiseSource) -> Result<LatentState> {
        let p = self.world.params.detached();
        let a = Var::constant(Tensor::new(vec![1, 2], action.to_vec())?);
        let o = Var::constant(obs.to_tensor().reshape(vec![1, 3, obs.height, obs.width])?);
        Ok(self.world.posterior_step(&p, prev, &a, &o, noise)?)
    }

    pub fn act(&self, s: &LatentState, mode: ActMode, noise: &mut dyn NoiseSource) -> Result<[f64; 2]> {
        let a = self.actor.act(&self.theta.detached(), &s.features()?, mode, noise)?;
        Ok([a.data()[0], a.data()[1]])
    }

    /// Posterior latents along a stored episode, one per observation.
    pub fn filter_episode(&self, ep: &Episode, noise: &mut dyn NoiseSource) -> Result<Vec<LatentState>> {
        let mut s = LatentState::initial(1, &self.world.cfg);
        let mut out = Vec::with_capacity(ep.observations.len());
        for (t, obs) in ep.observations.iter().enumerate() {
            let prev_action = if t == 0 { [0.0; 2] } else { ep.actions[t - 1] };
            s = self.observe(&s, prev_action, obs, noise)?;
            out.push(s.clone());
        }
        Ok(out)
    }
}

/// Runs one episode, applying each chosen action for `repeat` environment
/// steps. `policy` sees the latest observation and the previous action.
pub fn run_episode(
    env: &HazardWorld,
    repeat: usize,
    env_seed: u64,
    policy: &mut dyn FnMut(&Observation, [f64; 2]) -> Result<[f64; 2]>,
) -> Result<(Episode, Vec<TraceStep>)> {
    let (mut state, first) = env.reset(env_seed)?;
    let mut ep = Episode::new(env_seed, first.clone());
    let mut trace = Vec::new();
    let mut obs = first;
    let mut prev = [0.0; 2];
    let mut done = false;
    while !done {
        let a = policy(&obs, prev)?;
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let (mut reward, mut cost, mut steps) = (0.0, 0u64, 0u64);
        for _ in 0..repeat {
            let out = env.step(&mut state, a);
            trace.push(TraceStep { step: state.step_index, action: a, reward: out.reward, kappa: out.kappa });
            reward += out.reward;
            cost += u64::from(out.kappa);
            steps += 1;
            obs = out.observation;
            done = out.done;
            if done {
                break;
            }
        }
        ep.push(a, reward, cost, steps, obs.clone());
        prev = a;
    }
    Ok((ep, trace))
}

/// Uniform random actions in `[-1, 1]^2`.
pub fn random_policy(rng: &mut impl Rng) -> impl FnMut(&Observation, [f64; 2]) -> Result<[f64; 2]> + '_ {
    move |_, _| Ok([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
}

/// Acts from a running posterior. `exploration` adds Gaussian noise of that
/// standard deviation on top of the policy's own action.
pub fn agent_policy<'a>(
    agent: &'a Agent,
    mode: ActMode,
    exploration: f64,
    rng: &'a mut ChaCha8Rng,
) -> impl FnMut(&Observation, [f64; 2]) -> Result<[f64; 2]> + 'a {
    let mut s = LatentState::initial(1, &agent.world.cfg);
    move |obs, prev| {
        let mut noise = GaussianNoise(rng.clone());
        let latent_noise: &mut dyn NoiseSource = if mode == ActMode::Mean { &mut ZeroNoise } else { &mut noise };
        s = agent.observe(&s, prev, obs, latent_noise)?;
        let mut a = agent.act(&s, mode, latent_noise)?;
        *rng = noise.0;
        if exploration > 0.0 {
            for v in &mut a {
                *v += exploration * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(a)
    }
}

/// `S` random episodes, the initial dataset.
pub fn seed_dataset(env: &HazardWorld, cfg: &TrainConfig) -> Result<ReplayBuffer> {
    let mut buf = ReplayBuffer::new(cfg.buffer_capacity);
    for i in 0..cfg.seed_episodes as u64 {
        let mut rng = stream_rng(cfg.seed, Stream::SeedActions, i);
        let (ep, _) = run_episode(env, cfg.action_repeat, episode_env_seed(cfg.seed, i), &mut random_policy(&mut rng))?;
        buf.push(ep)?;
    }
    Ok(buf)
}

/// Scalars from one update step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateLosses {
    pub model: f64,
    pub kl: f64,
    pub reward: f64,
    pub safety: f64,
    pub reconstruction: f64,
    pub barrier: [f64; 3],
    pub policy: f64,
    pub critic: f64,
}

impl UpdateLosses {
    fn accumulate(&mut self, other: &UpdateLosses, weight: f64) {
        self.model += weight * other.model;
        self.kl += weight * other.kl;
        self.reward += weight * other.reward;
        self.safety += weight * other.safety;
        self.reconstruction += weight * other.reconstruction;
        for (a, b) in self.barrier.iter_mut().zip(other.barrier) {
            *a += weight * b;
        }
        self.policy += weight * other.policy;
        self.critic += weight * other.critic;
    }
}

/// Output of [`Trainer::joint_objective`].
pub struct JointObjective {
    /// Actor and barrier parameters on the tape of `loss`.
    pub theta: Bound,
    pub loss: Var,
    pub barrier: BarrierLoss,
    pub critic_features: Var,
    pub critic_targets: Tensor,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub env: HazardWorld,
    pub agent: Agent,
    pub opt_model: AdamState,
    pub opt_theta: AdamState,
    pub opt_critic: AdamState,
    pub buffer: ReplayBuffer,
    /// Completed epochs.
    pub epoch: usize,
    pub updates: u64,
    pub env_steps: u64,
    pub cumulative_cost: u64,
}

impl Trainer {
    /// Fresh agent plus the random seed episodes.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = HazardWorld::new(cfg.world())?;
        let agent = Agent::new(&cfg)?;
        let buffer = seed_dataset(&env, &cfg)?;
        let env_steps = buffer.episodes().map(Episode::total_env_steps).sum();
        let cumulative_cost = buffer.episodes().map(Episode::total_cost).sum();
        Ok(Trainer {
            opt_model: AdamState::for_store(&agent.world.params, cfg.lr_model),
            opt_theta: AdamState::for_store(&agent.theta, cfg.lr_actor_barrier),
            opt_critic: AdamState::for_store(&agent.critic.params, cfg.lr_critic),
            cfg,
            env,
            agent,
            buffer,
            epoch: 0,
            updates: 0,
            env_steps,
            cumulative_cost,
        })
    }

    fn step_optimizer(opt: &mut AdamState, store: &mut ParamStore, mut grads: Vec<Tensor>, clip: f64) -> Result<()> {
        clip_global_norm(&mut grads, clip);
        Ok(opt.step_store(store, &grads)?)
    }

    /// Training chunks for update number `index`.
    pub fn sample_batch(&self, index: u64) -> Result<ChunkBatch> {
        let cfg = &self.cfg;
        self.buffer.sample_chunks(cfg.batch_size, cfg.chunk_length, &mut stream_rng(cfg.seed, Stream::Chunks, index))
    }

    /// One optimizer step on the latent model.
    pub fn model_step(&mut self, batch: &ChunkBatch, index: u64) -> Result<ModelLoss> {
        let tape = Tape::new();
        let wp = self.agent.world.params.bind(&tape);
        let mut noise = GaussianNoise(stream_rng(self.cfg.seed, Stream::ModelNoise, index));
        let ml = self.agent.world.model_loss(&wp, batch, &mut noise)?;
        let grads = wp.grads(&ml.total.backward()?);
        Self::step_optimizer(&mut self.opt_model, &mut self.agent.world.params, grads, self.cfg.grad_clip)?;
        Ok(ml)
    }

    /// Policy loss with the barrier penalty, bound to a fresh tape over the
    /// actor and barrier parameters, plus the critic's regression set drawn
    /// from the same imagination.
    pub fn joint_objective(&self, starts: &LatentState, batch: &ChunkBatch, index: u64) -> Result<JointObjective> {
        let cfg = &self.cfg;
        let agent = &self.agent;
        let tape = Tape::new();
        let tp = agent.theta.bind(&tape);
        let wd = agent.world.params.detached();
        let mut noise = GaussianNoise(stream_rng(cfg.seed, Stream::Imagine, index));
        let rollout = imagine(&agent.world, &wd, &agent.actor, &tp, starts, cfg.horizon, ActMode::Sample, &mut noise)?;
        let returns = imagined_return(&rollout, &agent.critic, &agent.critic.params.detached(), cfg.gamma)?;
        let values = rollout.barrier_values(&agent.barrier, &tp)?;
        let labels = rollout.unsafe_labels();
        let real = if cfg.barrier_real_labels {
            let (b, l) = (batch.batch_size(), batch.chunk_length());
            let kappas: Vec<bool> = (0..l * b).map(|row| batch.kappas.data()[(row % b) * l + row / b] > 0.5).collect();
            Some((agent.barrier.evaluate(&tp, &starts.features()?)?, kappas))
        } else {
            None
        };
        let barrier = barrier_loss_with_extra(&values, &labels, real.as_ref().map(|(v, k)| (v, k.as_slice())), &cfg.barrier())?;
        let loss = policy_loss(&returns, &barrier, cfg.beta)?;
        let mut draws = vec![rollout];
        let td = agent.theta.detached();
        for _ in 1..cfg.mc_draws {
            draws.push(imagine(&agent.world, &wd, &agent.actor, &td, starts, cfg.horizon, ActMode::Sample, &mut noise)?);
        }
        let (critic_features, critic_targets) = critic_training_set(&draws, &agent.critic, cfg.gamma)?;
        Ok(JointObjective { theta: tp, loss, barrier, critic_features, critic_targets })
    }

    /// One optimizer step on the actor and barrier from a single backward pass.
    pub fn joint_step(&mut self, objective: &JointObjective) -> Result<()> {
        let grads = objective.theta.grads(&objective.loss.backward()?);
        Self::step_optimizer(&mut self.opt_theta, &mut self.agent.theta, grads, self.cfg.grad_clip)
    }

    /// One optimizer step on the critic. Touches no other parameters.
    pub fn critic_step(&mut self, features: &Var, targets: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let cp = self.agent.critic.params.bind(&tape);
        let cl = critic_loss(&self.agent.critic, &cp, features, targets)?;
        let grads = cp.grads(&cl.backward()?);
        Self::step_optimizer(&mut self.opt_critic, &mut self.agent.critic.params, grads, self.cfg.grad_clip)?;
        Ok(cl.item())
    }

    /// One model update, one joint actor and barrier update, one critic update.
    pub fn update_step(&mut self) -> Result<UpdateLosses> {
        let index = self.updates;
        let batch = self.sample_batch(index)?;
        let ml = self.model_step(&batch, index)?;
        let starts = ml.posteriors.detach();
        let objective = self.joint_objective(&starts, &batch, index)?;
        self.joint_step(&objective)?;
        let critic = self.critic_step(&objective.critic_features, &objective.critic_targets)?;
        self.updates += 1;
        Ok(UpdateLosses {
            model: ml.total.item(),
            kl: ml.kl,
            reward: ml.reward,
            safety: ml.safety,
            reconstruction: ml.reconstruction,
            barrier: objective.barrier.terms(),
            policy: objective.loss.item(),
            critic,
        })
    }

    /// Collects one episode with the current policy and adds it to the buffer.
    pub fn collect_episode(&mut self) -> Result<Episode> {
        let index = (self.cfg.seed_episodes + self.epoch) as u64;
        let mut rng = stream_rng(self.cfg.seed, Stream::Collect, self.epoch as u64);
        let env_seed = episode_env_seed(self.cfg.seed, index);
        let (ep, _) = {
            let mut policy = agent_policy(&self.agent, ActMode::Sample, self.cfg.exploration_noise, &mut rng);
            run_episode(&self.env, self.cfg.action_repeat, env_seed, &mut policy)?
        };
        self.env_steps += ep.total_env_steps();
        self.cumulative_cost += ep.total_cost();
        self.buffer.push(ep.clone())?;
        Ok(ep)
    }

    /// `C` updates and one collected episode.
    pub fn run_epoch(&mut self) -> Result<(EpochRecord, UpdateLosses)> {
        let mut mean = UpdateLosses::default();
        let c = self.cfg.collect_interval;
        for _ in 0..c {
            let l = self.update_step()?;
            mean.accumulate(&l, 1.0 / c as f64);
        }
        let ep = self.collect_episode()?;
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            env_steps: self.env_steps,
            reward_return: ep.total_reward(),
            cost_return: ep.total_cost() as f64,
            cost_regret_running: cost_regret(self.cumulative_cost, self.env_steps)?,
            l_m: mean.model,
            l_b1: mean.barrier[0],
            l_b2: mean.barrier[1],
            l_b3: mean.barrier[2],
            l_p: mean.policy,
            critic_loss: mean.critic,
        };
        Ok((record, mean))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("config", Array::U8 { shape: vec![self.cfg.to_text().len()], data: self.cfg.to_text().into_bytes() })?;
        ck.push_u64("counters", vec![self.epoch as u64, self.updates, self.env_steps, self.cumulative_cost])?;
        self.agent.save(&mut ck)?;
        ck.push_adam("adam_model", &self.opt_model)?;
        ck.push_adam("adam_theta", &self.opt_theta)?;
        ck.push_adam("adam_critic", &self.opt_critic)?;
        self.buffer.save(&mut ck, "buffer")?;
        Ok(ck)
    }

    /// Rebuilds a trainer from a checkpoint. `cfg` may change only the
    /// epoch budget and output settings.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let saved = config_of(ck)?;
        let cfg = match cfg {
            Some(c) => {
                saved.resume_compatible(&c)?;
                c
            }
            None => saved,
        };
        let env = HazardWorld::new(cfg.world())?;
        let mut agent = Agent::new(&cfg)?;
        agent.load(ck)?;
        let mut opt_model = AdamState::for_store(&agent.world.params, cfg.lr_model);
        let mut opt_theta = AdamState::for_store(&agent.theta, cfg.lr_actor_barrier);
        let mut opt_critic = AdamState::for_store(&agent.critic.params, cfg.lr_critic);
        ck.load_adam("adam_model", &mut opt_model)?;
        ck.load_adam("adam_theta", &mut opt_theta)?;
        ck.load_adam("adam_critic", &mut opt_critic)?;
        let counters = ck.u64("counters")?;
        let [epoch, updates, env_steps, cumulative_cost] = counters[..] else {
            return Err(Error::Checkpoint("counters must hold 4 values".into()));
        };
        Ok(Trainer {
            env,
            agent,
            opt_model,
            opt_theta,
            opt_critic,
            buffer: ReplayBuffer::load(ck, "buffer")?,
            epoch: epoch as usize,
            updates,
            env_steps,
            cumulative_cost,
            cfg,
        })
    }
}

/// The training config stored in a checkpoint.
pub fn config_of(ck: &Checkpoint) -> Result<TrainConfig> {
    let text = std::str::from_utf8(ck.u8("config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    TrainConfig::parse(text)
}

/// Agent and config from a checkpoint directory.
pub fn load_agent(dir: &Path) -> Result<(TrainConfig, Agent, Checkpoint)> {
    let ck = Checkpoint::read(dir)?;
    let cfg = config_of(&ck)?;
    let mut agent = Agent::new(&cfg)?;
    agent.load(&ck)?;
    Ok((cfg, agent, ck))
}

/// Keeps the first `keep` lines of an existing log, dropping the rest.
fn truncate_log(path: &Path, keep: usize) -> Result<()> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => std::io::BufRead::lines(BufReader::new(f)).take(keep).collect::<std::io::Result<_>>()?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    if kept.len() < keep {
        return Err(Error::Checkpoint(format!("{} holds {} of the {keep} epochs in the checkpoint", path.display(), kept.len())));
    }
    let mut out = String::new();
    for l in kept {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Full training run. Writes `metrics.jsonl` and `checkpoint/` under the
/// configured output directory and returns the final trainer.
pub fn train(cfg: TrainConfig, resume: Option<&Path>) -> Result<Trainer> {
    let out_dir: PathBuf = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::from_checkpoint(&Checkpoint::read(dir)?, Some(cfg))?;
            truncate_log(&log_path, t.epoch)?;
            info!("resumed at epoch {} from {}", t.epoch, dir.display());
            t
        }
        None => {
            fs::write(&log_path, "")?;
            Trainer::new(cfg)?
        }
    };
    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?);
    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    while trainer.epoch < trainer.cfg.epochs {
        let (record, losses) = trainer.run_epoch()?;
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        log.flush()?;
        info!(
            "epoch {} steps {} reward {:.3} cost {} L_m {:.3} (kl {:.3} rec {:.4} safety {:.4}) L_b {:.4?} L_p {:.3} critic {:.4}",
            record.epoch,
            record.env_steps,
            record.reward_return,
            record.cost_return,
            record.l_m,
            losses.kl,
            losses.reconstruction,
            losses.safety,
            losses.barrier,
            record.l_p,
            record.critic_loss,
        );
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.cfg.epochs {
            trainer.checkpoint()?.write(&ck_dir)?;
        }
    }
    trainer.checkpoint()?.write(&ck_dir)?;
    Ok(trainer)
}
