//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::barrier::BarrierConfig;
use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Imagination horizon.
    pub horizon: usize,
    pub action_repeat: usize,
    /// Update steps per epoch.
    pub collect_interval: usize,
    pub batch_size: usize,
    /// Chunk length, in stored transitions.
    pub chunk_length: usize,
    /// Collected episodes after seeding; one per epoch.
    pub epochs: usize,
    /// Environment steps per episode.
    pub episode_length: usize,
    pub seed_episodes: usize,
    pub gamma: f64,
    pub exploration_noise: f64,
    pub lr_model: f64,
    pub lr_actor_barrier: f64,
    pub lr_critic: f64,
    pub barrier_eta: f64,
    pub barrier_lambda: f64,
    pub beta: [f64; 3],
    /// Imagined draws averaged into each value target.
    pub mc_draws: usize,
    pub seed: u64,
    /// Also feed real posterior latents with their true labels to the
    /// barrier's safe and unsafe terms.
    pub barrier_real_labels: bool,
    pub image_size: usize,
    pub deter_dim: usize,
    pub stoch_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub channels: [usize; 3],
    pub free_nats: f64,
    pub kappa_weight: f64,
    pub recon_weight: f64,
    pub grad_clip: f64,
    /// Oldest episodes are dropped once the buffer holds more transitions.
    pub buffer_capacity: usize,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 10,
            action_repeat: 2,
            collect_interval: 50,
            batch_size: 16,
            chunk_length: 20,
            epochs: 150,
            episode_length: 200,
            seed_episodes: 5,
            gamma: 0.99,
            exploration_noise: 0.3,
            lr_model: 6e-4,
            lr_actor_barrier: 3e-4,
            lr_critic: 3e-4,
            barrier_eta: 0.01,
            barrier_lambda: 0.1,
            beta: [1.0, 1.0, 1.0],
            mc_draws: 1,
            seed: 0,
            barrier_real_labels: false,
            image_size: 32,
            deter_dim: 64,
            stoch_dim: 16,
            embed_dim: 64,
            hidden_dim: 64,
            channels: [8, 16, 32],
            free_nats: 1.0,
            kappa_weight: 5.0,
            recon_weight: 0.1,
            grad_clip: crate::optim::GRAD_CLIP_NORM,
            buffer_capacity: 1_000_000,
            output_dir: PathBuf::from("run"),
            checkpoint_every: 10,
        }
    }
}

/// Keys that may differ between a checkpoint and the config used to resume it.
pub const RESUMABLE_KEYS: [&str; 3] = ["epochs", "output_dir", "checkpoint_every"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::Config(format!("`{key}`: expected three comma-separated values")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "horizon" => self.horizon = parse_num(key, v)?,
            "action_repeat" => self.action_repeat = parse_num(key, v)?,
            "collect_interval" => self.collect_interval = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "chunk_length" => self.chunk_length = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "episode_length" => self.episode_length = parse_num(key, v)?,
            "seed_episodes" => self.seed_episodes = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "exploration_noise" => self.exploration_noise = parse_num(key, v)?,
            "lr_model" => self.lr_model = parse_num(key, v)?,
            "lr_actor_barrier" => self.lr_actor_barrier = parse_num(key, v)?,
            "lr_critic" => self.lr_critic = parse_num(key, v)?,
            "barrier_eta" => self.barrier_eta = parse_num(key, v)?,
            "barrier_lambda" => self.barrier_lambda = parse_num(key, v)?,
            "beta" => self.beta = parse_triple(key, v)?,
            "mc_draws" => self.mc_draws = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "barrier_real_labels" => self.barrier_real_labels = parse_bool(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "deter_dim" => self.deter_dim = parse_num(key, v)?,
            "stoch_dim" => self.stoch_dim = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "channels" => self.channels = parse_triple(key, v)?,
            "free_nats" => self.free_nats = parse_num(key, v)?,
            "kappa_weight" => self.kappa_weight = parse_num(key, v)?,
            "recon_weight" => self.recon_weight = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its value, in a fixed order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("horizon", self.horizon.to_string());
        put("action_repeat", self.action_repeat.to_string());
        put("collect_interval", self.collect_interval.to_string());
        put("batch_size", self.batch_size.to_string());
        put("chunk_length", self.chunk_length.to_string());
        put("epochs", self.epochs.to_string());
        put("episode_length", self.episode_length.to_string());
        put("seed_episodes", self.seed_episodes.to_string());
        put("gamma", self.gamma.to_string());
        put("exploration_noise", self.exploration_noise.to_string());
        put("lr_model", self.lr_model.to_string());
        put("lr_actor_barrier", self.lr_actor_barrier.to_string());
        put("lr_critic", self.lr_critic.to_string());
        put("barrier_eta", self.barrier_eta.to_string());
        put("barrier_lambda", self.barrier_lambda.to_string());
        put("beta", join(&self.beta));
        put("mc_draws", self.mc_draws.to_string());
        put("seed", self.seed.to_string());
        put("barrier_real_labels", self.barrier_real_labels.to_string());
        put("image_size", self.image_size.to_string());
        put("deter_dim", self.deter_dim.to_string());
        put("stoch_dim", self.stoch_dim.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("channels", join(&self.channels));
        put("free_nats", self.free_nats.to_string());
        put("kappa_weight", self.kappa_weight.to_string());
        put("recon_weight", self.recon_weight.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("buffer_capacity", self.buffer_capacity.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Transitions stored per episode.
    pub fn transitions_per_episode(&self) -> usize {
        self.episode_length.div_ceil(self.action_repeat)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let counts = [
            ("action_repeat", self.action_repeat),
            ("collect_interval", self.collect_interval),
            ("batch_size", self.batch_size),
            ("chunk_length", self.chunk_length),
            ("epochs", self.epochs),
            ("episode_length", self.episode_length),
            ("seed_episodes", self.seed_episodes),
            ("mc_draws", self.mc_draws),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.chunk_length > self.transitions_per_episode() {
            return bad("chunk_length exceeds the transitions stored per episode");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.exploration_noise >= 0.0) {
            return bad("exploration_noise must be non-negative");
        }
        if [self.lr_model, self.lr_actor_barrier, self.lr_critic].iter().any(|lr| !(*lr >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if self.beta.iter().any(|b| !(*b >= 0.0)) {
            return bad("beta entries must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.buffer_capacity < self.transitions_per_episode() {
            return bad("buffer_capacity must hold at least one episode");
        }
        self.barrier().validate()?;
        self.model().validate()?;
        self.world().validate()
    }

    pub fn barrier(&self) -> BarrierConfig {
        BarrierConfig {
            eta: self.barrier_eta,
            lambda: self.barrier_lambda,
            hidden: vec![self.hidden_dim, self.hidden_dim],
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            action_dim: crate::env::HazardWorld::ACTION_DIM,
            deter_dim: self.deter_dim,
            stoch_dim: self.stoch_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            channels: self.channels,
            free_nats: self.free_nats,
            kappa_weight: self.kappa_weight,
            recon_weight: self.recon_weight,
        }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            episode_length: self.episode_length,
            image_size: self.image_size,
            seed: self.seed,
            ..WorldConfig::default()
        }
    }

    /// Whether `other` may resume a run started with `self`.
    pub fn resume_compatible(&self, other: &TrainConfig) -> Result<()> {
        let strip = |c: &TrainConfig| {
            c.to_text()
                .lines()
                .filter(|l| !RESUMABLE_KEYS.iter().any(|k| l.starts_with(&format!("{k} ="))))
                .map(str::to_string)
                .collect::<Vec<_>>()
        };
        let (a, b) = (strip(self), strip(other));
        match a.iter().zip(&b).find(|(x, y)| x != y) {
            Some((x, y)) => Err(Error::Config(format!("cannot resume: checkpoint has `{x}` but config has `{y}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = TrainConfig::parse("# smoke\nepochs = 3\n\nbeta = 1, 0.5, 2  # weights\nchannels=4,8,8\nbarrier_real_labels = true\nrecon_weight = 0.5\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.beta, [1.0, 0.5, 2.0]);
        assert_eq!(cfg.channels, [4, 8, 8]);
        assert!(cfg.barrier_real_labels);
        assert_eq!(cfg.recon_weight, 0.5);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "learning_rate = 1",
            "epochs = 3\nepochs = 4",
            "epochs",
            "epochs = -1",
            "gamma = 1.5",
            "beta = 1, 2",
            "chunk_length = 101",
            "barrier_lambda = 0",
            "barrier_real_labels = yes",
            "batch_size = 0",
            "recon_weight = 0",
        ] {
            assert!(TrainConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn resume_compatibility() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 7, output_dir: "elsewhere".into(), ..a.clone() };
        assert!(a.resume_compatible(&b).is_ok());
        let c = TrainConfig { seed: 9, ..a.clone() };
        assert!(a.resume_compatible(&c).is_err());
    }
}
