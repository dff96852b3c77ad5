//! Recurrent latent world model: convolutional encoder and decoder, a GRU
//! transition with Gaussian prior and posterior heads, and reward and
//! safety predictors, trained jointly by [`WorldModel::model_loss`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::nn::{Activation, Bound, Conv2d, ConvTranspose2d, Dense, GruCell, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Floor added to every softplus-produced standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub action_dim: usize,
    /// Width of the deterministic recurrent state.
    pub deter_dim: usize,
    /// Width of the stochastic latent.
    pub stoch_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub channels: [usize; 3],
    pub free_nats: f64,
    /// Weight of unsafe steps in the safety regression term.
    pub kappa_weight: f64,
    /// Weight on the squared pixel error summed over each frame;
    /// `1 / (2 s^2)` for a Gaussian pixel likelihood of standard deviation `s`.
    pub recon_weight: f64,
}


impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            action_dim: 2,
            deter_dim: 64,
            stoch_dim: 16,
            embed_dim: 64,
            hidden_dim: 64,
            channels: [8, 16, 32],
            free_nats: 1.0,
            kappa_weight: 5.0,
            recon_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.deter_dim + self.stoch_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(crate::Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if [self.action_dim, self.deter_dim, self.stoch_dim, self.embed_dim, self.hidden_dim]
            .contains(&0)
            || self.channels.contains(&0)
        {
            return Err(crate::Error::Config("model widths must be positive".into()));
        }
        if !(self.free_nats >= 0.0) || !(self.kappa_weight > 0.0) || !(self.recon_weight > 0.0) {
            return Err(crate::Error::Config("free_nats must be >= 0, kappa_weight and recon_weight > 0".into()));
        }
        Ok(())
    }
}

/// Source of standard-normal noise for reparameterized sampling.
pub trait NoiseSource {
    fn normal(&mut self, shape: &[usize]) -> Tensor;
}

/// Seeded Gaussian noise.
pub struct GaussianNoise(pub ChaCha8Rng);

impl NoiseSource for GaussianNoise {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// Always zero: samples collapse onto their means.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape.to_vec())
    }
}

/// A batch of latent states, one per row.
#[derive(Clone, Debug)]
pub struct LatentState {
    /// Deterministic recurrent part `[N, deter]`.
    pub h: Var,
    /// Moments of the stochastic part `[N, stoch]`.
    pub mu: Var,
    pub sigma: Var,
    /// Drawn sample `[N, stoch]`.
    pub z: Var,
}

impl LatentState {
    /// Zeros with unit standard deviation.
    pub fn initial(rows: usize, cfg: &ModelConfig) -> Self {
        let stoch = || Var::constant(Tensor::zeros(vec![rows, cfg.stoch_dim]));
        LatentState {
            h: Var::constant(Tensor::zeros(vec![rows, cfg.deter_dim])),
            mu: stoch(),
            sigma: Var::constant(Tensor::ones(vec![rows, cfg.stoch_dim])),
            z: stoch(),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.shape()[0]
    }

    /// `(h, z)`, the input of every downstream head.
    pub fn features(&self) -> Result<Var, TensorError> {
        Var::concat_cols(&[&self.h, &self.z])
    }

    pub fn detach(&self) -> Self {
        LatentState {
            h: self.h.detach(),
            mu: self.mu.detach(),
            sigma: self.sigma.detach(),
            z: self.z.detach(),
        }
    }

    /// Row-wise concatenation of several batches.
    pub fn stack(states: &[LatentState]) -> Result<Self, TensorError> {
        let cat = |f: fn(&LatentState) -> &Var| Var::concat_rows(&states.iter().map(f).collect::<Vec<_>>());
        Ok(LatentState {
            h: cat(|s| &s.h)?,
            mu: cat(|s| &s.mu)?,
            sigma: cat(|s| &s.sigma)?,
            z: cat(|s| &s.z)?,
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        Ok(LatentState {
            h: self.h.slice_rows(start, end)?,
            mu: self.mu.slice_rows(start, end)?,
            sigma: self.sigma.slice_rows(start, end)?,
            z: self.z.slice_rows(start, end)?,
        })
    }
}

/// Sequence chunks sampled from the replay buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkBatch {
    /// `[B, L, 3, H, W]`, values in `[0, 1]`.
    pub observations: Tensor,
    /// `[B, L, m]`.
    pub actions: Tensor,
    /// `[B, L]`.
    pub rewards: Tensor,
    /// `[B, L]`, each 0 or 1.
    pub kappas: Tensor,
}

impl ChunkBatch {
    pub fn batch_size(&self) -> usize {
        self.rewards.shape()[0]
    }

    pub fn chunk_length(&self) -> usize {
        self.rewards.shape()[1]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), TensorError> {
        let bad = |d: String| Err(TensorError::shape("ChunkBatch", d));
        let [b, l] = self.rewards.shape() else {
            return bad(format!("rewards must be [B,L], got {:?}", self.rewards.shape()));
        };
        let (b, l) = (*b, *l);
        let s = cfg.image_size;
        if self.observations.shape() != [b, l, 3, s, s] {
            return bad(format!("observations {:?} for B={b}, L={l}", self.observations.shape()));
        }
        if self.actions.shape() != [b, l, cfg.action_dim] {
            return bad(format!("actions {:?} for B={b}, L={l}", self.actions.shape()));
        }
        if self.kappas.shape() != [b, l] {
            return bad(format!("kappas {:?} for B={b}, L={l}", self.kappas.shape()));
        }
        if self.observations.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("pixel values outside [0,1]".into());
        }
        if self.kappas.data().iter().any(|&k| k != 0.0 && k != 1.0) {
            return bad("kappa labels must be 0 or 1".into());
        }
        Ok(())
    }

    /// Reorder a `[B, L, ...]` tensor to time-major `[L*B, ...]`.
    fn time_major(t: &Tensor) -> Tensor {
        let shape = t.shape();
        let (b, l) = (shape[0], shape[1]);
        let row: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(t.numel());
        for step in 0..l {
            for seq in 0..b {
                data.extend_from_slice(&t.data()[(seq * l + step) * row..][..row]);
            }
        }
        let mut out_shape = vec![l * b];
        out_shape.extend_from_slice(&shape[2..]);
        Tensor::new(out_shape, data).expect("same numel")
    }
}

/// Scalars and latents produced by one evaluation of the model loss.
pub struct ModelLoss {
    pub total: Var,
    pub kl: f64,
    pub reward: f64,
    pub safety: f64,
    pub reconstruction: f64,
    /// Time-major posterior latents `[L*B]`, row `t*B + b`.
    pub posteriors: LatentState,
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: [Conv2d; 3],
    out: Dense,
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Dense,
    deconvs: [ConvTranspose2d; 3],
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    action_feature: Dense,
    pub gru: GruCell,
    pub prior_head: Mlp,
    pub posterior_head: Mlp,
    pub reward_head: Mlp,
    pub safety_head: Mlp,
}

impl WorldModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let [c1, c2, c3] = cfg.channels;
        let side = cfg.image_size / 8;
        let flat = c3 * side * side;
        let hid = cfg.hidden_dim;
        let feat = cfg.feature_dim();
        let encoder = Encoder {
            convs: [
                Conv2d::new(&mut p, "encoder.conv0", 3, c1, 4, 2, 1, rng),
                Conv2d::new(&mut p, "encoder.conv1", c1, c2, 4, 2, 1, rng),
                Conv2d::new(&mut p, "encoder.conv2", c2, c3, 4, 2, 1, rng),
            ],
            out: Dense::new(&mut p, "encoder.out", flat, cfg.embed_dim, rng),
        };
        let decoder = Decoder {
            input: Dense::new(&mut p, "decoder.in", feat, flat, rng),
            deconvs: [
                ConvTranspose2d::new(&mut p, "decoder.deconv0", c3, c2, 4, 2, 1, rng),
                ConvTranspose2d::new(&mut p, "decoder.deconv1", c2, c1, 4, 2, 1, rng),
                ConvTranspose2d::new(&mut p, "decoder.deconv2", c1, 3, 4, 2, 1, rng),
            ],
        };
        let action_feature = Dense::new(&mut p, "transition.input", cfg.stoch_dim + cfg.action_dim, hid, rng);
        let gru = GruCell::new(&mut p, "transition.gru", hid, cfg.deter_dim, rng);
        let prior_head = Mlp::new(&mut p, "prior", &[cfg.deter_dim, hid, 2 * cfg.stoch_dim], Activation::Elu, rng);
        let posterior_head = Mlp::new(
            &mut p,
            "posterior",
            &[cfg.deter_dim + cfg.embed_dim, hid, 2 * cfg.stoch_dim],
            Activation::Elu,
            rng,
        );
        let reward_head = Mlp::new(&mut p, "reward", &[feat + cfg.action_dim, hid, hid, 1], Activation::Elu, rng);
        let safety_head = Mlp::new(&mut p, "safety", &[feat, hid, hid, 1], Activation::Elu, rng);
        Ok(WorldModel {
            cfg,
            params: p,
            encoder,
            decoder,
            action_feature,
            gru,
            prior_head,
            posterior_head,
            reward_head,
            safety_head,
        })
    }

    fn image_dims(&self) -> [usize; 3] {
        [3, self.cfg.image_size, self.cfg.image_size]
    }

    /// `[N,3,H,W]` pixels to `[N, embed]`.
    pub fn encode(&self, p: &Bound, obs: &Var) -> Result<Var, TensorError> {
        let shape = obs.shape();
        if shape.len() != 4 || shape[1..] != self.image_dims() {
            return Err(TensorError::shape("encode", format!("expected [N,{:?}], got {shape:?}", self.image_dims())));
        }
        let n = shape[0];
        let mut x = obs.clone();
        for conv in &self.encoder.convs {
            x = conv.forward(p, &x)?.elu()?;
        }
        let flat = x.numel_per_row();
        self.encoder.out.forward(p, &x.reshape(vec![n, flat])?)?.elu()
    }

    fn split_moments(stats: &Var, d: usize) -> Result<(Var, Var), TensorError> {
        let mu = stats.slice_cols(0, d)?;
        let sigma = stats.slice_cols(d, 2 * d)?.softplus()?.add_scalar(SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// Deterministic part of the transition: `h' = gru(h, f(z, a))`.
    pub fn transition(&self, p: &Bound, prev: &LatentState, action: &Var) -> Result<Var, TensorError> {
        if action.shape() != [prev.rows(), self.cfg.action_dim] {
            return Err(TensorError::shape("transition", format!("action {:?} for {} rows", action.shape(), prev.rows())));
        }
        let x = self.action_feature.forward(p, &Var::concat_cols(&[&prev.z, action])?)?.elu()?;
        self.gru.forward(p, &prev.h, &x)
    }

    fn sample(h: Var, mu: Var, sigma: Var, noise: &mut dyn NoiseSource) -> Result<LatentState, TensorError> {
        let eps = noise.normal(mu.shape());
        let z = Var::reparam_sample(&mu, &sigma, &eps)?;
        Ok(LatentState { h, mu, sigma, z })
    }

    pub fn prior_from(&self, p: &Bound, h: &Var, noise: &mut dyn NoiseSource) -> Result<LatentState, TensorError> {
        let (mu, sigma) = Self::split_moments(&self.prior_head.forward(p, h)?, self.cfg.stoch_dim)?;
        Self::sample(h.clone(), mu, sigma, noise)
    }

    pub fn posterior_from(&self, p: &Bound, h: &Var, embed: &Var, noise: &mut dyn NoiseSource) -> Result<LatentState, TensorError> {
        let input = Var::concat_cols(&[h, embed])?;
        let (mu, sigma) = Self::split_moments(&self.posterior_head.forward(p, &input)?, self.cfg.stoch_dim)?;
        Self::sample(h.clone(), mu, sigma, noise)
    }

    /// One step of the transition model without an observation.
    pub fn prior_step(&self, p: &Bound, prev: &LatentState, action: &Var, noise: &mut dyn NoiseSource) -> Result<LatentState, TensorError> {
        let h = self.transition(p, prev, action)?;
        self.prior_from(p, &h, noise)
    }

    /// One filtering step that also conditions on the observation `[N,3,H,W]`.
    pub fn posterior_step(&self, p: &Bound, prev: &LatentState, action: &Var, obs: &Var, noise: &mut dyn NoiseSource) -> Result<LatentState, TensorError> {
        let h = self.transition(p, prev, action)?;
        let embed = self.encode(p, obs)?;
        self.posterior_from(p, &h, &embed, noise)
    }

    /// Prior and posterior for the same `(prev, action)`, sharing `h'`.
    pub fn observe_step(
        &self,
        p: &Bound,
        prev: &LatentState,
        action: &Var,
        embed: &Var,
        noise: &mut dyn NoiseSource,
    ) -> Result<(LatentState, LatentState), TensorError> {
        let h = self.transition(p, prev, action)?;
        let prior = self.prior_from(p, &h, noise)?;
        let post = self.posterior_from(p, &h, embed, noise)?;
        Ok((prior, post))
    }

    /// Reconstructed images `[N,3,H,W]` in `(0,1)`.
    pub fn decode(&self, p: &Bound, s: &LatentState) -> Result<Var, TensorError> {
        self.decode_features(p, &s.features()?)
    }

    pub fn decode_features(&self, p: &Bound, features: &Var) -> Result<Var, TensorError> {
        let n = features.shape()[0];
        let side = self.cfg.image_size / 8;
        let mut x = self.decoder.input.forward(p, features)?.elu()?;
        x = x.reshape(vec![n, self.cfg.channels[2], side, side])?;
        let last = self.decoder.deconvs.len() - 1;
        for (i, deconv) in self.decoder.deconvs.iter().enumerate() {
            x = deconv.forward(p, &x)?;
            x = if i < last { x.elu()? } else { x.sigmoid()? };
        }
        Ok(x)
    }

    /// Predicted reward `[N]` for the latent reached by `action`.
    pub fn predict_reward(&self, p: &Bound, s: &LatentState, action: &Var) -> Result<Var, TensorError> {
        self.predict_reward_features(p, &s.features()?, action)
    }

    pub fn predict_reward_features(&self, p: &Bound, features: &Var, action: &Var) -> Result<Var, TensorError> {
        let n = features.shape()[0];
        self.reward_head.forward(p, &Var::concat_cols(&[features, action])?)?.reshape(vec![n])
    }

    /// Probability `[N]` that the latent is unsafe.
    pub fn predict_safety(&self, p: &Bound, s: &LatentState) -> Result<Var, TensorError> {
        self.predict_safety_features(p, &s.features()?)
    }

    pub fn predict_safety_features(&self, p: &Bound, features: &Var) -> Result<Var, TensorError> {
        let n = features.shape()[0];
        self.safety_head.forward(p, features)?.sigmoid()?.reshape(vec![n])
    }

    /// Joint latent-model objective over a chunk batch:
    ///
    /// `sum_t [max(KL(post_t || prior_t), free_nats) + (r_hat - r)^2
    ///   + w_k (k_hat - k)^2 + w_o |o_hat - o|^2]`, averaged over sequences,
    /// with `w_k = kappa_weight` on unsafe steps and 1 elsewhere, and
    /// `w_o = recon_weight`.
    pub fn model_loss(&self, p: &Bound, batch: &ChunkBatch, noise: &mut dyn NoiseSource) -> Result<ModelLoss, TensorError> {
        batch.validate(&self.cfg)?;
        let (b, l) = (batch.batch_size(), batch.chunk_length());
        let obs = Var::constant(ChunkBatch::time_major(&batch.observations));
        let actions = ChunkBatch::time_major(&batch.actions);
        let rewards = ChunkBatch::time_major(&batch.rewards.reshape(vec![b, l, 1])?).reshape(vec![l * b])?;
        let kappas = ChunkBatch::time_major(&batch.kappas.reshape(vec![b, l, 1])?).reshape(vec![l * b])?;
        let actions = Var::constant(actions);

        let embed = self.encode(p, &obs)?;
        let mut state = LatentState::initial(b, &self.cfg);
        let mut posts = Vec::with_capacity(l);
        let mut kls = Vec::with_capacity(l);
        for t in 0..l {
            let a_t = actions.slice_rows(t * b, (t + 1) * b)?;
            let e_t = embed.slice_rows(t * b, (t + 1) * b)?;
            let (prior, post) = self.observe_step(p, &state, &a_t, &e_t, noise)?;
            kls.push(Var::gaussian_kl_diag(&post.mu, &post.sigma, &prior.mu, &prior.sigma)?);
            posts.push(post.clone());
            state = post;
        }
        let posteriors = LatentState::stack(&posts)?;
        let features = posteriors.features()?;
        let per_seq = 1.0 / b as f64;

        let free = self.cfg.free_nats;
        let kl = Var::concat_rows(&kls.iter().collect::<Vec<_>>())?;
        let kl_term = kl.add_scalar(-free)?.relu()?.add_scalar(free)?.sum()?.scale(per_seq)?;

        let reward_pred = self.predict_reward_features(p, &features, &actions)?;
        let reward_term = reward_pred.sub(&Var::constant(rewards))?.square()?.sum()?.scale(per_seq)?;

        let weights = kappas.map(|k| if k > 0.5 { self.cfg.kappa_weight } else { 1.0 });
        let safety_pred = self.predict_safety_features(p, &features)?;
        let safety_term = safety_pred
            .sub(&Var::constant(kappas))?
            .square()?
            .mul(&Var::constant(weights))?
            .sum()?
            .scale(per_seq)?;

        let recon = self.decode_features(p, &features)?;
        let recon_term = recon.sub(&obs)?.square()?.sum()?.scale(per_seq * self.cfg.recon_weight)?;

        let total = kl_term.add(&reward_term)?.add(&safety_term)?.add(&recon_term)?;
        Ok(ModelLoss {
            kl: kl_term.item(),
            reward: reward_term.item(),
            safety: safety_term.item(),
            reconstruction: recon_term.item(),
            total,
            posteriors,
        })
    }
}

trait RowWidth {
    fn numel_per_row(&self) -> usize;
}

impl RowWidth for Var {
    fn numel_per_row(&self) -> usize {
        self.shape()[1..].iter().product()
    }
}
