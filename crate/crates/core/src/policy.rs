//! Actor and critic acting on latent features, imagined rollouts through
//! the learned prior, and the actor and critic objectives.

use rand::Rng;

use crate::autodiff::Var;
use crate::barrier::{Barrier, BarrierLoss, LabeledTrajectories};
use crate::error::{Error, Result, TensorError};
use crate::model::{LatentState, NoiseSource, WorldModel, SIGMA_FLOOR};
use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    pub action_dim: usize,
}

impl Actor {
    pub fn new(store: &mut ParamStore, feature_dim: usize, hidden: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let net = Mlp::new(store, "actor", &[feature_dim, hidden, hidden, 2 * action_dim], Activation::Elu, rng);
        Actor { net, action_dim }
    }

    /// Squashed actions `[N, m]` for latent features `[N, d]`.
    pub fn act(&self, p: &Bound, features: &Var, mode: ActMode, noise: &mut dyn NoiseSource) -> Result<Var, TensorError> {
        let m = self.action_dim;
        let out = self.net.forward(p, features)?;
        let mean = out.slice_cols(0, m)?;
        match mode {
            ActMode::Mean => mean.tanh(),
            ActMode::Sample => {
                let sigma = out.slice_cols(m, 2 * m)?.softplus()?.add_scalar(SIGMA_FLOOR)?;
                let eps = noise.normal(mean.shape());
                Var::reparam_sample(&mean, &sigma, &eps)?.tanh()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ParamStore,
    pub net: Mlp,
}

impl Critic {
    pub fn new(feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let net = Mlp::new(&mut params, "critic", &[feature_dim, hidden, hidden, 1], Activation::Elu, rng);
        Critic { params, net }
    }

    /// `v(s)` as `[N]`.
    pub fn value(&self, p: &Bound, features: &Var) -> Result<Var, TensorError> {
        let n = features.shape()[0];
        self.net.forward(p, features)?.reshape(vec![n])
    }
}

/// `N` trajectories of horizon `H` imagined in lockstep.
#[derive(Clone, Debug)]
pub struct ImaginedRollout {
    /// `s_0 ..= s_H`.
    pub states: Vec<LatentState>,
    /// `a_0 .. a_{H-1}`, each `[N, m]`.
    pub actions: Vec<Var>,
    /// `r_0 .. r_{H-1}`, each `[N]`; `r_t` is the reward for taking `a_t` in `s_t`.
    pub rewards: Vec<Var>,
    /// Predicted probability that each of `s_0 ..= s_H` is unsafe, each `[N]`.
    pub safety: Vec<Var>,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn rows(&self) -> usize {
        self.states[0].rows()
    }

    /// Threshold the predicted safety at 0.5.
    pub fn unsafe_labels(&self) -> Vec<Vec<bool>> {
        self.safety.iter().map(|k| k.data().iter().map(|&v| v >= 0.5).collect()).collect()
    }

    /// Barrier value of every state, time-major.
    pub fn barrier_values(&self, barrier: &Barrier, p: &Bound) -> Result<Vec<Var>, TensorError> {
        self.states.iter().map(|s| barrier.evaluate(p, &s.features()?)).collect()
    }

    pub fn labeled(&self, barrier: &Barrier, p: &Bound) -> Result<LabeledTrajectories, TensorError> {
        Ok(LabeledTrajectories {
            values: self.barrier_values(barrier, p)?.iter().map(|v| v.data().to_vec()).collect(),
            unsafe_: self.unsafe_labels(),
        })
    }
}

/// Roll the prior forward from `starts` with actions sampled from the actor.
///
/// Gradients reach the actor through the actions and the dynamics; `wp` is
/// normally the world model's detached parameters.
#[allow(clippy::too_many_arguments)]
pub fn imagine(
    world: &WorldModel,
    wp: &Bound,
    actor: &Actor,
    ap: &Bound,
    starts: &LatentState,
    horizon: usize,
    mode: ActMode,
    noise: &mut dyn NoiseSource,
) -> Result<ImaginedRollout, TensorError> {
    let mut states = vec![starts.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut safety = vec![world.predict_safety(wp, starts)?];
    for _ in 0..horizon {
        let s = states.last().expect("non-empty");
        let a = actor.act(ap, &s.features()?, mode, noise)?;
        let next = world.prior_step(wp, s, &a, noise)?;
        rewards.push(world.predict_reward(wp, &next, &a)?);
        safety.push(world.predict_safety(wp, &next)?);
        actions.push(a);
        states.push(next);
    }
    Ok(ImaginedRollout { states, actions, rewards, safety })
}

/// `sum_t gamma^t r_t + gamma^H v(s_H)` per trajectory, differentiable
/// through rewards and the terminal state.
pub fn imagined_return(rollout: &ImaginedRollout, critic: &Critic, cp: &Bound, gamma: f64) -> Result<Var, TensorError> {
    let h = rollout.horizon();
    let terminal = critic.value(cp, &rollout.states[h].features()?)?;
    let mut total = terminal.scale(gamma.powi(h as i32))?;
    for (t, r) in rollout.rewards.iter().enumerate() {
        total = total.add(&r.scale(gamma.powi(t as i32))?)?;
    }
    Ok(total)
}

/// Discounted sum of `rewards[t][i]` plus `gamma^H * terminal[i]`.
pub fn discounted_target(rewards: &[Vec<f64>], terminal: &[f64], gamma: f64) -> Vec<f64> {
    let mut acc = terminal.to_vec();
    for r in rewards.iter().rev() {
        for (a, &r) in acc.iter_mut().zip(r) {
            *a = r + gamma * *a;
        }
    }
    acc
}

/// Value targets for every non-terminal state of a rollout: the target of
/// `s_k` bootstraps from `v(s_H)` over the remaining `H - k` rewards.
/// Element `k` of the result holds the `N` targets for `s_k`.
pub fn suffix_value_targets(rewards: &[Vec<f64>], terminal: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); rewards.len()];
    let mut acc = terminal.to_vec();
    for (k, r) in rewards.iter().enumerate().rev() {
        for (a, &r) in acc.iter_mut().zip(r) {
            *a = r + gamma * *a;
        }
        out[k] = acc.clone();
    }
    out
}

/// Monte Carlo value targets for the start states, averaged over draws that
/// all began from the same starts. Nothing here is differentiable.
pub fn mc_value_target(draws: &[ImaginedRollout], critic: &Critic, gamma: f64) -> Result<Vec<f64>, TensorError> {
    let Some(first) = draws.first() else {
        return Err(TensorError::shape("mc_value_target", "no rollouts"));
    };
    let cp = critic.params.detached();
    let mut mean = vec![0.0; first.rows()];
    for d in draws {
        let terminal = critic.value(&cp, &d.states[d.horizon()].detach().features()?)?;
        let rewards: Vec<Vec<f64>> = d.rewards.iter().map(|r| r.data().to_vec()).collect();
        for (m, v) in mean.iter_mut().zip(discounted_target(&rewards, terminal.data(), gamma)) {
            *m += v / draws.len() as f64;
        }
    }
    Ok(mean)
}

/// Detached features and targets on which the critic regresses: the start
/// states with their draw-averaged targets, and the intermediate states of
/// every draw with their suffix targets.
pub fn critic_training_set(draws: &[ImaginedRollout], critic: &Critic, gamma: f64) -> Result<(Var, Tensor), TensorError> {
    let start_targets = mc_value_target(draws, critic, gamma)?;
    let cp = critic.params.detached();
    let mut features = vec![draws[0].states[0].detach().features()?];
    let mut targets = start_targets;
    for d in draws {
        let h = d.horizon();
        let terminal = critic.value(&cp, &d.states[h].detach().features()?)?;
        let rewards: Vec<Vec<f64>> = d.rewards.iter().map(|r| r.data().to_vec()).collect();
        let suffix = suffix_value_targets(&rewards, terminal.data(), gamma);
        for k in 1..h {
            features.push(d.states[k].detach().features()?);
            targets.extend_from_slice(&suffix[k]);
        }
    }
    let n = targets.len();
    Ok((Var::concat_rows(&features.iter().collect::<Vec<_>>())?, Tensor::new(vec![n], targets)?))
}

/// `-mean(J) + beta . L_b`.
pub fn policy_loss(returns: &Var, barrier: &BarrierLoss, beta: [f64; 3]) -> Result<Var> {
    if beta.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::Invalid(format!("beta entries must be nonnegative, got {beta:?}")));
    }
    Ok(returns.mean()?.neg()?.add(&barrier.weighted(beta)?)?)
}

/// `mean(0.5 (v(s) - target)^2)` with the targets held constant.
pub fn critic_loss(critic: &Critic, cp: &Bound, features: &Var, targets: &Tensor) -> Result<Var, TensorError> {
    let v = critic.value(cp, &features.detach())?;
    if v.shape() != targets.shape() {
        return Err(TensorError::shape("critic_loss", format!("{} values, targets {:?}", v.shape()[0], targets.shape())));
    }
    v.sub(&Var::constant(targets.clone()))?.square()?.mean()?.scale(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{barrier_loss, BarrierConfig};
    use crate::model::{GaussianNoise, ModelConfig, ZeroNoise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn features(n: usize, d: usize, seed: u64) -> Var {
        let mut r = rng(seed);
        Var::constant(Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap())
    }

    fn small_world() -> WorldModel {
        let cfg = ModelConfig {
            image_size: 8,
            deter_dim: 6,
            stoch_dim: 3,
            embed_dim: 5,
            hidden_dim: 7,
            channels: [2, 2, 2],
            ..ModelConfig::default()
        };
        WorldModel::new(cfg, &mut rng(0)).unwrap()
    }

    #[test]
    fn actions_are_bounded_and_mean_mode_is_deterministic() {
        let mut store = ParamStore::new();
        let actor = Actor::new(&mut store, 5, 8, 2, &mut rng(1));
        let p = store.detached();
        let x = features(10, 5, 2).value().map(|v| v * 100.0);
        let x = Var::constant(x);
        let a = actor.act(&p, &x, ActMode::Mean, &mut ZeroNoise).unwrap();
        let b = actor.act(&p, &x, ActMode::Mean, &mut GaussianNoise(rng(9))).unwrap();
        assert_eq!(a.value(), b.value());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let s = actor.act(&p, &x, ActMode::Sample, &mut GaussianNoise(rng(3))).unwrap();
        assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let zero = actor.act(&p, &x, ActMode::Sample, &mut ZeroNoise).unwrap();
        assert_eq!(zero.value(), a.value());
    }

    #[test]
    fn mc_arithmetic() {
        let t = discounted_target(&[vec![1.0], vec![1.0]], &[10.0], 0.9);
        assert!((t[0] - 10.0).abs() < 1e-9);
        let t = discounted_target(&[vec![3.0], vec![7.0]], &[100.0], 0.0);
        assert_eq!(t, vec![3.0]);
        let t = discounted_target(&vec![vec![0.0]; 4], &[2.0], 0.5);
        assert!((t[0] - 2.0 * 0.5f64.powi(4)).abs() < 1e-15);
        let s = suffix_value_targets(&[vec![1.0], vec![1.0]], &[10.0], 0.9);
        assert!((s[0][0] - 10.0).abs() < 1e-9 && (s[1][0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn imagine_with_zero_horizon_returns_the_start() {
        let world = small_world();
        let mut store = ParamStore::new();
        let actor = Actor::new(&mut store, world.cfg.feature_dim(), 8, 2, &mut rng(4));
        let start = LatentState::initial(3, &world.cfg);
        let r = imagine(&world, &world.params.detached(), &actor, &store.detached(), &start, 0, ActMode::Sample, &mut ZeroNoise).unwrap();
        assert_eq!(r.states.len(), 1);
        assert!(r.actions.is_empty() && r.rewards.is_empty());
        assert_eq!(r.safety.len(), 1);
    }

    #[test]
    fn imagine_is_deterministic_for_fixed_noise() {
        let world = small_world();
        let mut store = ParamStore::new();
        let actor = Actor::new(&mut store, world.cfg.feature_dim(), 8, 2, &mut rng(4));
        let start = LatentState::initial(4, &world.cfg);
        let run = || imagine(&world, &world.params.detached(), &actor, &store.detached(), &start, 5, ActMode::Sample, &mut GaussianNoise(rng(7))).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.states.len(), 6);
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.z.value(), y.z.value());
        }
        for (x, y) in a.rewards.iter().zip(&b.rewards) {
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn imagined_return_matches_mc_arithmetic() {
        let world = small_world();
        let mut store = ParamStore::new();
        let actor = Actor::new(&mut store, world.cfg.feature_dim(), 8, 2, &mut rng(4));
        let critic = Critic::new(world.cfg.feature_dim(), 8, &mut rng(5));
        let start = LatentState::initial(4, &world.cfg);
        let r = imagine(&world, &world.params.detached(), &actor, &store.detached(), &start, 3, ActMode::Sample, &mut GaussianNoise(rng(1))).unwrap();
        let j = imagined_return(&r, &critic, &critic.params.detached(), 0.9).unwrap();
        let v = mc_value_target(std::slice::from_ref(&r), &critic, 0.9).unwrap();
        for (a, b) in j.data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_loss_beta_handling() {
        let j = Var::constant(Tensor::vector(vec![1.0, 3.0]));
        let lb = barrier_loss(&[Var::constant(Tensor::vector(vec![0.0, 0.0]))], &[vec![false, true]], &BarrierConfig::default()).unwrap();
        let l0 = policy_loss(&j, &lb, [0.0; 3]).unwrap();
        assert_eq!(l0.item(), -2.0);
        let l1 = policy_loss(&j, &lb, [1.0, 2.0, 3.0]).unwrap();
        assert!((l1.item() - (-2.0 + 0.01 + 0.03)).abs() < 1e-12);
        assert!(policy_loss(&j, &lb, [1.0, -1.0, 0.0]).is_err());

        let zero = barrier_loss(&[Var::constant(Tensor::vector(vec![1.0]))], &[vec![false]], &BarrierConfig::default()).unwrap();
        let a = policy_loss(&j, &zero, [0.0; 3]).unwrap().item();
        let b = policy_loss(&j, &zero, [5.0, 5.0, 5.0]).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_loss_examples() {
        let mut critic = Critic::new(4, 8, &mut rng(6));
        critic.net.zero_output(&mut critic.params);
        let p = critic.params.detached();
        let x = features(5, 4, 3);
        let l = critic_loss(&critic, &p, &x, &Tensor::full(vec![5], 3.0)).unwrap();
        assert!((l.item() - 4.5).abs() < 1e-12);
        let perfect = critic.value(&p, &x).unwrap().value().clone();
        assert_eq!(critic_loss(&critic, &p, &x, &perfect).unwrap().item(), 0.0);
    }

    #[test]
    fn critic_training_set_covers_starts_and_intermediate_states() {
        let world = small_world();
        let mut store = ParamStore::new();
        let actor = Actor::new(&mut store, world.cfg.feature_dim(), 8, 2, &mut rng(4));
        let critic = Critic::new(world.cfg.feature_dim(), 8, &mut rng(5));
        let start = LatentState::initial(3, &world.cfg);
        let draws: Vec<_> = (0..2)
            .map(|i| imagine(&world, &world.params.detached(), &actor, &store.detached(), &start, 4, ActMode::Sample, &mut GaussianNoise(rng(10 + i))).unwrap())
            .collect();
        let (x, y) = critic_training_set(&draws, &critic, 0.99).unwrap();
        assert_eq!(x.shape()[0], 3 + 2 * 3 * 3);
        assert_eq!(y.shape(), &[x.shape()[0]]);
        assert!(!x.is_recorded());
    }
}
