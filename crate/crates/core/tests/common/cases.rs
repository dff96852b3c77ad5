//! Finite-difference cases shared by the gradient tests and the acceptance
//! report. Each returns the worst relative error it saw.

use pixel_barrier::barrier::{barrier_loss, Barrier, BarrierConfig};
use pixel_barrier::model::{ChunkBatch, GaussianNoise, LatentState, ModelConfig, WorldModel};
use pixel_barrier::nn::{Bound, GruCell, ParamStore};
use pixel_barrier::policy::{critic_loss, imagine, imagined_return, policy_loss, ActMode, Actor, Critic};
use pixel_barrier::{Tensor, Var};

use super::{gradcheck, random_tensor, rng};

pub type Case = (&'static str, fn() -> f64);

pub const OPERATIONS: &[Case] = &[
    ("conv2d", conv2d),
    ("conv2d_transpose", conv2d_transpose),
    ("dense_tanh_dense", dense_tanh_dense),
    ("activations", activations),
    ("reductions_and_shapes", reductions_and_shapes),
    ("gaussian_kl", gaussian_kl),
    ("reparam_sample", reparam_sample),
    ("gru_three_steps", gru_three_steps),
];

pub const LOSSES: &[Case] = &[
    ("model_loss", model_loss),
    ("barrier_loss", barrier_loss_case),
    ("policy_loss", policy_loss_case),
    ("critic_loss", critic_loss_case),
];

/// Fixed random weights used to turn tensor outputs into scalars, so every
/// output element receives a distinct upstream gradient.
pub fn readout(v: &Var, seed: u64) -> Var {
    let w = random_tensor(&mut rng(seed), v.shape(), -1.0, 1.0);
    v.mul(&Var::constant(w)).unwrap().sum().unwrap()
}

pub fn conv2d() -> f64 {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let k = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    [(1, 0), (2, 1), (1, 1)]
        .into_iter()
        .map(|(stride, pad)| gradcheck(&[x.clone(), k.clone()], |v| readout(&v[0].conv2d(&v[1], stride, pad).unwrap(), 7)))
        .fold(0.0, f64::max)
}

pub fn conv2d_transpose() -> f64 {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let k = random_tensor(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2], -1.0, 1.0);
    gradcheck(&[x, k, b], |v| {
        let y = v[0].conv2d_transpose(&v[1], 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 6]);
        readout(&y.add_channel_bias(&v[2]).unwrap(), 8)
    })
}

pub fn dense_tanh_dense() -> f64 {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let w1 = random_tensor(&mut r, &[5, 4], -1.0, 1.0);
    let b1 = random_tensor(&mut r, &[5], -1.0, 1.0);
    let w2 = random_tensor(&mut r, &[2, 5], -1.0, 1.0);
    let b2 = random_tensor(&mut r, &[2], -1.0, 1.0);
    gradcheck(&[x, w1, b1, w2, b2], |v| {
        let h = v[0].dense(&v[1], &v[2]).unwrap().tanh().unwrap();
        readout(&h.dense(&v[3], &v[4]).unwrap(), 9)
    })
}

pub fn activations() -> f64 {
    // Inputs are kept away from the kinks of relu and elu.
    let mut r = rng(5);
    let mut x = random_tensor(&mut r, &[4, 6], -2.0, 2.0);
    x.data_mut().iter_mut().for_each(|v| if v.abs() < 0.05 { *v += 0.1 });
    type Act = fn(&Var) -> Var;
    let acts: [Act; 8] = [
        |v| v.relu().unwrap(),
        |v| v.elu().unwrap(),
        |v| v.tanh().unwrap(),
        |v| v.sigmoid().unwrap(),
        |v| v.softplus().unwrap(),
        |v| v.exp().unwrap(),
        |v| v.square().unwrap(),
        |v| v.neg().unwrap(),
    ];
    acts.into_iter().map(|act| gradcheck(&[x.clone()], |v| readout(&act(&v[0]), 10))).fold(0.0, f64::max)
}

pub fn reductions_and_shapes() -> f64 {
    let mut r = rng(6);
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let first = gradcheck(&[a.clone(), b], |v| {
        let cat = Var::concat_cols(&[&v[0], &v[1]]).unwrap();
        let rows = Var::concat_rows(&[&cat.slice_rows(1, 3).unwrap(), &cat]).unwrap();
        let part = rows.slice_cols(1, 5).unwrap().sum_cols().unwrap();
        let m = v[0].mse_loss(&v[0].scale(0.3).unwrap().add_scalar(0.2).unwrap()).unwrap();
        readout(&part, 11).add(&m).unwrap().add(&v[1].mean().unwrap()).unwrap()
    });
    let second = gradcheck(&[a], |v| {
        let shifted = v[0].reshape(vec![2, 6]).unwrap().sub(&Var::constant(Tensor::ones(vec![2, 6]))).unwrap();
        readout(&shifted.square().unwrap(), 12)
    });
    first.max(second)
}

pub fn gaussian_kl() -> f64 {
    let mut r = rng(7);
    let mq = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let sq = random_tensor(&mut r, &[3, 4], 0.3, 2.0);
    let mp = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let sp = random_tensor(&mut r, &[3, 4], 0.3, 2.0);
    gradcheck(&[mq, sq, mp, sp], |v| readout(&Var::gaussian_kl_diag(&v[0], &v[1], &v[2], &v[3]).unwrap(), 13))
}

pub fn reparam_sample() -> f64 {
    let mut r = rng(8);
    let mu = random_tensor(&mut r, &[5], -1.0, 1.0);
    let sigma = random_tensor(&mut r, &[5], 0.1, 1.0);
    let noise = random_tensor(&mut r, &[5], -2.0, 2.0);
    gradcheck(&[mu, sigma], |v| readout(&Var::reparam_sample(&v[0], &v[1], &noise).unwrap().tanh().unwrap(), 14))
}

pub fn gru_three_steps() -> f64 {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut r);
    let mut inputs: Vec<Tensor> = store.tensors().cloned().collect();
    let n_params = inputs.len();
    inputs.push(random_tensor(&mut r, &[2, 4], -0.9, 0.9));
    for _ in 0..3 {
        inputs.push(random_tensor(&mut r, &[2, 3], -1.0, 1.0));
    }
    gradcheck(&inputs, |v| {
        let p = Bound::from_vars(v[..n_params].to_vec());
        let mut h = v[n_params].clone();
        for x in &v[n_params + 1..] {
            h = cell.forward(&p, &h, x).unwrap();
        }
        readout(&h, 15)
    })
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        deter_dim: 5,
        stoch_dim: 3,
        embed_dim: 4,
        hidden_dim: 6,
        channels: [2, 2, 3],
        // Keeps the KL term away from its clamp, which has no derivative.
        free_nats: 0.0,
        // Keeps the loss near 1. Central differences carry roundoff of about
        // eps * |loss| / h, which swamps the smallest gate gradients (~1e-6)
        // once the summed image error pushes the loss into the hundreds.
        recon_weight: 0.01,
        ..ModelConfig::default()
    }
}

fn params(store: &ParamStore) -> Vec<Tensor> {
    store.tensors().cloned().collect()
}

fn batch(b: usize, l: usize, size: usize, seed: u64) -> ChunkBatch {
    let mut r = rng(seed);
    let kappas = (0..b * l).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    ChunkBatch {
        observations: random_tensor(&mut r, &[b, l, 3, size, size], 0.0, 1.0),
        actions: random_tensor(&mut r, &[b, l, 2], -1.0, 1.0),
        rewards: random_tensor(&mut r, &[b, l], -0.1, 1.0),
        kappas: Tensor::new(vec![b, l], kappas).unwrap(),
    }
}

/// Every latent-model parameter, through encoder, recurrence, heads and decoder.
pub fn model_loss() -> f64 {
    let world = WorldModel::new(small_model_config(), &mut rng(1)).unwrap();
    let data = batch(2, 3, 8, 2);
    gradcheck(&params(&world.params), |v| {
        let mut noise = GaussianNoise(rng(3));
        world.model_loss(&Bound::from_vars(v.to_vec()), &data, &mut noise).unwrap().total
    })
}

/// Barrier values directly, with every term active and unequal weights.
pub fn barrier_loss_case() -> f64 {
    let mut r = rng(4);
    let values: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut r, &[5], -0.5, 0.5)).collect();
    let labels: Vec<Vec<bool>> = (0..4).map(|t| (0..5).map(|i| (t + i) % 3 == 0).collect()).collect();
    let cfg = BarrierConfig { eta: 0.05, ..BarrierConfig::default() };
    gradcheck(&values, |v| barrier_loss(v, &labels, &cfg).unwrap().weighted([1.0, 0.7, 1.3]).unwrap())
}

/// Actor and barrier parameters through imagination, the critic bootstrap
/// and the barrier penalty.
pub fn policy_loss_case() -> f64 {
    let cfg = small_model_config();
    let feat = cfg.feature_dim();
    let mut r = rng(5);
    let world = WorldModel::new(cfg.clone(), &mut r).unwrap();
    let mut theta = ParamStore::new();
    let actor = Actor::new(&mut theta, feat, 6, 2, &mut r);
    let barrier = Barrier::new(&mut theta, feat, &BarrierConfig { hidden: vec![6], ..BarrierConfig::default() }, &mut r);
    let critic = Critic::new(feat, 6, &mut r);
    let starts = LatentState {
        h: Var::constant(random_tensor(&mut r, &[4, cfg.deter_dim], -1.0, 1.0)),
        mu: Var::constant(random_tensor(&mut r, &[4, cfg.stoch_dim], -1.0, 1.0)),
        sigma: Var::constant(random_tensor(&mut r, &[4, cfg.stoch_dim], 0.2, 1.0)),
        z: Var::constant(random_tensor(&mut r, &[4, cfg.stoch_dim], -1.0, 1.0)),
    };
    let wd = world.params.detached();
    let cd = critic.params.detached();
    let bcfg = BarrierConfig::default();
    gradcheck(&params(&theta), |v| {
        let tp = Bound::from_vars(v.to_vec());
        let mut noise = GaussianNoise(rng(6));
        let rollout = imagine(&world, &wd, &actor, &tp, &starts, 3, ActMode::Sample, &mut noise).unwrap();
        let returns = imagined_return(&rollout, &critic, &cd, 0.9).unwrap();
        let values = rollout.barrier_values(&barrier, &tp).unwrap();
        let lb = barrier_loss(&values, &rollout.unsafe_labels(), &bcfg).unwrap();
        policy_loss(&returns, &lb, [1.0, 1.0, 1.0]).unwrap()
    })
}

pub fn critic_loss_case() -> f64 {
    let mut r = rng(7);
    let critic = Critic::new(6, 5, &mut r);
    let features = Var::constant(random_tensor(&mut r, &[8, 6], -1.0, 1.0));
    let targets = random_tensor(&mut r, &[8], -2.0, 2.0);
    gradcheck(&params(&critic.params), |v| critic_loss(&critic, &Bound::from_vars(v.to_vec()), &features, &targets).unwrap())
}
