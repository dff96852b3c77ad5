//! Latent barrier function: a scalar network that should be positive on safe
//! latents, negative on unsafe ones, and decay no faster than
//! `B(z_t) - B(z_{t-1}) + lambda * B(z_t) >= 0` along imagined trajectories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierConfig {
    /// Learning margin.
    pub eta: f64,
    /// Slope of the linear class-K function.
    pub lambda: f64,
    pub hidden: Vec<usize>,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig { eta: 0.01, lambda: 0.1, hidden: vec![64, 64] }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("barrier eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("barrier lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("barrier hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Barrier {
    pub net: Mlp,
}

impl Barrier {
    /// Registers the network in `store`, which is shared with the actor.
    pub fn new(store: &mut ParamStore, feature_dim: usize, cfg: &BarrierConfig, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![feature_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Barrier { net: Mlp::new(store, "barrier", &sizes, Activation::Elu, rng) }
    }

    /// `B` for each row of `features` `[N, d]`, returned as `[N]`.
    pub fn evaluate(&self, p: &Bound, features: &Var) -> Result<Var, TensorError> {
        let n = features.shape()[0];
        self.net.forward(p, features)?.reshape(vec![n])
    }
}

/// The three hinge terms. Each is a scalar [`Var`].
#[derive(Clone, Debug)]
pub struct BarrierLoss {
    pub safe: Var,
    pub decrease: Var,
    pub unsafe_: Var,
    /// Set when the sequence had fewer than two steps, so the decrease term
    /// is a constant zero.
    pub too_short: bool,
}

impl BarrierLoss {
    pub fn terms(&self) -> [f64; 3] {
        [self.safe.item(), self.decrease.item(), self.unsafe_.item()]
    }

    /// `beta . L_b`.
    pub fn weighted(&self, beta: [f64; 3]) -> Result<Var, TensorError> {
        self.safe
            .scale(beta[0])?
            .add(&self.decrease.scale(beta[1])?)?
            .add(&self.unsafe_.scale(beta[2])?)
    }
}

fn masked_mean(hinge: &Var, mask: Vec<f64>) -> Result<Var, TensorError> {
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(Var::scalar(0.0));
    }
    let n = mask.len();
    hinge.mul(&Var::constant(Tensor::new(vec![n], mask)?))?.sum()?.scale(1.0 / count)
}

/// Hinge losses over a batch of trajectories.
///
/// `values[t]` holds `B(z_t)` for every trajectory at step `t` (all the same
/// length) and `unsafe_[t]` the matching labels. `extra` adds individually
/// labeled states that only enter the safe and unsafe terms.
pub fn barrier_loss_with_extra(
    values: &[Var],
    unsafe_: &[Vec<bool>],
    extra: Option<(&Var, &[bool])>,
    cfg: &BarrierConfig,
) -> Result<BarrierLoss, TensorError> {
    if values.is_empty() || values.len() != unsafe_.len() {
        return Err(TensorError::shape(
            "barrier_loss",
            format!("{} value steps, {} label steps", values.len(), unsafe_.len()),
        ));
    }
    for (v, l) in values.iter().zip(unsafe_) {
        if v.shape().len() != 1 || v.shape()[0] != l.len() || v.shape() != values[0].shape() {
            return Err(TensorError::shape("barrier_loss", format!("values {:?} with {} labels", v.shape(), l.len())));
        }
    }
    let mut all: Vec<&Var> = values.iter().collect();
    let mut labels: Vec<bool> = unsafe_.iter().flatten().copied().collect();
    if let Some((v, l)) = extra {
        if v.shape() != [l.len()] {
            return Err(TensorError::shape("barrier_loss", format!("extra values {:?} with {} labels", v.shape(), l.len())));
        }
        all.push(v);
        labels.extend_from_slice(l);
    }
    let stacked = Var::concat_rows(&all)?;
    let eta = cfg.eta;

    let safe_hinge = stacked.neg()?.add_scalar(eta)?.relu()?;
    let safe = masked_mean(&safe_hinge, labels.iter().map(|&u| (!u) as u8 as f64).collect())?;
    let unsafe_hinge = stacked.add_scalar(eta)?.relu()?;
    let unsafe_term = masked_mean(&unsafe_hinge, labels.iter().map(|&u| u as u8 as f64).collect())?;

    let too_short = values.len() < 2;
    let decrease = if too_short {
        Var::scalar(0.0)
    } else {
        let prev = Var::concat_rows(&values[..values.len() - 1].iter().collect::<Vec<_>>())?;
        let next = Var::concat_rows(&values[1..].iter().collect::<Vec<_>>())?;
        // eta - ((1 + lambda) B(z_t) - B(z_{t-1}))
        next.scale(1.0 + cfg.lambda)?.sub(&prev)?.neg()?.add_scalar(eta)?.relu()?.mean()?
    };
    Ok(BarrierLoss { safe, decrease, unsafe_: unsafe_term, too_short })
}

pub fn barrier_loss(values: &[Var], unsafe_: &[Vec<bool>], cfg: &BarrierConfig) -> Result<BarrierLoss, TensorError> {
    barrier_loss_with_extra(values, unsafe_, None, cfg)
}

/// Barrier values and labels of one batch of equal-length trajectories,
/// time-major like [`barrier_loss`].
#[derive(Clone, Debug, Default)]
pub struct LabeledTrajectories {
    pub values: Vec<Vec<f64>>,
    pub unsafe_: Vec<Vec<bool>>,
}

/// Fractions of states or pairs violating each condition at margin 0.
/// A fraction is `None` when its category is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub safe_violation_fraction: Option<f64>,
    pub decrease_violation_fraction: Option<f64>,
    pub unsafe_violation_fraction: Option<f64>,
    pub safe_states: usize,
    pub pairs: usize,
    pub unsafe_states: usize,
}

pub fn audit_conditions(batches: &[LabeledTrajectories], lambda: f64) -> AuditReport {
    let (mut safe, mut safe_bad, mut unsafe_, mut unsafe_bad, mut pairs, mut pairs_bad) = (0, 0, 0, 0, 0, 0);
    for batch in batches {
        for (vals, labels) in batch.values.iter().zip(&batch.unsafe_) {
            for (&b, &u) in vals.iter().zip(labels) {
                if u {
                    unsafe_ += 1;
                    unsafe_bad += (b >= 0.0) as usize;
                } else {
                    safe += 1;
                    safe_bad += (b <= 0.0) as usize;
                }
            }
        }
        for w in batch.values.windows(2) {
            for (&prev, &next) in w[0].iter().zip(&w[1]) {
                pairs += 1;
                pairs_bad += (next - prev + lambda * next < 0.0) as usize;
            }
        }
    }
    let frac = |bad: usize, n: usize| (n > 0).then(|| bad as f64 / n as f64);
    AuditReport {
        safe_violation_fraction: frac(safe_bad, safe),
        decrease_violation_fraction: frac(pairs_bad, pairs),
        unsafe_violation_fraction: frac(unsafe_bad, unsafe_),
        safe_states: safe,
        pairs,
        unsafe_states: unsafe_,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vals(v: &[f64]) -> Var {
        Var::constant(Tensor::vector(v.to_vec()))
    }

    fn cfg() -> BarrierConfig {
        BarrierConfig::default()
    }

    #[test]
    fn hand_examples() {
        // A satisfied safe state.
        let l = barrier_loss(&[vals(&[0.5])], &[vec![false]], &cfg()).unwrap();
        assert_eq!(l.terms(), [0.0, 0.0, 0.0]);
        assert!(l.too_short);
        // A safe state sitting on zero misses the margin by eta.
        let l = barrier_loss(&[vals(&[0.0])], &[vec![false]], &cfg()).unwrap();
        assert!((l.terms()[0] - 0.01).abs() < 1e-12);
        // Decrease condition: 0.5 - 0.6 + 0.05 = -0.05.
        let l = barrier_loss(&[vals(&[0.6]), vals(&[0.5])], &[vec![false], vec![false]], &cfg()).unwrap();
        assert!((l.terms()[1] - 0.06).abs() < 1e-12);
        assert!(!l.too_short);
        // A satisfied unsafe state.
        let l = barrier_loss(&[vals(&[-0.2])], &[vec![true]], &cfg()).unwrap();
        assert_eq!(l.terms(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn categories_are_averaged_separately() {
        let l = barrier_loss(
            &[vals(&[0.0, -1.0]), vals(&[0.0, 0.02])],
            &[vec![false, true], vec![false, true]],
            &cfg(),
        )
        .unwrap();
        let [s, d, u] = l.terms();
        assert!((s - 0.01).abs() < 1e-12);
        assert!((u - 0.015).abs() < 1e-12, "{u}");
        // pairs: (0 -> 0) gives 0.01, (-1 -> 0.02) gives relu(0.01 - 1.022) = 0
        assert!((d - 0.005).abs() < 1e-12);
    }

    #[test]
    fn extra_states_enter_only_the_state_terms() {
        let base = barrier_loss(&[vals(&[1.0]), vals(&[1.0])], &[vec![false], vec![false]], &cfg()).unwrap();
        let extra = vals(&[0.5]);
        let with = barrier_loss_with_extra(&[vals(&[1.0]), vals(&[1.0])], &[vec![false], vec![false]], Some((&extra, &[true])), &cfg()).unwrap();
        assert_eq!(base.terms()[1], with.terms()[1]);
        assert!((with.terms()[2] - 0.51).abs() < 1e-12);
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        assert!(barrier_loss(&[vals(&[1.0, 2.0])], &[vec![false]], &cfg()).is_err());
        assert!(barrier_loss(&[], &[], &cfg()).is_err());
    }

    #[test]
    fn zeroed_network_evaluates_to_zero_and_fails_every_safe_state() {
        let mut store = ParamStore::new();
        let b = Barrier::new(&mut store, 4, &cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        b.net.zero_output(&mut store);
        let p = store.detached();
        let x = Var::constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap());
        let v = b.evaluate(&p, &x).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.0]);
        let report = audit_conditions(
            &[LabeledTrajectories { values: vec![v.data().to_vec()], unsafe_: vec![vec![false; 3]] }],
            0.1,
        );
        assert_eq!(report.safe_violation_fraction, Some(1.0));
        assert_eq!(report.unsafe_violation_fraction, None);
        assert_eq!(report.decrease_violation_fraction, None);
    }

    #[test]
    fn perfect_barrier_has_no_violations() {
        let t = LabeledTrajectories {
            values: vec![vec![0.5, -0.5], vec![0.6, -0.4], vec![0.7, -0.3]],
            unsafe_: vec![vec![false, true]; 3],
        };
        let r = audit_conditions(&[t], 0.1);
        assert_eq!(r.safe_violation_fraction, Some(0.0));
        assert_eq!(r.unsafe_violation_fraction, Some(0.0));
        assert_eq!(r.decrease_violation_fraction, Some(0.0));
        assert_eq!((r.safe_states, r.pairs, r.unsafe_states), (3, 4, 3));
    }

    #[test]
    fn empty_audit_is_not_applicable() {
        let r = audit_conditions(&[], 0.1);
        assert_eq!(r.safe_violation_fraction, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"safe_violation_fraction\":null"));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(BarrierConfig { eta: 0.0, ..cfg() }.validate().is_err());
        assert!(BarrierConfig { lambda: 1.5, ..cfg() }.validate().is_err());
        assert!(BarrierConfig { lambda: 0.0, ..cfg() }.validate().is_err());
    }
}
