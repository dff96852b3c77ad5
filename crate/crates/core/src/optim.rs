//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::TensorError;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, TensorError>;

/// Default global-norm clip applied before every update.
pub const GRAD_CLIP_NORM: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_store(store: &ParamStore, learning_rate: f64) -> Self {
        Self::new(store.tensors(), learning_rate)
    }

    fn check(&self, params: &[&Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.first_moment.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
                ));
            }
        }
        Ok(())
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.check(&params.iter().collect::<Vec<_>>(), grads)?;
        let (c1, c2) = self.advance();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update_one(i, p, g, c1, c2);
        }
        Ok(())
    }

    /// Same as [`AdamState::step`] for every tensor of a [`ParamStore`].
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.check(&store.tensors().collect::<Vec<_>>(), grads)?;
        let (c1, c2) = self.advance();
        for (i, g) in grads.iter().enumerate() {
            let p = store.tensor_mut(i);
            self.update_one(i, p, g, c1, c2);
        }
        Ok(())
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn update_one(&mut self, i: usize, p: &mut Tensor, g: &Tensor, c1: f64, c2: f64) {
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let m = self.first_moment[i].data_mut();
        let v = self.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
