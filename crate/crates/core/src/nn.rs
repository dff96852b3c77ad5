//! Parameter storage and the layers every network here is built from.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, TensorError>;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Weight tensor drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::shape(
                "ParamStore::set",
                format!("{} expects {:?}, got {:?}", self.names[id.0], self.values[id.0].shape(), value.shape()),
            ));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| v.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors())
    }

    pub(crate) fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Rc::make_mut(&mut self.values[index])
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Every parameter as a gradient-requiring leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf_rc(v.clone())).collect(),
        }
    }

    /// Every parameter as a constant; forward passes through the result
    /// record nothing.
    pub fn detached(&self) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| Var::constant_rc(v.clone())).collect(),
        }
    }

    /// Overwrite every tensor from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::shape("ParamStore::copy_from", "parameter layouts differ"));
        }
        for (i, t) in other.values.iter().enumerate() {
            self.set(ParamId(i), t.as_ref().clone())?;
        }
        Ok(())
    }
}

/// Parameters of a store materialized as [`Var`]s for one forward pass.
#[derive(Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars laid out in the order of some [`ParamStore`].
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, in store order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x.clone()),
            Activation::Relu => x.relu(),
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), vec![n_out, n_in], n_in, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out]));
        Dense { weight, bias, n_in, n_out }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.dense(p.get(self.weight), p.get(self.bias))
    }
}

/// Stack of dense layers with a shared hidden activation and a linear
/// output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i < last {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().expect("mlp has at least one layer")
    }

    /// Zero the output layer so the network emits exactly zero everywhere.
    pub fn zero_output(&self, store: &mut ParamStore) {
        let out = self.output_layer();
        store.set(out.weight, Tensor::zeros(vec![out.n_out, out.n_in])).expect("same shape");
        store.set(out.bias, Tensor::zeros(vec![out.n_out])).expect("same shape");
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let kernel = store.add_uniform(format!("{name}.kernel"), vec![out_ch, in_ch, k, k], in_ch * k * k, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Conv2d { kernel, bias, stride, padding }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv2d(p.get(self.kernel), self.stride, self.padding)?
            .add_channel_bias(p.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        // Each output pixel receives about in_ch * (k / stride)^2 contributions.
        let fan_in = (in_ch * k * k / (stride * stride)).max(1);
        let kernel = store.add_uniform(format!("{name}.kernel"), vec![in_ch, out_ch, k, k], fan_in, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        ConvTranspose2d { kernel, bias, stride, padding }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv2d_transpose(p.get(self.kernel), self.stride, self.padding)?
            .add_channel_bias(p.get(self.bias))
    }
}

/// Gated recurrent unit:
///
/// ```text
/// r  = sigmoid(W_r x + U_r h + b_r)
/// u  = sigmoid(W_u x + U_u h + b_u)
/// n  = tanh(W_n x + b_n + r * (U_n h + c_n))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: [Dense; 3],
    pub hidden: [Dense; 3],
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let mut mk = |gate: &str, n_in: usize| Dense::new(store, &format!("{name}.{gate}"), n_in, hidden_size, rng);
        let input = [mk("x_reset", input_size), mk("x_update", input_size), mk("x_cand", input_size)];
        let hidden = [mk("h_reset", hidden_size), mk("h_update", hidden_size), mk("h_cand", hidden_size)];
        GruCell { input, hidden, hidden_size }
    }

    pub fn forward(&self, p: &Bound, h_prev: &Var, x: &Var) -> Result<Var> {
        let [xr, xu, xn] = &self.input;
        let [hr, hu, hn] = &self.hidden;
        let reset = xr.forward(p, x)?.add(&hr.forward(p, h_prev)?)?.sigmoid()?;
        let update = xu.forward(p, x)?.add(&hu.forward(p, h_prev)?)?.sigmoid()?;
        let cand = xn.forward(p, x)?.add(&reset.mul(&hn.forward(p, h_prev)?)?)?.tanh()?;
        // (1 - u) * n + u * h = n + u * (h - n)
        let diff = h_prev.sub(&cand)?;
        cand.add(&update.mul(&diff)?)
    }
}
