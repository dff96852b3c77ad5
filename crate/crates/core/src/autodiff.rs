//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation whose operands carry gradient
//! history. Values that do not descend from a gradient-requiring leaf are
//! never recorded, so a forward pass over detached parameters doubles as
//! inference mode. [`Var::backward`] consumes the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{self, ConvGeom, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Maps the upstream gradient to one optional gradient per operand. The
/// mask flags operands that are recorded and therefore need a gradient.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Single-owner recording of a differentiable computation.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A gradient-requiring leaf holding `value`.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.leaf_rc(Rc::new(value))
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor>) -> Var {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.0.borrow().consumed
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A tensor value plus its position on a tape, if it has one.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

/// Gradients of a scalar with respect to the leaves of its tape.
pub struct Gradients {
    tape: Tape,
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`; leaves the loss does not reach get zeros.
    /// Returns `None` for values that are not leaves of this tape.
    pub fn get(&self, leaf: &Var) -> Option<Tensor> {
        let node = leaf.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        Some(
            self.by_node
                .get(&node.id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaf.value.shape().to_vec())),
        )
    }

    /// Like [`Gradients::get`] but zeros for anything unrecorded.
    pub fn wrt(&self, var: &Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(var.value.shape().to_vec()))
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.as_matrix()
        .ok_or_else(|| TensorError::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl Var {
    /// A value with no gradient history.
    pub fn constant(value: Tensor) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub(crate) fn constant_rc(value: Rc<Tensor>) -> Self {
        Var { value, node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no gradient history.
    pub fn detach(&self) -> Var {
        Var {
            value: self.value.clone(),
            node: None,
        }
    }

    fn record(inputs: &[&Var], value: Tensor, backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Result<Var> {
        Var::record_rc(inputs, Rc::new(value), backward)
    }

    fn record_rc(inputs: &[&Var], value: Rc<Tensor>, backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Result<Var> {
        let mut tape: Option<&Tape> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if !t.same(&n.tape) => return Err(TensorError::TapeMismatch),
                    _ => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant_rc(value));
        };
        let mut inner = tape.0.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: inputs.iter().map(|v| v.node.as_ref().map(|n| n.id)).collect(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            value,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        })
    }

    /// Reverse pass from this scalar. Gradients from every path into a node
    /// are summed. The tape cannot be used again afterwards.
    pub fn backward(&self) -> Result<Gradients> {
        let node = self.node.as_ref().ok_or(TensorError::NoTape)?;
        if !self.value.is_scalar() {
            return Err(TensorError::NonScalar(self.value.shape().to_vec()));
        }
        let tape = node.tape.clone();
        let mut inner = tape.0.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
        let nodes = std::mem::take(&mut inner.nodes);
        drop(inner);

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(node.id + 1);
        grads.resize_with(node.id + 1, || None);
        grads[node.id] = Some(Tensor::ones(self.value.shape().to_vec()));
        let mut by_node = HashMap::new();
        for id in (0..=node.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let n = &nodes[id];
            let Some(backward) = &n.backward else {
                by_node.insert(id, grad);
                continue;
            };
            let mask: Vec<bool> = n.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&grad, &mask);
            for (parent, pg) in n.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { tape, by_node })
    }

    // ---- elementwise binary ------------------------------------------------

    pub fn add(&self, other: &Var) -> Result<Var> {
        check_same_shape("add", &self.value, &other.value)?;
        let value = self.value.zip_map(&other.value, |a, b| a + b);
        Var::record(&[self, other], value, |g, m| {
            vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        check_same_shape("sub", &self.value, &other.value)?;
        let value = self.value.zip_map(&other.value, |a, b| a - b);
        Var::record(&[self, other], value, |g, m| {
            vec![m[0].then(|| g.clone()), m[1].then(|| g.map(|x| -x))]
        })
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        check_same_shape("mul", &self.value, &other.value)?;
        let value = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        Var::record(&[self, other], value, move |g, m| {
            vec![
                m[0].then(|| g.zip_map(&b, |g, b| g * b)),
                m[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        })
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Result<Var> {
        let value = Rc::new(self.value.map(f));
        let x = self.value.clone();
        let y = value.clone();
        Var::record_rc(&[self], value, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Var> {
        self.unary(|x| factor * x, move |_, _| factor)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn elu(&self) -> Result<Var> {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Var> {
        let shape = self.value.shape().to_vec();
        Var::record(&[self], Tensor::scalar(self.value.sum()), move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Row sums of a matrix: `[N,d] -> [N]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let (n, d) = matrix("sum_cols", &self.value)?;
        let data = self.value.data().chunks(d).map(|r| r.iter().sum()).collect();
        Var::record(&[self], Tensor::new(vec![n], data)?, move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
            vec![Some(Tensor::new(vec![n, d], data).expect("shape"))]
        })
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&self, target: &Var) -> Result<Var> {
        check_same_shape("mse_loss", &self.value, &target.value)?;
        self.sub(target)?.square()?.mean()
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let from = self.value.shape().to_vec();
        let value = self.value.reshape(shape)?;
        Var::record(&[self], value, move |g, _| {
            vec![Some(g.reshape(from.clone()).expect("same numel"))]
        })
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|p| matrix("concat_cols", &p.value))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(n, _)) = dims.first() else {
            return Err(TensorError::shape("concat_cols", "nothing to concatenate"));
        };
        if dims.iter().any(|&(r, _)| r != n) {
            return Err(TensorError::shape("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let widths: Vec<usize> = dims.iter().map(|&(_, c)| c).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value.data()[i * w..(i + 1) * w]);
            }
        }
        Var::record(parts, Tensor::new(vec![n, total], data)?, move |g, mask| {
            let mut offset = 0;
            widths
                .iter()
                .zip(mask)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let data = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[start..start + w].iter().copied())
                            .collect();
                        Tensor::new(vec![n, w], data).expect("shape")
                    })
                })
                .collect()
        })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let (n, d) = matrix("slice_cols", &self.value)?;
        if start >= end || end > d {
            return Err(TensorError::shape("slice_cols", format!("{start}..{end} out of {d} columns")));
        }
        let w = end - start;
        let data = self
            .value
            .data()
            .chunks(d)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Var::record(&[self], Tensor::new(vec![n, w], data)?, move |g, _| {
            let mut out = vec![0.0; n * d];
            for (i, row) in g.data().chunks(w).enumerate() {
                out[i * d + start..i * d + end].copy_from_slice(row);
            }
            vec![Some(Tensor::new(vec![n, d], out).expect("shape"))]
        })
    }

    /// Stack tensors along the leading dimension.
    pub fn concat_rows(parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TensorError::shape("concat_rows", "nothing to concatenate"));
        };
        let tail = &first.value.shape()[1..];
        if first.value.shape().is_empty() || parts.iter().any(|p| p.value.shape().len() != tail.len() + 1 || &p.value.shape()[1..] != tail) {
            return Err(TensorError::shape("concat_rows", "trailing dimensions differ"));
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.value.numel()).collect();
        let rows: usize = parts.iter().map(|p| p.value.shape()[0]).sum();
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            data.extend_from_slice(p.value.data());
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.value.shape().to_vec()).collect();
        Var::record(parts, Tensor::new(shape, data)?, move |g, mask| {
            let mut offset = 0;
            lens.iter()
                .zip(&shapes)
                .zip(mask)
                .map(|((&len, shape), &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| Tensor::new(shape.clone(), g.data()[start..start + len].to_vec()).expect("shape"))
                })
                .collect()
        })
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let shape = self.value.shape().to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(TensorError::shape("slice_rows", format!("{start}..{end} of {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let data = self.value.data()[start * row..end * row].to_vec();
        Var::record(&[self], Tensor::new(out_shape, data)?, move |g, _| {
            let mut out = Tensor::zeros(shape.clone());
            out.data_mut()[start * row..end * row].copy_from_slice(g.data());
            vec![Some(out)]
        })
    }

    // ---- layers --------------------------------------------------------------

    /// Affine map `x[N,n] -> x W^T + b` with `W[m,n]`, `b[m]`.
    pub fn dense(&self, weight: &Var, bias: &Var) -> Result<Var> {
        let (rows, n_in) = matrix("dense", &self.value)?;
        let (n_out, w_in) = matrix("dense", &weight.value)?;
        if w_in != n_in || bias.value.shape() != [n_out] {
            return Err(TensorError::shape(
                "dense",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value.shape(),
                    weight.value.shape(),
                    bias.value.shape()
                ),
            ));
        }
        let y = tensor::dense_forward(self.value.data(), weight.value.data(), bias.value.data(), rows, n_in, n_out);
        let (x, w) = (self.value.clone(), weight.value.clone());
        Var::record(&[self, weight, bias], Tensor::new(vec![rows, n_out], y)?, move |g, m| {
            let gd = g.data();
            let gx = m[0].then(|| {
                let mut out = vec![0.0; rows * n_in];
                tensor::gemm(rows, n_out, n_in, 1.0, (gd, n_out, 1), (w.data(), n_in, 1), 0.0, (&mut out, n_in, 1));
                Tensor::new(vec![rows, n_in], out).expect("shape")
            });
            let gw = m[1].then(|| {
                let mut out = vec![0.0; n_out * n_in];
                tensor::gemm(n_out, rows, n_in, 1.0, (gd, 1, n_out), (x.data(), n_in, 1), 0.0, (&mut out, n_in, 1));
                Tensor::new(vec![n_out, n_in], out).expect("shape")
            });
            let gb = m[2].then(|| {
                let mut out = vec![0.0; n_out];
                for row in gd.chunks(n_out) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::vector(out)
            });
            vec![gx, gw, gb]
        })
    }

    /// Cross-correlation of `self [B,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::forward(self.value.shape(), kernel.value.shape(), stride, padding)?;
        let y = tensor::conv_forward(&geom, self.value.data(), kernel.value.data());
        let out_shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        let (x, k) = (self.value.clone(), kernel.value.clone());
        Var::record(&[self, kernel], Tensor::new(out_shape, y)?, move |g, m| {
            vec![
                m[0].then(|| {
                    let gx = tensor::conv_backward_input(&geom, g.data(), k.data());
                    Tensor::new(x.shape().to_vec(), gx).expect("shape")
                }),
                m[1].then(|| {
                    let gk = tensor::conv_backward_kernel(&geom, x.data(), g.data());
                    Tensor::new(k.shape().to_vec(), gk).expect("shape")
                }),
            ]
        })
    }

    /// Adjoint of [`Var::conv2d`]: `self [B,Cin,H,W]`, `kernel [Cin,Cout,kh,kw]`
    /// gives `[B,Cout,(H-1)s-2p+kh,(W-1)s-2p+kw]`.
    pub fn conv2d_transpose(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::transposed(self.value.shape(), kernel.value.shape(), stride, padding)?;
        let y = tensor::conv_backward_input(&geom, self.value.data(), kernel.value.data());
        let out_shape = vec![geom.batch, geom.in_ch, geom.in_h, geom.in_w];
        let (x, k) = (self.value.clone(), kernel.value.clone());
        Var::record(&[self, kernel], Tensor::new(out_shape, y)?, move |g, m| {
            vec![
                m[0].then(|| {
                    let gx = tensor::conv_forward(&geom, g.data(), k.data());
                    Tensor::new(x.shape().to_vec(), gx).expect("shape")
                }),
                m[1].then(|| {
                    let gk = tensor::conv_backward_kernel(&geom, g.data(), x.data());
                    Tensor::new(k.shape().to_vec(), gk).expect("shape")
                }),
            ]
        })
    }

    /// Adds `bias [C]` to every spatial position of `self [B,C,H,W]`.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let &[b, c, h, w] = self.value.shape() else {
            return Err(TensorError::shape("add_channel_bias", format!("expected 4-d input, got {:?}", self.value.shape())));
        };
        if bias.value.shape() != [c] {
            return Err(TensorError::shape("add_channel_bias", format!("bias {:?} for {c} channels", bias.value.shape())));
        }
        let plane = h * w;
        let mut y = self.value.data().to_vec();
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bv = bias.value.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Var::record(&[self, bias], Tensor::new(vec![b, c, h, w], y)?, move |g, m| {
            let gb = m[1].then(|| {
                let mut out = vec![0.0; c];
                for (i, chunk) in g.data().chunks(plane).enumerate() {
                    out[i % c] += chunk.iter().sum::<f64>();
                }
                Tensor::vector(out)
            });
            vec![m[0].then(|| g.clone()), gb]
        })
    }

    // ---- distributions -------------------------------------------------------

    /// KL divergence between diagonal Gaussians `q = N(mu_q, sigma_q)` and
    /// `p = N(mu_p, sigma_p)`, summed over the last dimension. `[d]` inputs
    /// give a scalar, `[N,d]` inputs give `[N]`.
    pub fn gaussian_kl_diag(mu_q: &Var, sigma_q: &Var, mu_p: &Var, sigma_p: &Var) -> Result<Var> {
        let shape = mu_q.value.shape().to_vec();
        for v in [sigma_q, mu_p, sigma_p] {
            check_same_shape("gaussian_kl_diag", &mu_q.value, &v.value)?;
        }
        let (rows, d) = match shape.as_slice() {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            _ => return Err(TensorError::shape("gaussian_kl_diag", format!("expected 1-d or 2-d moments, got {shape:?}"))),
        };
        if sigma_q.data().iter().chain(sigma_p.data()).any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(TensorError::NonPositiveSigma("gaussian_kl_diag"));
        }
        let (mq, sq, mp, sp) = (mu_q.value.clone(), sigma_q.value.clone(), mu_p.value.clone(), sigma_p.value.clone());
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            for k in i * d..(i + 1) * d {
                let (a, b, c, e) = (mq.data()[k], sq.data()[k], mp.data()[k], sp.data()[k]);
                let diff = a - c;
                *o += (e / b).ln() + (b * b + diff * diff) / (2.0 * e * e) - 0.5;
            }
        }
        let out_shape = if shape.len() == 1 { vec![] } else { vec![rows] };
        Var::record(&[mu_q, sigma_q, mu_p, sigma_p], Tensor::new(out_shape, out)?, move |g, m| {
            let n = rows * d;
            let (mut gmq, mut gsq, mut gmp, mut gsp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for k in 0..n {
                let gi = g.data()[k / d];
                let (a, b, c, e) = (mq.data()[k], sq.data()[k], mp.data()[k], sp.data()[k]);
                let diff = a - c;
                let e2 = e * e;
                gmq[k] = gi * diff / e2;
                gmp[k] = -gi * diff / e2;
                gsq[k] = gi * (-1.0 / b + b / e2);
                gsp[k] = gi * (1.0 / e - (b * b + diff * diff) / (e2 * e));
            }
            let mk = |v: Vec<f64>| Tensor::new(shape.clone(), v).expect("shape");
            vec![
                m[0].then(|| mk(gmq)),
                m[1].then(|| mk(gsq)),
                m[2].then(|| mk(gmp)),
                m[3].then(|| mk(gsp)),
            ]
        })
    }

    /// Reparameterized draw `mu + sigma * noise`. The noise is supplied by
    /// the caller and receives no gradient.
    pub fn reparam_sample(mu: &Var, sigma: &Var, noise: &Tensor) -> Result<Var> {
        check_same_shape("reparam_sample", mu.value(), sigma.value())?;
        check_same_shape("reparam_sample", mu.value(), noise)?;
        sigma.mul(&Var::constant(noise.clone()))?.add(mu)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
