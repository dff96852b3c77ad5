//! Dense row-major `f64` arrays and the raw numeric kernels behind the
//! differentiable operations in [`crate::autodiff`].

use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// An n-dimensional array stored row-major. A tensor with an empty shape is
/// a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Rows of a matrix (or the only row of a vector) as `(rows, cols)`.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n, m] => Some((*n, *m)),
            _ => None,
        }
    }
}

/// Geometry shared by every convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution of `input [B,C,H,W]` by
    /// `kernel [O,C,kh,kw]`.
    pub fn forward(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if c != kc {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} with stride {stride}, padding {pad} does not fit {h}x{w}"),
            ));
        }
        Ok(ConvGeom {
            batch: b,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input-gradient is the transposed
    /// convolution of `input [B,Cin,H,W]` by `kernel [Cin,Cout,kh,kw]`.
    pub fn transposed(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[b, ci, h, w], &[kci, co, kh, kw]) = (input, kernel) else {
            return Err(TensorError::shape(
                "conv2d_transpose",
                format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if ci != kci {
            return Err(TensorError::shape(
                "conv2d_transpose",
                format!("input has {ci} channels but kernel expects {kci}"),
            ));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if stride == 0 || full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::shape(
                "conv2d_transpose",
                format!("padding {pad} consumes the whole {full_h}x{full_w} output"),
            ));
        }
        Ok(ConvGeom {
            batch: b,
            in_ch: co,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_ch: ci,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose input column `ox*stride + kj - pad` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.in_w + self.pad > kj {
            ((self.in_w + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Unfold one image `[C,H,W]` into `[C*kh*kw, out_h*out_w]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let spatial = self.col_cols();
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    let valid = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src = &image[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        dst_row[..valid.start].fill(0.0);
                        dst_row[valid.end..].fill(0.0);
                        let offset = kj as isize - self.pad as isize;
                        for ox in valid.clone() {
                            dst_row[ox] = src[((ox * self.stride) as isize + offset) as usize];
                        }
                    }
                }
            }
        }
    }

    /// Fold `[C*kh*kw, out_h*out_w]` back into an image, summing overlaps.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let spatial = self.col_cols();
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    let valid = self.valid_cols(kj);
                    let offset = kj as isize - self.pad as isize;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut image[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        let src_row = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in valid.clone() {
                            dst[((ox * self.stride) as isize + offset) as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = alpha * a[m,k] b[k,n] + beta * c[m,n]`, each operand given as
/// `(data, row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || a.0.len() > last(m, k, a.1, a.2), "gemm: lhs too short");
    assert!(k == 0 || b.0.len() > last(k, n, b.1, b.2), "gemm: rhs too short");
    assert!(c.0.len() > last(m, n, c.1, c.2), "gemm: output too short");
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// `y[b,o] = sum_c k[o,c] * x[b,c]` (cross-correlation, no bias).
pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let spatial = g.col_cols();
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * spatial;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = vec![0.0; rows * spatial];
    for b in 0..g.batch {
        g.im2col(&input[b * in_size..(b + 1) * in_size], &mut cols);
        let y = &mut out[b * out_size..(b + 1) * out_size];
        gemm(g.out_ch, rows, spatial, 1.0, (kernel, rows, 1), (&cols, spatial, 1), 0.0, (y, spatial, 1));
    }
    out
}

/// Gradient of [`conv_forward`] with respect to its input.
pub(crate) fn conv_backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let spatial = g.col_cols();
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * spatial;
    let mut grad_in = vec![0.0; g.batch * in_size];
    let mut cols = vec![0.0; rows * spatial];
    for b in 0..g.batch {
        let gy = &grad_out[b * out_size..(b + 1) * out_size];
        // cols = K^T gy
        gemm(rows, g.out_ch, spatial, 1.0, (kernel, 1, rows), (gy, spatial, 1), 0.0, (&mut cols, spatial, 1));
        g.col2im(&cols, &mut grad_in[b * in_size..(b + 1) * in_size]);
    }
    grad_in
}

/// Gradient of [`conv_forward`] with respect to its kernel.
pub(crate) fn conv_backward_kernel(g: &ConvGeom, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let spatial = g.col_cols();
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * spatial;
    let mut grad_k = vec![0.0; g.out_ch * rows];
    let mut cols = vec![0.0; rows * spatial];
    for b in 0..g.batch {
        g.im2col(&input[b * in_size..(b + 1) * in_size], &mut cols);
        let gy = &grad_out[b * out_size..(b + 1) * out_size];
        // grad_k += gy cols^T
        gemm(g.out_ch, spatial, rows, 1.0, (gy, spatial, 1), (&cols, 1, spatial), 1.0, (&mut grad_k, rows, 1));
    }
    grad_k
}

/// `y[N,m] = x[N,n] * w[m,n]^T + b[m]`.
pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n_rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n_rows * n_out);
    for _ in 0..n_rows {
        y.extend_from_slice(b);
    }
    gemm(n_rows, n_in, n_out, 1.0, (x, n_in, 1), (w, 1, n_in), 1.0, (&mut y, n_out, 1));
    y
}
