//! Dense row-major `f64` tensors and the numeric kernels behind the autodiff ops.
//!
//! Convolution is implemented as im2col followed by a matrix product. Every
//! kernel works image by image, so the result for one image never depends on
//! which other images share its batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Self {
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// log(1 + exp(x)); returns x itself above 30 where the difference is below 1e-13.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax: NaN logit".into()));
    }
    let k = *logits.shape.last().unwrap();
    if logits.rank() > 2 {
        return Err(Error::Dimension(format!(
            "softmax expects rank 1 or 2, got {:?}",
            logits.shape
        )));
    }
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        softmax_in_place(row);
    }
    Tensor::new(logits.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// log-sum-exp of a slice, stable for large entries.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding.
    #[default]
    Valid,
    /// Symmetric zero padding of (k-1)/2 on each side; requires odd kernels.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            Padding::Same => Err(Error::Dimension(format!(
                "same padding needs an odd kernel, got {kernel}"
            ))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(Error::Input(format!("unknown padding mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }
}

/// Geometry of one 2-D convolution, shared by forward and backward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 4],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [c_in, h, w] = input;
        let [c_out, kc, kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        let pad = padding.amount(kh.max(kw))?;
        if kh != kw && padding == Padding::Same {
            return Err(Error::Dimension("same padding needs square kernels".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_area()
    }
}

/// Unfolds one image into a `[c_in*kh*kw, oh*ow]` column matrix.
fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image, accumulating.
fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: [m,k]`, `b: [k,n]`, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index addressed by the given strides,
    // as asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution over a batch of `n` images laid out back to back.
pub(crate) fn conv2d_batch(g: &ConvGeometry, n: usize, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || vec![0.0; g.patch() * g.out_area()],
            |cols, (o, xi)| {
                im2col(g, xi, cols);
                gemm(g.c_out, g.patch(), g.out_area(), kernel, false, cols, false, 0.0, o);
            },
        );
    out
}

/// Gradient with respect to the input images.
pub(crate) fn conv2d_backward_input(
    g: &ConvGeometry,
    n: usize,
    kernel: &[f64],
    grad_out: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * g.in_len()];
    dx.par_chunks_mut(g.in_len())
        .zip(grad_out.par_chunks(g.out_len()))
        .for_each_init(
            || vec![0.0; g.patch() * g.out_area()],
            |dcols, (dxi, go)| {
                gemm(g.patch(), g.c_out, g.out_area(), kernel, true, go, false, 0.0, dcols);
                col2im(g, dcols, dxi);
            },
        );
    dx
}

/// Images per partial sum when reducing kernel gradients; fixed so the
/// summation order never depends on the thread count.
const REDUCE_CHUNK: usize = 8;

/// Gradient with respect to the kernel, summed over the batch in a fixed order.
pub(crate) fn conv2d_backward_kernel(
    g: &ConvGeometry,
    n: usize,
    x: &[f64],
    grad_out: &[f64],
) -> Vec<f64> {
    let klen = g.c_out * g.patch();
    let partials: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|idx| {
            let mut acc = vec![0.0; klen];
            let mut cols = vec![0.0; g.patch() * g.out_area()];
            for &i in idx {
                im2col(g, &x[i * g.in_len()..(i + 1) * g.in_len()], &mut cols);
                let go = &grad_out[i * g.out_len()..(i + 1) * g.out_len()];
                gemm(g.c_out, g.out_area(), g.patch(), go, false, &cols, true, 1.0, &mut acc);
            }
            acc
        })
        .collect();
    sum_in_order(partials, klen)
}

pub(crate) fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut it = partials.into_iter();
    let mut total = it.next().unwrap_or_else(|| vec![0.0; len]);
    for p in it {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Splits a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` shape into `(n, [c,h,w])`.
pub(crate) fn image_batch_dims(shape: &[usize], op: &str) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((1, [c, h, w])),
        [n, c, h, w] => Ok((n, [c, h, w])),
        _ => Err(Error::Dimension(format!(
            "{op} expects [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Valid or same-padded 2-D cross-correlation.
///
/// `input` is `[C_in,H,W]` (or batched `[N,C_in,H,W]`), `kernels` is
/// `[C_out,C_in,kH,kW]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (n, dims) = image_batch_dims(input.shape(), "conv2d")?;
    let kshape: [usize; 4] = kernels
        .shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("conv2d kernel must be rank 4, got {:?}", kernels.shape())))?;
    let g = ConvGeometry::new(dims, kshape, stride, padding)?;
    let out = conv2d_batch(&g, n, input.data(), kernels.data());
    let shape = if input.rank() == 3 {
        vec![g.c_out, g.oh, g.ow]
    } else {
        vec![n, g.c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}

/// How a 2×2/stride-2 pool treats odd spatial sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Odd height or width is an error.
    #[default]
    Strict,
    /// A trailing odd row or column is dropped.
    Floor,
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index of its maximum (first one on ties).
pub fn maxpool2d(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let (n, [c, h, w]) = image_batch_dims(input.shape(), "maxpool2d")?;
    if mode == PoolMode::Strict && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Dimension(format!(
            "maxpool2d needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("maxpool2d input {h}x{w} too small")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

/// Row-major matrix product of `[m,k]` and `[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
    Tensor::new(vec![m, n], c)
}

pub(crate) fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, k] => Ok((m, k)),
        _ => Err(Error::Dimension(format!(
            "{op} expects a rank-2 tensor, got {:?}",
            t.shape()
        ))),
    }
}
