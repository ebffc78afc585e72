//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape itself is a valid
//! topological order and [`Graph::backward`] simply walks it in reverse.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d_backward_input, conv2d_backward_kernel, conv2d_batch, image_batch_dims,
    matrix_dims, same_shape, sigmoid, softmax_in_place, ConvGeometry, Padding, PoolMode, Tensor,
};
use crate::variational::Prior;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    ScaleBy { x: NodeId, s: NodeId },
    BiasAdd { x: NodeId, b: NodeId, axis: usize },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Linear { x: NodeId, w: NodeId },
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeometry, n: usize },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Relu(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    Nll { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    GaussianLogProb { w: NodeId, mu: NodeId, sigma: NodeId },
    PriorLogProb { w: NodeId, prior: Prior },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations. Build it forward, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output. Every parameter leaf has an entry, zero if unused.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf; panics for constants.
    pub fn wrt(&self, node: NodeId) -> &Tensor {
        self.get(node).expect("no gradient recorded for node")
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(|g| g.take())
    }
}

/// Probability floor applied inside the negative log-likelihood.
pub const NLL_PROB_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (inputs, noise, fixed priors).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        same_shape(va, vb, name)?;
        let v = va.zip_map(vb, f)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::ScaleConst(x, c), &[x])
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!(
                "scale_by expects a scalar factor, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| sv * v);
        Ok(self.push(v, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Adds a per-feature bias: `[B,F] + [F]`, `[C,H,W] + [C]`, `[N,C,H,W] + [C]`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let axis = match shape.len() {
            1 | 3 => 0,
            2 | 4 => 1,
            _ => return Err(Error::Dimension(format!("bias_add on shape {shape:?}"))),
        };
        let features = shape[axis];
        let bv = self.value(b).data();
        if bv.len() != features {
            return Err(Error::Dimension(format!(
                "bias of length {} for {features} features",
                bv.len()
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / inner) % features];
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::BiasAdd { x, b, axis }, &[x, b]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Dense layer product `x·wᵀ` for `x: [B,in]`, `w: [out,in]`, computed row by row.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, fin) = matrix_dims(self.value(x), "linear")?;
        let (fout, win) = matrix_dims(self.value(w), "linear")?;
        if fin != win {
            return Err(Error::Dimension(format!(
                "linear: input has {fin} features, weight expects {win}"
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; b * fout];
        out.par_chunks_mut(fout)
            .zip(xv.par_chunks(fin))
            .for_each(|(o, xi)| tensor::gemm(1, fin, fout, xi, false, wv, true, 0.0, o));
        let v = Tensor::new(vec![b, fout], out)?;
        Ok(self.push(v, Op::Linear { x, w }, &[x, w]))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (n, dims) = image_batch_dims(&xs, "conv2d")?;
        let kshape: [usize; 4] = self.value(k).shape().try_into().map_err(|_| {
            Error::Dimension(format!("conv2d kernel must be rank 4, got {:?}", self.value(k).shape()))
        })?;
        let geom = ConvGeometry::new(dims, kshape, stride, padding)?;
        let out = conv2d_batch(&geom, n, self.value(x).data(), self.value(k).data());
        let shape = if xs.len() == 3 {
            vec![geom.c_out, geom.oh, geom.ow]
        } else {
            vec![n, geom.c_out, geom.oh, geom.ow]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Conv2d { x, k, geom, n }, &[x, k]))
    }

    pub fn maxpool2d(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (v, argmax) = tensor::maxpool2d(self.value(x), mode)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(tensor::relu);
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(tensor::softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Collapses everything after the leading batch axis: `[N,...] -> [N,F]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let f = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![n, f])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, with the
    /// probability floored at [`NLL_PROB_FLOOR`].
    pub fn nll_loss(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, k) = matrix_dims(self.value(logits), "nll_loss")?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "nll_loss: {} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        if z.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("nll_loss: NaN logit".into()));
        }
        let max_loss = -NLL_PROB_FLOOR.ln();
        let mut probs = z.to_vec();
        let mut total = 0.0;
        for (row, &y) in z.chunks(k).zip(labels) {
            let nll = tensor::log_sum_exp(row) - row[y];
            total += nll.min(max_loss);
        }
        for row in probs.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::scalar(total / b as f64);
        Ok(self.push(
            v,
            Op::Nll {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ log N(w; mu, sigma²)` over all elements.
    pub fn gaussian_log_prob(&mut self, w: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        same_shape(self.value(w), self.value(mu), "gaussian_log_prob")?;
        same_shape(self.value(w), self.value(sigma), "gaussian_log_prob")?;
        let total = gaussian_log_density_sum(
            self.value(w).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
        );
        Ok(self.push(Tensor::scalar(total), Op::GaussianLogProb { w, mu, sigma }, &[w, mu, sigma]))
    }

    /// `Σ log P(w)` for a zero-mean prior.
    pub fn prior_log_prob(&mut self, w: NodeId, prior: Prior) -> NodeId {
        let total: f64 = self.value(w).data().iter().map(|&v| prior.log_density(v)).sum();
        self.push(Tensor::scalar(total), Op::PriorLogProb { w, prior }, &[w])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let entry = match node.op {
                Op::Param => {
                    let shape = node.value.shape().to_vec();
                    let data = grads
                        .get_mut(i)
                        .and_then(|g| g.take())
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(shape, data)?)
                }
                _ => None,
            };
            out.push(entry);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, needs(*a), || g.to_vec());
                accumulate(grads, *b, needs(*b), || g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, needs(*a), || g.to_vec());
                accumulate(grads, *b, needs(*b), || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, needs(*a), || zip(g, vb, |g, y| g * y));
                accumulate(grads, *b, needs(*b), || zip(g, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, needs(*a), || zip(g, vb, |g, y| g / y));
                accumulate(grads, *b, needs(*b), || {
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                });
            }
            Op::ScaleConst(x, c) => {
                accumulate(grads, *x, needs(*x), || g.iter().map(|v| v * c).collect());
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                accumulate(grads, *x, needs(*x), || g.iter().map(|v| v * sv).collect());
                accumulate(grads, *s, needs(*s), || {
                    vec![g.iter().zip(val(*x)).map(|(g, x)| g * x).sum()]
                });
            }
            Op::BiasAdd { x, b, axis } => {
                accumulate(grads, *x, needs(*x), || g.to_vec());
                accumulate(grads, *b, needs(*b), || {
                    let shape = self.nodes[x.0].value.shape();
                    let features = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut db = vec![0.0; features];
                    for (i, v) in g.iter().enumerate() {
                        db[(i / inner) % features] += v;
                    }
                    db
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(&self.nodes[a.0].value, "matmul")?;
                let n = self.nodes[b.0].value.shape()[1];
                accumulate(grads, *a, needs(*a), || {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm(m, n, k, g, false, val(*b), true, 0.0, &mut da);
                    da
                });
                accumulate(grads, *b, needs(*b), || {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm(k, m, n, val(*a), true, g, false, 0.0, &mut db);
                    db
                });
            }
            Op::Transpose(a) => {
                let (m, n) = matrix_dims(&self.nodes[a.0].value, "transpose")?;
                accumulate(grads, *a, needs(*a), || {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    da
                });
            }
            Op::Linear { x, w } => {
                let (b, fin) = matrix_dims(&self.nodes[x.0].value, "linear")?;
                let fout = self.nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                accumulate(grads, *x, needs(*x), || {
                    let mut dx = vec![0.0; b * fin];
                    dx.par_chunks_mut(fin)
                        .zip(g.par_chunks(fout))
                        .for_each(|(d, gi)| tensor::gemm(1, fout, fin, gi, false, wv, false, 0.0, d));
                    dx
                });
                accumulate(grads, *w, needs(*w), || {
                    let mut dw = vec![0.0; fout * fin];
                    for (gi, xi) in g.chunks(fout).zip(xv.chunks(fin)) {
                        tensor::gemm(fout, 1, fin, gi, false, xi, false, 1.0, &mut dw);
                    }
                    dw
                });
            }
            Op::Conv2d { x, k, geom, n } => {
                accumulate(grads, *x, needs(*x), || conv2d_backward_input(geom, *n, val(*k), g));
                accumulate(grads, *k, needs(*k), || conv2d_backward_kernel(geom, *n, val(*x), g));
            }
            Op::MaxPool { x, argmax } => {
                accumulate(grads, *x, needs(*x), || {
                    let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                    for (gv, &i) in g.iter().zip(argmax) {
                        dx[i] += gv;
                    }
                    dx
                });
            }
            Op::Relu(x) => {
                accumulate(grads, *x, needs(*x), || {
                    zip(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 })
                });
            }
            Op::Softplus(x) => {
                accumulate(grads, *x, needs(*x), || {
                    zip(g, val(*x), |g, x| if x > 30.0 { g } else { g * sigmoid(x) })
                });
            }
            Op::Log(x) => accumulate(grads, *x, needs(*x), || zip(g, val(*x), |g, x| g / x)),
            Op::Exp(x) => {
                let y = node.value.data();
                accumulate(grads, *x, needs(*x), || zip(g, y, |g, y| g * y));
            }
            Op::Square(x) => accumulate(grads, *x, needs(*x), || zip(g, val(*x), |g, x| 2.0 * g * x)),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(grads, *x, needs(*x), || vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(grads, *x, needs(*x), || vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => accumulate(grads, *x, needs(*x), || g.to_vec()),
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                accumulate(grads, *x, needs(*x), || {
                    let mut dx = vec![0.0; y.len()];
                    for ((d, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..k {
                            d[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    dx
                });
            }
            Op::Nll {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let b = labels.len() as f64;
                accumulate(grads, *logits, needs(*logits), || {
                    let mut d = vec![0.0; probs.len()];
                    for ((dr, pr), &y) in d.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                        // clamped items contribute a constant loss
                        if pr[y] <= NLL_PROB_FLOOR {
                            continue;
                        }
                        for i in 0..k {
                            let onehot = if i == y { 1.0 } else { 0.0 };
                            dr[i] = g[0] * (pr[i] - onehot) / b;
                        }
                    }
                    d
                });
            }
            Op::GaussianLogProb { w, mu, sigma } => {
                let (wv, mv, sv) = (val(*w), val(*mu), val(*sigma));
                let s = g[0];
                accumulate(grads, *w, needs(*w), || {
                    wv.iter()
                        .zip(mv.iter().zip(sv))
                        .map(|(w, (m, sd))| -s * (w - m) / (sd * sd))
                        .collect()
                });
                accumulate(grads, *mu, needs(*mu), || {
                    wv.iter()
                        .zip(mv.iter().zip(sv))
                        .map(|(w, (m, sd))| s * (w - m) / (sd * sd))
                        .collect()
                });
                accumulate(grads, *sigma, needs(*sigma), || {
                    wv.iter()
                        .zip(mv.iter().zip(sv))
                        .map(|(w, (m, sd))| {
                            let z = (w - m) / sd;
                            s * (z * z - 1.0) / sd
                        })
                        .collect()
                });
            }
            Op::PriorLogProb { w, prior } => {
                let s = g[0];
                accumulate(grads, *w, needs(*w), || {
                    val(*w).iter().map(|&v| s * prior.d_log_density(v)).collect()
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn gaussian_log_density_sum(w: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    w.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(w, (m, s))| {
            let z = (w - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

pub(crate) fn log_normal_density(w: f64, sigma: f64) -> f64 {
    let z = w / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    target: NodeId,
    needed: bool,
    contribution: impl FnOnce() -> Vec<f64>,
) {
    if !needed {
        return;
    }
    let c = contribution();
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(c) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}
