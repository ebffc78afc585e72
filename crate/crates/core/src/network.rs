//! Layer specifications, the two named architecture presets, and the
//! variational network that owns their parameters.
//!
//! Preset layout (both presets): six 3×3 stride-1 variational convolutions,
//! each followed by ReLU, with a 2×2 stride-2 max pool after conv 2, 4 and 6;
//! then FC 1, its activation, FC 2 (two logits) and a softmax. The modified
//! preset uses the stochastic adaptive ReLU after FC 1. Pools in the presets
//! drop a trailing odd row/column so 50×50 inputs compose (50→25→12→6).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{softmax_in_place, Padding, PoolMode, Tensor};
use crate::variational::{
    kl_sample_node, AdaptiveActivationParam, AdaptiveNodes, BlockPrior, Prior, VariationalNodes,
    VariationalParameter,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    VariationalConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// Flattens its input when it is not already `[B, F]`.
    VariationalDense { in_features: usize, out_features: usize },
    MaxPool { size: usize, stride: usize, mode: PoolMode },
    Relu,
    AdaptiveRelu,
    Softmax,
}

/// Filter counts of the six convolutions and the width of FC 1.
pub const BAYESIAN_CNN: ([usize; 6], usize) = ([16, 32, 32, 64, 128, 256], 512);
pub const MODIFIED_BAYESIAN_CNN: ([usize; 6], usize) = ([32, 64, 64, 128, 128, 128], 256);
/// Convolutions after which a max pool is inserted (1-based).
pub const POOL_AFTER: [usize; 3] = [2, 4, 6];
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Per-layer activation shape (without the batch axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Image([usize; 3]),
    Flat(usize),
}

impl NetworkSpec {
    pub fn preset(name: &str, input: [usize; 3], padding: Padding) -> Result<Self> {
        let ((filters, fc1), adaptive) = match name {
            "bayesian_cnn" => (BAYESIAN_CNN, false),
            "modified_bayesian_cnn" => (MODIFIED_BAYESIAN_CNN, true),
            other => {
                return Err(Error::Input(format!(
                    "unknown architecture `{other}` (expected bayesian_cnn or modified_bayesian_cnn)"
                )))
            }
        };
        Self::conv_stack(name, input, &filters, fc1, adaptive, padding)
    }

    /// Convolution stack in the preset layout with arbitrary widths.
    pub fn conv_stack(
        name: &str,
        input: [usize; 3],
        filters: &[usize],
        fc1: usize,
        adaptive: bool,
        padding: Padding,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels = input[0];
        for (i, &f) in filters.iter().enumerate() {
            layers.push(LayerSpec::VariationalConv {
                in_channels: channels,
                out_channels: f,
                kernel: 3,
                stride: 1,
                padding,
            });
            layers.push(LayerSpec::Relu);
            if POOL_AFTER.contains(&(i + 1)) {
                layers.push(LayerSpec::MaxPool {
                    size: 2,
                    stride: 2,
                    mode: PoolMode::Floor,
                });
            }
            channels = f;
        }
        // placeholder width, fixed below once the flattened size is known
        layers.push(LayerSpec::VariationalDense {
            in_features: 0,
            out_features: fc1,
        });
        layers.push(if adaptive { LayerSpec::AdaptiveRelu } else { LayerSpec::Relu });
        layers.push(LayerSpec::VariationalDense {
            in_features: fc1,
            out_features: NUM_CLASSES,
        });
        layers.push(LayerSpec::Softmax);

        let mut spec = Self {
            name: name.to_string(),
            input,
            layers,
        };
        let fc1_index = spec.layers.len() - 4;
        let shapes = spec.shapes_up_to(fc1_index)?;
        let flat = match shapes.last().unwrap() {
            Shape::Image([c, h, w]) => c * h * w,
            Shape::Flat(f) => *f,
        };
        spec.layers[fc1_index] = LayerSpec::VariationalDense {
            in_features: flat,
            out_features: fc1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Shapes after each of the first `n` layers, starting with the input shape.
    fn shapes_up_to(&self, n: usize) -> Result<Vec<Shape>> {
        let mut shapes = vec![Shape::Image(self.input)];
        for (i, layer) in self.layers.iter().take(n).enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match (layer, &cur) {
                (
                    LayerSpec::VariationalConv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Image([c, h, w]),
                ) => {
                    if c != in_channels {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv expects {in_channels} channels, gets {c}"
                        )));
                    }
                    let g = crate::tensor::ConvGeometry::new(
                        [*c, *h, *w],
                        [*out_channels, *c, *kernel, *kernel],
                        *stride,
                        *padding,
                    )?;
                    Shape::Image([*out_channels, g.oh, g.ow])
                }
                (LayerSpec::MaxPool { size, stride, mode }, Shape::Image([c, h, w])) => {
                    if *size != 2 || *stride != 2 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: only 2x2 stride-2 pooling is supported"
                        )));
                    }
                    if *mode == PoolMode::Strict && (h % 2 != 0 || w % 2 != 0) {
                        return Err(Error::Dimension(format!(
                            "layer {i}: strict pooling of odd size {h}x{w}"
                        )));
                    }
                    if *h < 2 || *w < 2 {
                        return Err(Error::Dimension(format!("layer {i}: pooling {h}x{w}")));
                    }
                    Shape::Image([*c, h / 2, w / 2])
                }
                (LayerSpec::VariationalDense { in_features, out_features }, s) => {
                    let f = match s {
                        Shape::Image([c, h, w]) => c * h * w,
                        Shape::Flat(f) => *f,
                    };
                    if f != *in_features {
                        return Err(Error::Dimension(format!(
                            "layer {i}: dense expects {in_features} features, gets {f}"
                        )));
                    }
                    Shape::Flat(*out_features)
                }
                (LayerSpec::Relu | LayerSpec::AdaptiveRelu, s) => s.clone(),
                (LayerSpec::Softmax, Shape::Flat(f)) => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::Dimension("softmax must be the last layer".into()));
                    }
                    Shape::Flat(*f)
                }
                (layer, s) => {
                    return Err(Error::Dimension(format!(
                        "layer {i}: {layer:?} cannot follow shape {s:?}"
                    )))
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Checks that consecutive layer shapes compose; returns every intermediate shape.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let shapes = self.shapes_up_to(self.layers.len())?;
        match shapes.last().unwrap() {
            Shape::Flat(k) if *k >= 2 => Ok(shapes),
            s => Err(Error::Dimension(format!(
                "network must end in at least two class scores, ends in {s:?}"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.validate().ok().and_then(|s| s.last().cloned()) {
            Some(Shape::Flat(k)) => k,
            _ => NUM_CLASSES,
        }
    }
}

/// Parameters of a variational conv or dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalBlock {
    pub weight: VariationalParameter,
    pub bias: VariationalParameter,
    /// Replaces the network prior for this block when set (weight, bias).
    pub prior_override: Option<(BlockPrior, BlockPrior)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Stateless,
    Variational(VariationalBlock),
    Adaptive(AdaptiveActivationParam),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub rho_init: f64,
    pub alpha: AdaptiveActivationParam,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            rho_init: -5.0,
            alpha: AdaptiveActivationParam::default(),
        }
    }
}

/// A network spec together with its variational parameters and prior.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesianNetwork {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
    pub prior: Prior,
}

/// One draw of every noise variable the network consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerNoise {
    None,
    Variational { weight: Tensor, bias: Tensor },
    Adaptive(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Noise(pub Vec<LayerNoise>);

impl Noise {
    /// Draws in layer order: weight noise, then bias noise, then α noise.
    pub fn sample(net: &BayesianNetwork, rng: &mut Rng) -> Self {
        Noise(
            net.layers
                .iter()
                .map(|p| match p {
                    LayerParams::Stateless => LayerNoise::None,
                    LayerParams::Variational(b) => LayerNoise::Variational {
                        weight: Tensor::new(b.weight.shape().to_vec(), rng::normals(rng, b.weight.len()))
                            .expect("noise shape"),
                        bias: Tensor::new(b.bias.shape().to_vec(), rng::normals(rng, b.bias.len()))
                            .expect("noise shape"),
                    },
                    LayerParams::Adaptive(_) => LayerNoise::Adaptive(rng::normal(rng)),
                })
                .collect(),
        )
    }

    /// All-zero noise: every weight equals its mean and every α its `alpha_mu`.
    pub fn zeros(net: &BayesianNetwork) -> Self {
        Noise(
            net.layers
                .iter()
                .map(|p| match p {
                    LayerParams::Stateless => LayerNoise::None,
                    LayerParams::Variational(b) => LayerNoise::Variational {
                        weight: Tensor::zeros(b.weight.shape()),
                        bias: Tensor::zeros(b.bias.shape()),
                    },
                    LayerParams::Adaptive(_) => LayerNoise::Adaptive(0.0),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LayerNodes {
    None,
    Variational { weight: VariationalNodes, bias: VariationalNodes },
    Adaptive(AdaptiveNodes),
}

/// Graph leaves for every network parameter.
#[derive(Clone, Debug)]
pub struct ParamNodes(pub Vec<LayerNodes>);

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, K]` class scores before the softmax layer.
    pub logits: NodeId,
    /// Single-sample `Σ log q(w) - log P(w)` over all variational blocks.
    pub kl: Option<NodeId>,
}

/// Images per graph when running inference over a dataset.
const INFERENCE_CHUNK: usize = 64;

impl BayesianNetwork {
    pub fn new(spec: NetworkSpec, prior: Prior, init: InitOptions, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        prior.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::VariationalConv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    LayerParams::Variational(VariationalBlock {
                        weight: VariationalParameter::init(
                            &[out_channels, in_channels, kernel, kernel],
                            fan_in,
                            init.rho_init,
                            rng,
                        ),
                        bias: VariationalParameter::init(&[out_channels], fan_in, init.rho_init, rng),
                        prior_override: None,
                    })
                }
                LayerSpec::VariationalDense {
                    in_features,
                    out_features,
                } => LayerParams::Variational(VariationalBlock {
                    weight: VariationalParameter::init(
                        &[out_features, in_features],
                        in_features,
                        init.rho_init,
                        rng,
                    ),
                    bias: VariationalParameter::init(&[out_features], in_features, init.rho_init, rng),
                    prior_override: None,
                }),
                LayerSpec::AdaptiveRelu => LayerParams::Adaptive(init.alpha),
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(Self { spec, layers, prior })
    }

    pub fn num_parameters(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Every trainable scalar, grouped in canonical order: per variational
    /// layer `weight.mu, weight.rho, bias.mu, bias.rho`; per adaptive layer
    /// `alpha_mu, alpha_rho`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for p in &self.layers {
            match p {
                LayerParams::Stateless => {}
                LayerParams::Variational(b) => {
                    out.push(b.weight.mu.data());
                    out.push(b.weight.rho.data());
                    out.push(b.bias.mu.data());
                    out.push(b.bias.rho.data());
                }
                LayerParams::Adaptive(a) => {
                    out.push(std::slice::from_ref(&a.alpha_mu));
                    out.push(std::slice::from_ref(&a.alpha_rho));
                }
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for p in &mut self.layers {
            match p {
                LayerParams::Stateless => {}
                LayerParams::Variational(b) => {
                    out.push(b.weight.mu.data_mut());
                    out.push(b.weight.rho.data_mut());
                    out.push(b.bias.mu.data_mut());
                    out.push(b.bias.rho.data_mut());
                }
                LayerParams::Adaptive(a) => {
                    out.push(std::slice::from_mut(&mut a.alpha_mu));
                    out.push(std::slice::from_mut(&mut a.alpha_rho));
                }
            }
        }
        out
    }

    /// Flattened copy of [`Self::param_slices`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// Sets every block's prior to a fixed copy of its current posterior.
    pub fn freeze_posterior_as_prior(&mut self) {
        for p in &mut self.layers {
            if let LayerParams::Variational(b) = p {
                let w = BlockPrior::Factorized {
                    mean: b.weight.mu.clone(),
                    sigma: b.weight.sigma(),
                };
                let bias = BlockPrior::Factorized {
                    mean: b.bias.mu.clone(),
                    sigma: b.bias.sigma(),
                };
                b.prior_override = Some((w, bias));
            }
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.layers
                .iter()
                .map(|p| match p {
                    LayerParams::Stateless => LayerNodes::None,
                    LayerParams::Variational(b) => LayerNodes::Variational {
                        weight: VariationalNodes::register(g, &b.weight, trainable),
                        bias: VariationalNodes::register(g, &b.bias, trainable),
                    },
                    LayerParams::Adaptive(a) => LayerNodes::Adaptive(AdaptiveNodes::register(g, a, trainable)),
                })
                .collect(),
        )
    }

    /// Gradients in the canonical parameter order of [`Self::param_slices`].
    pub fn collect_gradients(&self, grads: &Gradients, nodes: &ParamNodes) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for n in &nodes.0 {
            match n {
                LayerNodes::None => {}
                LayerNodes::Variational { weight, bias } => {
                    for id in [weight.mu, weight.rho, bias.mu, bias.rho] {
                        out.push(grads.wrt(id).data().to_vec());
                    }
                }
                LayerNodes::Adaptive(a) => {
                    out.push(grads.wrt(a.alpha_mu).data().to_vec());
                    out.push(grads.wrt(a.alpha_rho).data().to_vec());
                }
            }
        }
        out
    }

    /// Runs one stochastic forward pass of a `[B, C, H, W]` batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        input: NodeId,
        noise: &Noise,
        with_kl: bool,
    ) -> Result<ForwardOutput> {
        if noise.0.len() != self.layers.len() || nodes.0.len() != self.layers.len() {
            return Err(Error::Contract("noise/nodes do not match the network".into()));
        }
        let mut x = input;
        let mut kl_terms = Vec::new();
        for (i, spec) in self.spec.layers.iter().enumerate() {
            x = match (spec, &nodes.0[i], &noise.0[i]) {
                (LayerSpec::Softmax, _, _) => break,
                (LayerSpec::Relu, _, _) => g.relu(x),
                (LayerSpec::MaxPool { mode, .. }, _, _) => g.maxpool2d(x, *mode)?,
                (LayerSpec::AdaptiveRelu, LayerNodes::Adaptive(a), LayerNoise::Adaptive(eps)) => {
                    a.apply(g, x, *eps)?
                }
                (
                    LayerSpec::VariationalConv { .. } | LayerSpec::VariationalDense { .. },
                    LayerNodes::Variational { weight, bias },
                    LayerNoise::Variational { weight: ew, bias: eb },
                ) => {
                    let (w, w_sigma) = weight.sample(g, ew.clone())?;
                    let (b, b_sigma) = bias.sample(g, eb.clone())?;
                    if with_kl {
                        let LayerParams::Variational(block) = &self.layers[i] else {
                            unreachable!()
                        };
                        let (pw, pb) = match &block.prior_override {
                            Some((pw, pb)) => (pw.clone(), pb.clone()),
                            None => (BlockPrior::Shared(self.prior), BlockPrior::Shared(self.prior)),
                        };
                        kl_terms.push(kl_sample_node(g, w, weight, w_sigma, &pw)?);
                        kl_terms.push(kl_sample_node(g, b, bias, b_sigma, &pb)?);
                    }
                    let y = match spec {
                        LayerSpec::VariationalConv { stride, padding, .. } => g.conv2d(x, w, *stride, *padding)?,
                        _ => {
                            let flat = if g.value(x).rank() == 2 { x } else { g.flatten(x)? };
                            g.linear(flat, w)?
                        }
                    };
                    g.bias_add(y, b)?
                }
                (spec, _, _) => {
                    return Err(Error::Contract(format!("layer {i} ({spec:?}) has mismatched parameters")))
                }
            };
        }
        let kl = if with_kl {
            let mut it = kl_terms.into_iter();
            match it.next() {
                Some(first) => Some(it.try_fold(first, |acc, t| g.add(acc, t))?),
                None => Some(g.constant(Tensor::scalar(0.0))),
            }
        } else {
            None
        };
        Ok(ForwardOutput { logits: x, kl })
    }

    /// Class probabilities for each image under one fixed noise draw.
    pub fn predict_probs(&self, images: &[&Tensor], noise: &Noise) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let nodes = self.register(&mut g, false);
            let batch = stack_images(chunk, self.spec.input)?;
            let x = g.constant(batch);
            let fwd = self.forward(&mut g, &nodes, x, noise, false)?;
            let logits = g.value(fwd.logits);
            let k = logits.shape()[1];
            for row in logits.data().chunks(k) {
                let mut p = row.to_vec();
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite logits in prediction".into()));
                }
                softmax_in_place(&mut p);
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Stacks `[C,H,W]` images into one `[N,C,H,W]` batch.
pub fn stack_images(images: &[&Tensor], expected: [usize; 3]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * expected.iter().product::<usize>());
    for img in images {
        if img.shape() != expected {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match network input {expected:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let [c, h, w] = expected;
    Tensor::new(vec![images.len(), c, h, w], data)
}
