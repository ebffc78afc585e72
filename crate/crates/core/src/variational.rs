//! Factorized Gaussian variational posteriors, weight priors, the Monte-Carlo
//! KL estimator and the stochastic adaptive ReLU.
//!
//! A weight block is described by `(mu, rho)` with `sigma = softplus(rho)`,
//! and sampled by reparameterization: `w = mu + softplus(rho) * eps`,
//! `eps ~ N(0, 1)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_log_density_sum, log_normal_density, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{same_shape, softplus, Tensor};

/// Zero-mean prior over individual weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Gaussian { sigma: f64 },
    /// `pi·N(0, sigma1²) + (1-pi)·N(0, sigma2²)`
    ScaleMixture { pi: f64, sigma1: f64, sigma2: f64 },
}

impl Default for Prior {
    fn default() -> Self {
        Prior::Gaussian { sigma: 1.0 }
    }
}

impl Prior {
    pub fn default_mixture() -> Self {
        Prior::ScaleMixture {
            pi: 0.5,
            sigma1: 1.0,
            sigma2: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Prior::ScaleMixture { pi, sigma1, sigma2 }
                if pi > 0.0 && pi < 1.0 && sigma1 >= sigma2 && sigma2 > 0.0 && sigma1.is_finite() =>
            {
                Ok(())
            }
            p => Err(Error::Input(format!("invalid prior {p:?}"))),
        }
    }

    pub fn log_density(&self, w: f64) -> f64 {
        match *self {
            Prior::Gaussian { sigma } => log_normal_density(w, sigma),
            Prior::ScaleMixture { pi, sigma1, sigma2 } => {
                let a = pi.ln() + log_normal_density(w, sigma1);
                let b = (1.0 - pi).ln() + log_normal_density(w, sigma2);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        }
    }

    pub fn d_log_density(&self, w: f64) -> f64 {
        match *self {
            Prior::Gaussian { sigma } => -w / (sigma * sigma),
            Prior::ScaleMixture { pi, sigma1, sigma2 } => {
                let a = pi.ln() + log_normal_density(w, sigma1);
                let b = (1.0 - pi).ln() + log_normal_density(w, sigma2);
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                let (ra, rb) = (ea / (ea + eb), eb / (ea + eb));
                -w * (ra / (sigma1 * sigma1) + rb / (sigma2 * sigma2))
            }
        }
    }
}

/// `(mu, rho)` for one weight block.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParameter {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl VariationalParameter {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        same_shape(&mu, &rho, "variational parameter")?;
        Ok(Self { mu, rho })
    }

    /// `mu ~ U(-b, b)` with `b = 1/sqrt(fan_in)`, `rho` constant.
    pub fn init(shape: &[usize], fan_in: usize, rho_init: f64, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            mu: Tensor::new(shape.to_vec(), mu).expect("init shape"),
            rho: Tensor::full(shape, rho_init),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }
}

/// Trainable stochastic scale of the adaptive ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveActivationParam {
    pub alpha_mu: f64,
    pub alpha_rho: f64,
}

impl Default for AdaptiveActivationParam {
    fn default() -> Self {
        Self {
            alpha_mu: 1.0,
            alpha_rho: -5.0,
        }
    }
}

impl AdaptiveActivationParam {
    pub fn sample(&self, eps: f64) -> f64 {
        self.alpha_mu + softplus(self.alpha_rho) * eps
    }
}

pub fn sample_weights(vp: &VariationalParameter, eps: &Tensor) -> Result<Tensor> {
    same_shape(&vp.mu, eps, "sample_weights")?;
    let data = vp
        .mu
        .data()
        .iter()
        .zip(vp.rho.data())
        .zip(eps.data())
        .map(|((m, r), e)| m + softplus(*r) * e)
        .collect();
    Tensor::new(vp.mu.shape().to_vec(), data)
}

/// `Σ log N(w; mu, softplus(rho)²)`.
pub fn log_q(vp: &VariationalParameter, w: &Tensor) -> Result<f64> {
    same_shape(&vp.mu, w, "log_q")?;
    Ok(gaussian_log_density_sum(w.data(), vp.mu.data(), vp.sigma().data()))
}

pub fn log_prior(prior: &Prior, w: &Tensor) -> f64 {
    w.data().iter().map(|&v| prior.log_density(v)).sum()
}

/// Monte-Carlo estimate of `KL(q ‖ prior)`: the mean over `n_samples`
/// reparameterized draws of `log q(w) - log P(w)`.
pub fn kl_monte_carlo(vp: &VariationalParameter, prior: &Prior, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Contract("kl_monte_carlo needs at least one sample".into()));
    }
    let mut rng = rng::seeded(seed);
    let sigma = vp.sigma();
    let mut total = 0.0;
    for _ in 0..n_samples {
        for (m, s) in vp.mu.data().iter().zip(sigma.data()) {
            let e = rng::normal(&mut rng);
            let w = m + s * e;
            // log N(w; m, s) with (w - m)/s == e
            let lq = -0.5 * LN_2PI - s.ln() - 0.5 * e * e;
            total += lq - prior.log_density(w);
        }
    }
    Ok(total / n_samples as f64)
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `max(0, alpha·x)` with `alpha = alpha_mu + softplus(alpha_rho)·eps` shared
/// by every element.
pub fn adaptive_relu(x: &Tensor, act: &AdaptiveActivationParam, eps: f64) -> Tensor {
    let alpha = act.sample(eps);
    x.map(|v| crate::tensor::relu(alpha * v))
}

/// Graph handles for one variational weight block.
#[derive(Clone, Copy, Debug)]
pub struct VariationalNodes {
    pub mu: NodeId,
    pub rho: NodeId,
}

impl VariationalNodes {
    /// Adds `(mu, rho)` as leaves; non-trainable leaves skip gradient work.
    pub fn register(g: &mut Graph, vp: &VariationalParameter, trainable: bool) -> Self {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            mu: leaf(g, &vp.mu),
            rho: leaf(g, &vp.rho),
        }
    }

    /// Reparameterized sample; returns `(w, sigma)` nodes.
    pub fn sample(&self, g: &mut Graph, eps: Tensor) -> Result<(NodeId, NodeId)> {
        let sigma = g.softplus(self.rho);
        let eps = g.constant(eps);
        let noise = g.mul(sigma, eps)?;
        let w = g.add(self.mu, noise)?;
        Ok((w, sigma))
    }
}

/// Prior used for one block inside the graph: the shared zero-mean prior, or
/// a fixed factorized Gaussian (e.g. a frozen copy of a posterior).
#[derive(Clone, Debug, PartialEq)]
pub enum BlockPrior {
    Shared(Prior),
    Factorized { mean: Tensor, sigma: Tensor },
}

/// Single-sample KL contribution `log q(w|θ) - log P(w)` as a graph node.
pub fn kl_sample_node(
    g: &mut Graph,
    w: NodeId,
    nodes: &VariationalNodes,
    sigma: NodeId,
    prior: &BlockPrior,
) -> Result<NodeId> {
    let lq = g.gaussian_log_prob(w, nodes.mu, sigma)?;
    let lp = match prior {
        BlockPrior::Shared(p) => g.prior_log_prob(w, *p),
        BlockPrior::Factorized { mean, sigma } => {
            let m = g.constant(mean.clone());
            let s = g.constant(sigma.clone());
            g.gaussian_log_prob(w, m, s)?
        }
    };
    g.sub(lq, lp)
}

/// Graph handles for an adaptive activation.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveNodes {
    pub alpha_mu: NodeId,
    pub alpha_rho: NodeId,
}

impl AdaptiveNodes {
    pub fn register(g: &mut Graph, act: &AdaptiveActivationParam, trainable: bool) -> Self {
        let leaf = |g: &mut Graph, v: f64| {
            if trainable {
                g.param(Tensor::scalar(v))
            } else {
                g.constant(Tensor::scalar(v))
            }
        };
        Self {
            alpha_mu: leaf(g, act.alpha_mu),
            alpha_rho: leaf(g, act.alpha_rho),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId, eps: f64) -> Result<NodeId> {
        let spread = g.softplus(self.alpha_rho);
        let scaled = g.scale(spread, eps);
        let alpha = g.add(self.alpha_mu, scaled)?;
        let y = g.scale_by(x, alpha)?;
        Ok(g.relu(y))
    }
}
