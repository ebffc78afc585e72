//! Minimization of the variational free energy over minibatches, with
//! early stopping on validation accuracy.
//!
//! The per-minibatch objective, normalized per item, is
//!
//! ```text
//! loss = 1/S Σ_s [ kl_weight · (log q(w_s|θ) - log P(w_s)) / B  +  mean_b -log P(y_b | x_b, w_s) ]
//! ```
//!
//! With `kl_weight = 1/M` for `M` minibatches, one epoch of these losses sums
//! (times `B`) to a single-sample estimate of the full-dataset free energy.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::network::{stack_images, BayesianNetwork, Noise};
use crate::rng::{self, Rng};
use crate::tensor::{Padding, Tensor};
use crate::uncertainty::predict_dataset;
use crate::variational::Prior;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlWeightMode {
    /// `1 / num_batches` for every minibatch.
    #[default]
    Uniform,
    /// `2^(M-i) / (2^M - 1)` for minibatch `i` of `M` (1-based).
    Geometric,
    /// Full KL on every minibatch.
    Full,
    /// Likelihood only.
    None,
}

impl KlWeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "geometric" => Ok(Self::Geometric),
            "full" => Ok(Self::Full),
            "none" => Ok(Self::None),
            other => Err(Error::Input(format!("unknown kl_weight_mode `{other}`"))),
        }
    }

    /// Weight of minibatch `index` (0-based) out of `num_batches`.
    pub fn weight(self, index: usize, num_batches: usize) -> f64 {
        match self {
            Self::Uniform => 1.0 / num_batches as f64,
            Self::Geometric => {
                let m = num_batches as i32;
                if m >= 1000 {
                    // 2^(M-i)/(2^M-1) underflows; the first batch takes everything
                    return if index == 0 { 1.0 } else { 0.0 };
                }
                2f64.powi(m - 1 - index as i32) / (2f64.powi(m) - 1.0)
            }
            Self::Full => 1.0,
            Self::None => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Input(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mc_samples_train: usize,
    pub kl_weight_mode: KlWeightMode,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    /// Monte-Carlo draws used when measuring accuracy after each epoch.
    pub eval_samples: usize,
    pub rho_init: f64,
    pub prior: Prior,
    pub padding: Padding,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::for_arch("modified_bayesian_cnn")
    }
}

impl TrainingConfig {
    /// Defaults for a named preset: learning rate 0.001 / batch 128 for
    /// `bayesian_cnn`, 0.0001 / 64 for `modified_bayesian_cnn`.
    pub fn for_arch(arch: &str) -> Self {
        let (learning_rate, batch_size) = match arch {
            "bayesian_cnn" => (1e-3, 128),
            _ => (1e-4, 64),
        };
        Self {
            learning_rate,
            batch_size,
            epochs: 30,
            mc_samples_train: 1,
            kl_weight_mode: KlWeightMode::Uniform,
            seed: 0,
            early_stop_patience: 10,
            optimizer: OptimizerKind::Sgd,
            eval_samples: 10,
            rho_init: -5.0,
            prior: Prior::default(),
            padding: Padding::Same,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Input(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.mc_samples_train == 0 || self.eval_samples == 0 {
            return Err(Error::Input(
                "batch_size, mc_samples_train and eval_samples must be >= 1".into(),
            ));
        }
        self.prior.validate()
    }
}

/// Negative log-likelihood of a batch of logits (`[B, K]`), mean over items.
pub fn nll_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.nll_loss(z, labels)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfeOptions {
    pub kl_weight: f64,
    pub mc_samples: usize,
}

#[derive(Clone, Debug)]
pub struct VfeOutput {
    pub loss: f64,
    /// Mean over Monte-Carlo samples of the batch-mean NLL.
    pub nll: f64,
    /// Mean over Monte-Carlo samples of the unweighted KL estimate.
    pub kl: f64,
    /// Gradients in [`BayesianNetwork::param_slices`] order.
    pub gradients: Vec<Vec<f64>>,
}

/// Free-energy loss and its gradient for one minibatch.
pub fn vfe_loss(
    model: &BayesianNetwork,
    images: &[&Tensor],
    labels: &[usize],
    opts: VfeOptions,
    rng: &mut Rng,
) -> Result<VfeOutput> {
    if images.is_empty() {
        return Err(Error::Input("vfe_loss on an empty batch".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Input("images and labels differ in length".into()));
    }
    if opts.mc_samples == 0 {
        return Err(Error::Contract("mc_samples must be >= 1".into()));
    }
    let batch = images.len() as f64;
    let mut g = Graph::new();
    let nodes = model.register(&mut g, true);
    let x = g.constant(stack_images(images, model.spec.input)?);
    let with_kl = opts.kl_weight != 0.0;

    let mut terms = Vec::with_capacity(opts.mc_samples);
    let (mut nll_total, mut kl_total) = (0.0, 0.0);
    for _ in 0..opts.mc_samples {
        let noise = Noise::sample(model, rng);
        let out = model.forward(&mut g, &nodes, x, &noise, with_kl)?;
        let nll = g.nll_loss(out.logits, labels)?;
        nll_total += g.value(nll).item();
        let term = match out.kl {
            Some(kl) => {
                kl_total += g.value(kl).item();
                let weighted = g.scale(kl, opts.kl_weight / batch);
                g.add(weighted, nll)?
            }
            None => nll,
        };
        terms.push(term);
    }
    let s = opts.mc_samples as f64;
    if !nll_total.is_finite() {
        return Err(Error::Numeric("non-finite likelihood term in VFE".into()));
    }
    if !kl_total.is_finite() {
        return Err(Error::Numeric("non-finite KL term in VFE".into()));
    }
    let loss = if terms.len() == 1 {
        terms[0]
    } else {
        let mut it = terms.into_iter();
        let first = it.next().unwrap();
        let sum = it.try_fold(first, |acc, t| g.add(acc, t))?;
        g.scale(sum, 1.0 / s)
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let gradients = model.collect_gradients(&grads, &nodes);
    if gradients.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in VFE".into()));
    }
    Ok(VfeOutput {
        loss: value,
        nll: nll_total / s,
        kl: kl_total / s,
        gradients,
    })
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned parameters.
    pub selected: usize,
}

impl TrainingTrace {
    /// `epoch,train_loss,train_acc,val_acc`, one row per completed epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e}",
                r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy
            );
        }
        s
    }

    pub fn selected_record(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.selected)
    }
}

/// Index of the highest validation accuracy, earliest on ties.
pub fn best_epoch(val: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val.iter().enumerate() {
        if best.is_none_or(|b| v > val[b]) {
            best = Some(i);
        }
    }
    best
}

/// Seed of the Monte-Carlo stream used to score accuracy for a run seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Accuracy of the predictive mean over `n` draws.
pub fn accuracy(model: &BayesianNetwork, images: &[&LabeledImage], n: usize, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let pixels: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    let sets = predict_dataset(model, &pixels, n, seed)?;
    let correct = sets
        .iter()
        .zip(images)
        .filter(|(s, img)| s.predicted_class() == img.label)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Shuffled minibatch training. Returns the parameters of the epoch with the
/// best validation accuracy and the per-epoch trace.
pub fn train(
    model: BayesianNetwork,
    splits: &DatasetSplit,
    config: &TrainingConfig,
) -> Result<(BayesianNetwork, TrainingTrace)> {
    config.validate()?;
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(Error::Input("training and validation splits must be nonempty".into()));
    }
    let mut ids = HashSet::new();
    for img in splits.train.iter().chain(&splits.validation).chain(&splits.test) {
        if !ids.insert(img.id.as_str()) {
            return Err(Error::Input(format!("image `{}` appears in more than one split", img.id)));
        }
    }
    let train_set: Vec<&LabeledImage> = splits.train.iter().collect();
    let val_set: Vec<&LabeledImage> = splits.validation.iter().collect();
    let num_batches = train_set.len().div_ceil(config.batch_size);

    let mut model = model;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainingTrace::default();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train_set[i].pixels).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label).collect();
            let opts = VfeOptions {
                kl_weight: config.kl_weight_mode.weight(bi, num_batches),
                mc_samples: config.mc_samples_train,
            };
            let out = vfe_loss(&model, &images, &labels, opts, &mut rng)?;
            loss_sum += out.loss;
            if config.learning_rate != 0.0 {
                optimizer.apply(model.param_slices_mut(), &out.gradients);
            }
        }
        let es = eval_seed(config.seed);
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / num_batches as f64,
            train_accuracy: accuracy(&model, &train_set, config.eval_samples, es)?,
            val_accuracy: accuracy(&model, &val_set, config.eval_samples, es)?,
        };
        log::info!(
            "epoch {}: loss {:.4} train {:.4} val {:.4}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_accuracy
        );
        let improved = best.as_ref().is_none_or(|(_, acc, _)| record.val_accuracy > *acc);
        if improved {
            best = Some((epoch, record.val_accuracy, model.flat_params()));
        }
        trace.epochs.push(record);
        let best_idx = best.as_ref().map(|b| b.0).unwrap_or(0);
        if epoch - best_idx >= config.early_stop_patience {
            break;
        }
    }
    if let Some((idx, _, params)) = best {
        model.set_flat_params(&params)?;
        trace.selected = idx;
    }
    Ok((model, trace))
}

// stream for the training loop's shuffles and weight noise
const TRAIN_STREAM: u64 = 0x7261_696e;
