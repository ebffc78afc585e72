//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Every key is optional; unknown or repeated keys are rejected.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::InitOptions;
use crate::tensor::Padding;
use crate::training::{KlWeightMode, OptimizerKind, TrainingConfig};
use crate::tsne::TsneParams;
use crate::variational::{AdaptiveActivationParam, Prior};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    /// Architecture default when unset.
    pub learning_rate: Option<f64>,
    /// Architecture default when unset.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub mc_samples_train: usize,
    /// Monte-Carlo draws per image for `predict`.
    pub mc_samples: usize,
    pub eval_samples: usize,
    pub kl_weight_mode: KlWeightMode,
    pub optimizer: OptimizerKind,
    pub early_stop_patience: usize,
    pub rho_init: f64,
    pub alpha_mu_init: f64,
    pub alpha_rho_init: f64,
    pub prior: Prior,
    pub padding: Padding,
    pub seed: u64,
    pub split_seed: u64,
    pub triage_grid: usize,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,
    pub tsne_exaggeration: f64,
    pub trace: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        let alpha = AdaptiveActivationParam::default();
        let ts = TsneParams::default();
        Self {
            arch: "modified_bayesian_cnn".into(),
            learning_rate: None,
            batch_size: None,
            epochs: t.epochs,
            mc_samples_train: t.mc_samples_train,
            mc_samples: 25,
            eval_samples: t.eval_samples,
            kl_weight_mode: t.kl_weight_mode,
            optimizer: t.optimizer,
            early_stop_patience: t.early_stop_patience,
            rho_init: t.rho_init,
            alpha_mu_init: alpha.alpha_mu,
            alpha_rho_init: alpha.alpha_rho,
            prior: t.prior,
            padding: t.padding,
            seed: 0,
            split_seed: 0,
            triage_grid: 50,
            perplexity: ts.perplexity,
            tsne_iterations: ts.iterations,
            tsne_learning_rate: ts.learning_rate,
            tsne_exaggeration: ts.exaggeration,
            trace: None,
        }
    }
}

/// Keys accepted by [`RunConfig::parse`].
pub const KEYS: &[&str] = &[
    "arch",
    "learning_rate",
    "batch_size",
    "epochs",
    "mc_samples_train",
    "mc_samples",
    "eval_samples",
    "kl_weight_mode",
    "optimizer",
    "early_stop_patience",
    "rho_init",
    "alpha_mu_init",
    "alpha_rho_init",
    "prior",
    "prior_sigma",
    "prior_pi",
    "prior_sigma1",
    "prior_sigma2",
    "padding",
    "seed",
    "split_seed",
    "triage_grid",
    "perplexity",
    "tsne_iterations",
    "tsne_learning_rate",
    "tsne_exaggeration",
    "trace",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Input(format!("config key `{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        let mut prior_kind: Option<String> = None;
        let (mut sigma, mut pi, mut sigma1, mut sigma2) = (None, None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Input(format!(
                    "config line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Input(format!("config line {}: unknown key `{key}`", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Input(format!("config line {}: repeated key `{key}`", lineno + 1)));
            }
            match key {
                "arch" => c.arch = v.to_string(),
                "learning_rate" => c.learning_rate = Some(num(key, v)?),
                "batch_size" => c.batch_size = Some(num(key, v)?),
                "epochs" => c.epochs = num(key, v)?,
                "mc_samples_train" => c.mc_samples_train = num(key, v)?,
                "mc_samples" => c.mc_samples = num(key, v)?,
                "eval_samples" => c.eval_samples = num(key, v)?,
                "kl_weight_mode" => c.kl_weight_mode = KlWeightMode::parse(v)?,
                "optimizer" => c.optimizer = OptimizerKind::parse(v)?,
                "early_stop_patience" => c.early_stop_patience = num(key, v)?,
                "rho_init" => c.rho_init = num(key, v)?,
                "alpha_mu_init" => c.alpha_mu_init = num(key, v)?,
                "alpha_rho_init" => c.alpha_rho_init = num(key, v)?,
                "prior" => prior_kind = Some(v.to_string()),
                "prior_sigma" => sigma = Some(num(key, v)?),
                "prior_pi" => pi = Some(num(key, v)?),
                "prior_sigma1" => sigma1 = Some(num(key, v)?),
                "prior_sigma2" => sigma2 = Some(num(key, v)?),
                "padding" => c.padding = Padding::parse(v)?,
                "seed" => c.seed = num(key, v)?,
                "split_seed" => c.split_seed = num(key, v)?,
                "triage_grid" => c.triage_grid = num(key, v)?,
                "perplexity" => c.perplexity = num(key, v)?,
                "tsne_iterations" => c.tsne_iterations = num(key, v)?,
                "tsne_learning_rate" => c.tsne_learning_rate = num(key, v)?,
                "tsne_exaggeration" => c.tsne_exaggeration = num(key, v)?,
                "trace" => c.trace = Some(PathBuf::from(v)),
                _ => unreachable!("key list and match arms disagree"),
            }
        }
        c.prior = match prior_kind.as_deref().unwrap_or("gaussian") {
            "gaussian" => {
                if pi.is_some() || sigma1.is_some() || sigma2.is_some() {
                    return Err(Error::Input("mixture prior keys given for a gaussian prior".into()));
                }
                Prior::Gaussian {
                    sigma: sigma.unwrap_or(1.0),
                }
            }
            "scale_mixture" => {
                if sigma.is_some() {
                    return Err(Error::Input("prior_sigma given for a scale_mixture prior".into()));
                }
                let Prior::ScaleMixture {
                    pi: dpi,
                    sigma1: ds1,
                    sigma2: ds2,
                } = Prior::default_mixture()
                else {
                    unreachable!()
                };
                Prior::ScaleMixture {
                    pi: pi.unwrap_or(dpi),
                    sigma1: sigma1.unwrap_or(ds1),
                    sigma2: sigma2.unwrap_or(ds2),
                }
            }
            other => return Err(Error::Input(format!("unknown prior `{other}`"))),
        };
        c.prior.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn training(&self) -> TrainingConfig {
        let base = TrainingConfig::for_arch(&self.arch);
        TrainingConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs,
            mc_samples_train: self.mc_samples_train,
            kl_weight_mode: self.kl_weight_mode,
            seed: self.seed,
            early_stop_patience: self.early_stop_patience,
            optimizer: self.optimizer,
            eval_samples: self.eval_samples,
            rho_init: self.rho_init,
            prior: self.prior,
            padding: self.padding,
        }
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            rho_init: self.rho_init,
            alpha: AdaptiveActivationParam {
                alpha_mu: self.alpha_mu_init,
                alpha_rho: self.alpha_rho_init,
            },
        }
    }

    pub fn tsne(&self) -> TsneParams {
        TsneParams {
            perplexity: self.perplexity,
            iterations: self.tsne_iterations,
            learning_rate: self.tsne_learning_rate,
            exaggeration: self.tsne_exaggeration,
            seed: self.seed,
            ..TsneParams::default()
        }
    }
}
