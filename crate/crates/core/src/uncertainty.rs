//! Monte-Carlo predictive distributions and their aleatoric/epistemic split.
//!
//! For softmax samples `p_1..p_N` with mean `p̄`:
//!
//! ```text
//! aleatoric = 1/N Σ (diag(p_n) - p_n p_nᵀ)
//! epistemic = 1/N Σ (p_n - p̄)(p_n - p̄)ᵀ
//! aleatoric + epistemic = 1/N Σ diag(p_n) - p̄ p̄ᵀ
//! ```

use crate::error::{Error, Result};
use crate::network::{BayesianNetwork, Noise};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSampleSet {
    samples: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl PredictiveSampleSet {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Contract("predictive sample set needs N >= 1".into()));
        };
        let k = first.len();
        if k == 0 {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        for p in &samples {
            if p.len() != k {
                return Err(Error::Dimension("probability vectors of different lengths".into()));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-10 {
                return Err(Error::Contract(format!("{p:?} is not a probability vector")));
            }
        }
        let n = samples.len() as f64;
        let mean = (0..k)
            .map(|j| samples.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect();
        Ok(Self { samples, mean })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mean.len()
    }

    /// Argmax of the mean; the lowest class index wins ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Dense `k × k` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    k: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            data: vec![0.0; k * k],
        }
    }

    /// Panics unless `data.len() == k * k`.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), k * k, "square matrix data length");
        Self { k, data }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.k + j] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    fn scaled(mut self, c: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= c);
        self
    }
}

pub fn aleatoric(samples: &PredictiveSampleSet) -> SquareMatrix {
    let k = samples.num_classes();
    let mut m = SquareMatrix::zeros(k);
    for p in samples.samples() {
        for i in 0..k {
            m.add_to(i, i, p[i]);
            for j in 0..k {
                m.add_to(i, j, -p[i] * p[j]);
            }
        }
    }
    m.scaled(1.0 / samples.len() as f64)
}

pub fn epistemic(samples: &PredictiveSampleSet) -> SquareMatrix {
    let k = samples.num_classes();
    let mean = samples.mean();
    let mut m = SquareMatrix::zeros(k);
    for p in samples.samples() {
        for i in 0..k {
            let di = p[i] - mean[i];
            for j in 0..k {
                m.add_to(i, j, di * (p[j] - mean[j]));
            }
        }
    }
    m.scaled(1.0 / samples.len() as f64)
}

/// Per-image prediction with its uncertainty summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRecord {
    pub id: String,
    pub predicted: usize,
    pub label: usize,
    pub aleatoric: SquareMatrix,
    pub epistemic: SquareMatrix,
    /// `trace(aleatoric)`
    pub scalar_aleatoric: f64,
    /// `trace(epistemic)`
    pub scalar_epistemic: f64,
    /// Epistemic trace min-max normalized over a record list; see [`normalize_epistemic`].
    pub normalized_epistemic: f64,
}

impl UncertaintyRecord {
    pub fn from_samples(id: impl Into<String>, label: usize, samples: &PredictiveSampleSet) -> Self {
        let a = aleatoric(samples);
        let e = epistemic(samples);
        Self {
            id: id.into(),
            predicted: samples.predicted_class(),
            label,
            scalar_aleatoric: a.trace(),
            scalar_epistemic: e.trace(),
            aleatoric: a,
            epistemic: e,
            normalized_epistemic: 0.0,
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

/// `E = (e - min) / (max - min)` over the list; all zero when the range is empty.
pub fn normalize_epistemic(records: &mut [UncertaintyRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("normalize_epistemic needs a nonempty list".into()));
    }
    let min = records.iter().map(|r| r.scalar_epistemic).fold(f64::INFINITY, f64::min);
    let max = records
        .iter()
        .map(|r| r.scalar_epistemic)
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    for r in records.iter_mut() {
        r.normalized_epistemic = if range > 0.0 {
            (r.scalar_epistemic - min) / range
        } else {
            0.0
        };
    }
    Ok(())
}

/// `n` Monte-Carlo forward passes for one image. Draw `d` uses the noise
/// stream `(seed, d)`, so the result matches [`predict_dataset`].
pub fn predictive_samples(
    model: &BayesianNetwork,
    image: &Tensor,
    n: usize,
    seed: u64,
) -> Result<PredictiveSampleSet> {
    Ok(predict_dataset(model, &[image], n, seed)?.remove(0))
}

/// Predictive sample sets for many images. Each draw samples one full set of
/// weights (and α) and pushes every image through it.
pub fn predict_dataset(
    model: &BayesianNetwork,
    images: &[&Tensor],
    n: usize,
    seed: u64,
) -> Result<Vec<PredictiveSampleSet>> {
    if n == 0 {
        return Err(Error::Contract("need at least one Monte-Carlo sample".into()));
    }
    let mut per_image: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); images.len()];
    for draw in 0..n {
        let noise = Noise::sample(model, &mut rng::stream(seed, draw as u64));
        let probs = model.predict_probs(images, &noise)?;
        for (acc, p) in per_image.iter_mut().zip(probs) {
            acc.push(p);
        }
    }
    per_image.into_iter().map(PredictiveSampleSet::new).collect()
}

/// Same as [`predict_dataset`] with every noise variable fixed at zero.
pub fn predict_dataset_deterministic(
    model: &BayesianNetwork,
    images: &[&Tensor],
    n: usize,
) -> Result<Vec<PredictiveSampleSet>> {
    if n == 0 {
        return Err(Error::Contract("need at least one Monte-Carlo sample".into()));
    }
    let probs = model.predict_probs(images, &Noise::zeros(model))?;
    probs
        .into_iter()
        .map(|p| PredictiveSampleSet::new(vec![p; n]))
        .collect()
}
