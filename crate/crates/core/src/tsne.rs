//! Exact t-SNE: Gaussian input affinities calibrated by perplexity,
//! Student-t output affinities, momentum gradient descent on KL(P‖Q).
//!
//! Matrices are dense, row-major `n × n` (affinities) or `n × dim` (points).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Floor applied to affinities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
pub const PERPLEXITY_TOL: f64 = 1e-3;
pub const MAX_BISECTION: usize = 200;
/// Rows whose distances agree to this relative tolerance count as equidistant.
pub const EQUAL_DISTANCE_RTOL: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Perplexity `2^H` of a probability row, `H` in bits. Zero entries contribute nothing.
pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.exp2()
}

/// Row of `exp(-beta·(d_j - d_min))` normalized, with its entropy in bits.
fn gaussian_row(shifted: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (o, &d) in out.iter_mut().zip(shifted) {
        *o = (-beta * d).exp();
        z += *o;
        weighted += *o * d;
    }
    out.iter_mut().for_each(|o| *o /= z);
    (z.ln() + beta * weighted / z) / std::f64::consts::LN_2
}

/// Conditional affinities `p_{j|i}` and per-point bandwidths `σ_i`.
///
/// Each row is calibrated by bisection on `β = 1/(2σ²)` until its perplexity
/// is within [`PERPLEXITY_TOL`] of the target. A row whose distances are all
/// equal (see [`EQUAL_DISTANCE_RTOL`]) is uniform (`σ = ∞`) for any target.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Input(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(perplexity > 1.0) || perplexity >= n as f64 {
        return Err(Error::Input(format!(
            "perplexity {perplexity} outside (1, {n})"
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("feature rows of different lengths".into()));
    }
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(x, i, perplexity))
        .collect();
    let mut p = vec![0.0; n * n];
    let mut sigmas = Vec::with_capacity(n);
    for (i, row) in rows.into_iter().enumerate() {
        let (row, sigma) = row?;
        p[i * n..(i + 1) * n].copy_from_slice(&row);
        sigmas.push(sigma);
    }
    Ok((p, sigmas))
}

fn calibrate_row(x: &[Vec<f64>], i: usize, perplexity: f64) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let dists: Vec<f64> = (0..n)
        .filter(|&j| j != i)
        .map(|j| sq_dist(&x[i], &x[j]))
        .collect();
    let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = dists.iter().copied().fold(0.0, f64::max);
    if !dmax.is_finite() {
        return Err(Error::Numeric(format!("non-finite distance from point {i}")));
    }
    if dmax == 0.0 {
        return Err(Error::Input(format!(
            "point {i} coincides with every other point; add jitter to the input"
        )));
    }
    let shifted: Vec<f64> = dists.iter().map(|&d| d - dmin).collect();
    let mut row = vec![0.0; n - 1];
    let (beta, _) = if dmax - dmin <= EQUAL_DISTANCE_RTOL * dmax {
        row.fill(1.0 / (n - 1) as f64);
        (0.0, 0)
    } else {
        let target = perplexity.log2();
        let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
        let mut beta = 1.0 / mean;
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut iters = 0;
        loop {
            let h = gaussian_row(&shifted, beta, &mut row);
            if (h.exp2() - perplexity).abs() < PERPLEXITY_TOL {
                break (beta, iters);
            }
            iters += 1;
            if iters >= MAX_BISECTION {
                return Err(Error::Numeric(format!(
                    "perplexity bisection for point {i} did not converge in {MAX_BISECTION} iterations"
                )));
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
    };
    let mut full = Vec::with_capacity(n);
    full.extend_from_slice(&row[..i]);
    full.push(0.0);
    full.extend_from_slice(&row[i..]);
    let sigma = if beta > 0.0 { (0.5 / beta).sqrt() } else { f64::INFINITY };
    Ok((full, sigma))
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2n`, renormalized to sum to exactly 1.
pub fn symmetrize(conditional: &[f64], n: usize) -> Result<Vec<f64>> {
    if conditional.len() != n * n {
        return Err(Error::Dimension(format!(
            "conditional matrix has {} entries, expected {n}²",
            conditional.len()
        )));
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
            }
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("joint affinities sum to zero".into()));
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Student-t kernel `(1 + ‖y_i − y_j‖²)⁻¹` with zero diagonal, and its total.
fn student_kernel(y: &[f64], n: usize, dim: usize) -> (Vec<f64>, f64) {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dim..(i + 1) * dim];
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        1.0 / (1.0 + sq_dist(yi, &y[j * dim..(j + 1) * dim]))
                    }
                })
                .collect()
        })
        .collect();
    let z = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    (rows.concat(), z)
}

/// `q_ij` for points `y` (`n × dim`, row-major).
pub fn low_dim_affinities(y: &[f64], dim: usize) -> Result<Vec<f64>> {
    let n = points(y, dim)?;
    if n < 2 {
        return Err(Error::Input("need at least 2 embedded points".into()));
    }
    let (mut q, z) = student_kernel(y, n, dim);
    q.iter_mut().for_each(|v| *v /= z);
    Ok(q)
}

fn points(y: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !y.len().is_multiple_of(dim) {
        return Err(Error::Dimension(format!("{} coordinates do not form {dim}-d points", y.len())));
    }
    Ok(y.len() / dim)
}

/// `Σ p_ij ln(p_ij / q_ij)` with both floored at [`LOG_FLOOR`] inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.max(LOG_FLOOR) / qv.max(LOG_FLOOR)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(y_i − y_j)(1 + ‖y_i − y_j‖²)⁻¹`, plus `Q`.
pub fn gradient(p: &[f64], y: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = points(y, dim)?;
    if p.len() != n * n {
        return Err(Error::Dimension("affinity matrix does not match point count".into()));
    }
    let (num, z) = student_kernel(y, n, dim);
    let grad: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut g = vec![0.0; dim];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let c = 4.0 * (p[i * n + j] - w / z) * w;
                for k in 0..dim {
                    g[k] += c * (y[i * dim + k] - y[j * dim + k]);
                }
            }
            g
        })
        .collect();
    let q = num.iter().map(|v| v / z).collect();
    Ok((grad, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneParams {
    pub dim: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            dim: 3,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            init_std: 1e-2,
            min_gain: 0.01,
            seed: 0,
        }
    }
}

impl TsneParams {
    /// Perplexity actually used for `n` points: at most `(n − 1)/3`.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0)
    }

    /// Step size actually used for `n` points: at most `n/4`. Per-point steps
    /// scale like `learning_rate / n`, and beyond this cap small embeddings
    /// oscillate once their KL approaches zero.
    pub fn effective_learning_rate(&self, n: usize) -> f64 {
        self.learning_rate.min(n as f64 / 4.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub dim: usize,
    /// `n × dim`, row-major.
    pub y: Vec<f64>,
    /// `KL(P‖Q)` before each iteration, always against the unexaggerated `P`.
    pub kl_trace: Vec<f64>,
}

impl Embedding {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Gradient descent from `y0` with per-coordinate adaptive gains.
pub fn optimize(p: &[f64], y0: Vec<f64>, params: &TsneParams) -> Result<Embedding> {
    let dim = params.dim;
    let n = points(&y0, dim)?;
    if p.len() != n * n {
        return Err(Error::Dimension("affinity matrix does not match point count".into()));
    }
    let exaggerated: Vec<f64> = p.iter().map(|v| v * params.exaggeration).collect();
    let learning_rate = params.effective_learning_rate(n);
    let mut y = y0;
    let mut update = vec![0.0; y.len()];
    let mut gains = vec![1.0; y.len()];
    let mut kl_trace = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let target = if it < params.exaggeration_iters { &exaggerated } else { p };
        let (grad, q) = gradient(target, &y, dim)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite t-SNE gradient at iteration {it}")));
        }
        kl_trace.push(kl_divergence(p, &q));
        let momentum = if it < params.momentum_switch {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        for k in 0..y.len() {
            let gain: f64 = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                gains[k] * 0.8
            };
            gains[k] = gain.max(params.min_gain);
            update[k] = momentum * update[k] - learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
    }
    Ok(Embedding { dim, y, kl_trace })
}

/// Initial points `y_i ~ N(0, init_std² I)` from the seed.
pub fn initial_points(n: usize, params: &TsneParams) -> Vec<f64> {
    let mut r = rng::stream(params.seed, 0x7503);
    rng::normals(&mut r, n * params.dim)
        .into_iter()
        .map(|v| v * params.init_std)
        .collect()
}

pub fn tsne_fit(x: &[Vec<f64>], params: &TsneParams) -> Result<Embedding> {
    let n = x.len();
    if n < 5 {
        return Err(Error::Input(format!("t-SNE needs at least 5 points, got {n}")));
    }
    let (cond, _) = conditional_affinities(x, params.effective_perplexity(n))?;
    let p = symmetrize(&cond, n)?;
    optimize(&p, initial_points(n, params), params)
}

/// Rows read from a feature CSV. Columns named `id`, `label` and `E` are
/// metadata; every other column is a feature.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub normalized_epistemic: Vec<Option<f64>>,
}

pub fn parse_feature_csv(text: &str) -> Result<FeatureTable> {
    let bad = |msg: String| Error::Input(format!("feature CSV: {msg}"));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, label_col, e_col) = (col("id"), col("label"), col("E"));
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| ![id_col, label_col, e_col].contains(&Some(*c)))
        .collect();
    if feature_cols.is_empty() {
        return Err(bad("no feature columns".into()));
    }
    let mut t = FeatureTable::default();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let parse = |c: usize| {
            field(c)
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", row_idx + 1, field(c))))
        };
        t.ids.push(id_col.map_or_else(|| row_idx.to_string(), |c| field(c).to_string()));
        t.features
            .push(feature_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?);
        t.labels.push(match label_col {
            Some(c) if !field(c).is_empty() => Some(
                field(c)
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad label `{}`", row_idx + 1, field(c))))?,
            ),
            _ => None,
        });
        t.normalized_epistemic.push(match e_col {
            Some(c) if !field(c).is_empty() => Some(parse(c)?),
            _ => None,
        });
    }
    Ok(t)
}
