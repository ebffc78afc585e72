//! Aleatoric/epistemic decomposition against per-sample loop oracles and
//! eigenvalue checks; Monte-Carlo prediction determinism.

use bvar::network::{BayesianNetwork, InitOptions, NetworkSpec};
use bvar::rng;
use bvar::tensor::{Padding, Tensor};
use bvar::uncertainty::{
    aleatoric, epistemic, normalize_epistemic, predict_dataset, predict_dataset_deterministic,
    predictive_samples, PredictiveSampleSet, SquareMatrix, UncertaintyRecord,
};
use bvar::variational::Prior;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 2;

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // close the sum exactly on the last coordinate
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = 1.0 - head;
    p
}

fn outer_sub(a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// `A` and `Ep` accumulated one sample at a time with nalgebra.
fn loop_oracle(samples: &[Vec<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = samples[0].len();
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| samples.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mut a = DMatrix::zeros(k, k);
    let mut e = DMatrix::zeros(k, k);
    for p in samples {
        let d: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        a += DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(p)) - outer_sub(p, p);
        e += outer_sub(&d, &d);
    }
    (a / n, e / n)
}

fn as_dmatrix(m: &SquareMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.dim(), m.dim(), m.data())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

#[test]
fn matrices_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let samples: Vec<Vec<f64>> = (0..100).map(|_| random_simplex(&mut rng, K)).collect();
        let set = PredictiveSampleSet::new(samples.clone()).unwrap();
        let (a, e) = loop_oracle(&samples);
        assert!((as_dmatrix(&aleatoric(&set)) - a).amax() < 1e-12);
        assert!((as_dmatrix(&epistemic(&set)) - e).amax() < 1e-12);
    }
}

#[test]
fn decomposition_identity_and_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..40);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let set = PredictiveSampleSet::new(samples.clone()).unwrap();
        let a = as_dmatrix(&aleatoric(&set));
        let e = as_dmatrix(&epistemic(&set));
        let mean = set.mean();
        let mut total = DMatrix::zeros(k, k);
        for p in &samples {
            total += DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(p));
        }
        let total = total / n as f64 - outer_sub(mean, mean);
        assert!((&a + &e - total).amax() < 1e-10);
        for m in [&a, &e] {
            assert!((m - m.transpose()).amax() == 0.0);
            assert!(min_eigenvalue(m) >= -1e-10);
        }
    }
}

#[test]
fn binary_aleatoric_trace_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let samples: Vec<Vec<f64>> = (0..10).map(|_| random_simplex(&mut rng, 2)).collect();
        let t = aleatoric(&PredictiveSampleSet::new(samples).unwrap()).trace();
        assert!((0.0..=0.5).contains(&t));
    }
}

fn tiny_model(seed: u64) -> BayesianNetwork {
    let spec = NetworkSpec::conv_stack("tiny", [3, 8, 8], &[2, 2, 2, 2, 2, 2], 4, true, Padding::Same).unwrap();
    BayesianNetwork::new(spec, Prior::default(), InitOptions { rho_init: -2.0, ..InitOptions::default() }, &mut rng::seeded(seed))
        .unwrap()
}

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

#[test]
fn prediction_is_seed_reproducible_and_batch_independent() {
    let model = tiny_model(1);
    let imgs = images(5, 2);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let a = predict_dataset(&model, &refs, 50, 77).unwrap();
    let b = predict_dataset(&model, &refs, 50, 77).unwrap();
    assert_eq!(a, b);
    let bits = |s: &PredictiveSampleSet| s.mean().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (i, img) in imgs.iter().enumerate() {
        let single = predictive_samples(&model, img, 50, 77).unwrap();
        assert_eq!(bits(&single), bits(&a[i]));
    }
    let c = predict_dataset(&model, &refs, 50, 78).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_noise_samples_are_identical() {
    let model = tiny_model(3);
    let imgs = images(2, 4);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    for set in predict_dataset_deterministic(&model, &refs, 6).unwrap() {
        assert!(set.samples().windows(2).all(|w| w[0] == w[1]));
        // the mean of equal values can be off by one ulp
        assert!(epistemic(&set).data().iter().all(|&v| v.abs() < 1e-30));
    }
}

#[test]
fn single_draw_mean_is_the_draw() {
    let model = tiny_model(5);
    let img = &images(1, 6)[0];
    let set = predictive_samples(&model, img, 1, 9).unwrap();
    assert_eq!(set.mean(), &set.samples()[0][..]);
}

fn record(e: f64) -> UncertaintyRecord {
    let set = PredictiveSampleSet::new(vec![vec![1.0, 0.0]]).unwrap();
    let mut r = UncertaintyRecord::from_samples("r", 0, &set);
    r.scalar_epistemic = e;
    r
}

proptest! {
    #[test]
    fn normalized_epistemic_spans_unit_interval(es in prop::collection::vec(0.0f64..0.25, 1..40)) {
        let mut rs: Vec<UncertaintyRecord> = es.iter().map(|&e| record(e)).collect();
        normalize_epistemic(&mut rs).unwrap();
        let min = es.iter().copied().fold(f64::INFINITY, f64::min);
        let max = es.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (r, &e) in rs.iter().zip(&es) {
            prop_assert!((0.0..=1.0).contains(&r.normalized_epistemic));
            if max > min {
                prop_assert!((r.normalized_epistemic - (e - min) / (max - min)).abs() < 1e-12);
            } else {
                prop_assert_eq!(r.normalized_epistemic, 0.0);
            }
        }
    }

    #[test]
    fn sample_set_mean_recomputes(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, 2)).collect();
        let set = PredictiveSampleSet::new(samples.clone()).unwrap();
        for j in 0..2 {
            let m = samples.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            prop_assert!((set.mean()[j] - m).abs() < 1e-12);
        }
    }
}
