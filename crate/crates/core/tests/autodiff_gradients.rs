//! Reverse-mode gradients against central finite differences, op by op and
//! through whole variational networks.

use bvar::autodiff::{Graph, NodeId};
use bvar::network::{BayesianNetwork, InitOptions, LayerSpec, NetworkSpec};
use bvar::tensor::{Padding, PoolMode, Tensor};
use bvar::training::{vfe_loss, VfeOptions};
use bvar::variational::Prior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero derivatives.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares the tape gradient of `f(params)` with central differences.
fn check<F>(params: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &ids);
        (g, ids, out)
    };
    let (g, ids, out) = eval(params);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(ids[pi]).data().to_vec();
        for k in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += H;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= H;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k], fd));
        }
    }
    worst
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], 0.5, 2.0);
    let b = random(&mut rng, &[3, 4], 0.5, 2.0);
    let err = check(&[a, b], |g, p| {
        let s = g.add(p[0], p[1]).unwrap();
        let d = g.sub(s, p[1]).unwrap();
        let m = g.mul(d, p[1]).unwrap();
        let q = g.div(m, p[0]).unwrap();
        let l = g.log(q);
        let e = g.exp(l);
        let sp = g.softplus(e);
        let sq = g.square(sp);
        let sc = g.scale(sq, 0.3);
        g.mean(sc)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[3, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 5], -1.0, 1.0);
    let b = random(&mut rng, &[4], -1.0, 1.0);
    let m = random(&mut rng, &[4, 2], -1.0, 1.0);
    let err = check(&[x, w, b, m], |g, p| {
        let y = g.linear(p[0], p[1]).unwrap();
        let y = g.bias_add(y, p[2]).unwrap();
        let y = g.matmul(y, p[3]).unwrap();
        let t = g.transpose(y).unwrap();
        let s = g.softmax(t).unwrap();
        let s = g.square(s);
        g.sum(s)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn conv_pool_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (padding, stride) in [(Padding::Same, 1), (Padding::Valid, 1), (Padding::Valid, 2)] {
        let x = random(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
        let k = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = random(&mut rng, &[3], -0.5, 0.5);
        let err = check(&[x, k, b], |g, p| {
            let y = g.conv2d(p[0], p[1], stride, padding).unwrap();
            let y = g.bias_add(y, p[2]).unwrap();
            let y = g.relu(y);
            let y = g.maxpool2d(y, PoolMode::Floor).unwrap();
            let y = g.square(y);
            g.sum(y)
        });
        assert!(err < REL_TOL, "{padding:?} stride {stride}: {err}");
    }
}

#[test]
fn nll_and_log_densities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&mut rng, &[5, 3], -3.0, 3.0);
    let err = check(&[z], |g, p| g.nll_loss(p[0], &[0, 2, 1, 1, 0]).unwrap());
    assert!(err < REL_TOL, "{err}");

    let w = random(&mut rng, &[6], -1.0, 1.0);
    let mu = random(&mut rng, &[6], -1.0, 1.0);
    let sigma = random(&mut rng, &[6], 0.3, 1.5);
    let err = check(&[w, mu, sigma], |g, p| g.gaussian_log_prob(p[0], p[1], p[2]).unwrap());
    assert!(err < REL_TOL, "{err}");

    for prior in [Prior::default(), Prior::default_mixture()] {
        let w = random(&mut rng, &[8], -0.5, 0.5);
        let err = check(&[w], |g, p| g.prior_log_prob(p[0], prior));
        assert!(err < REL_TOL, "{prior:?}: {err}");
    }
}

#[test]
fn scale_by_scalar_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4], -1.0, 1.0);
    let s = Tensor::scalar(0.7);
    let err = check(&[x, s], |g, p| {
        let y = g.scale_by(p[0], p[1]).unwrap();
        let y = g.relu(y);
        g.sum(y)
    });
    assert!(err < REL_TOL, "{err}");
}

/// Small conv or dense stacks with at most three parameterized layers.
fn small_spec(rng: &mut ChaCha8Rng, variant: usize) -> NetworkSpec {
    let c = rng.random_range(1..3);
    let hw = rng.random_range(4..7);
    let f = rng.random_range(2..4);
    let layers = match variant % 3 {
        0 => {
            let pooled = f * (hw / 2) * (hw / 2);
            vec![
                LayerSpec::VariationalConv {
                    in_channels: c,
                    out_channels: f,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    size: 2,
                    stride: 2,
                    mode: PoolMode::Floor,
                },
                LayerSpec::VariationalDense {
                    in_features: pooled,
                    out_features: 2,
                },
                LayerSpec::Softmax,
            ]
        }
        1 => {
            let hidden = rng.random_range(3..6);
            vec![
                LayerSpec::VariationalDense {
                    in_features: c * hw * hw,
                    out_features: hidden,
                },
                LayerSpec::AdaptiveRelu,
                LayerSpec::VariationalDense {
                    in_features: hidden,
                    out_features: 2,
                },
                LayerSpec::Softmax,
            ]
        }
        _ => {
            let out = hw - 2;
            vec![
                LayerSpec::VariationalConv {
                    in_channels: c,
                    out_channels: f,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::Relu,
                LayerSpec::VariationalDense {
                    in_features: f * out * out,
                    out_features: 3,
                },
                LayerSpec::AdaptiveRelu,
                LayerSpec::VariationalDense {
                    in_features: 3,
                    out_features: 2,
                },
                LayerSpec::Softmax,
            ]
        }
    };
    NetworkSpec {
        name: format!("small{variant}"),
        input: [c, hw, hw],
        layers,
    }
}

#[test]
fn vfe_gradient_through_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for variant in 0..6 {
        let spec = small_spec(&mut rng, variant);
        let prior = if variant % 2 == 0 { Prior::default() } else { Prior::default_mixture() };
        let init = InitOptions {
            rho_init: -2.0,
            ..InitOptions::default()
        };
        let mut model = BayesianNetwork::new(spec.clone(), prior, init, &mut bvar::rng::seeded(variant as u64)).unwrap();
        // spread rho so sigma varies per weight
        for s in model.param_slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let images: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &spec.input, 0.0, 1.0)).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let labels = [0, 1, 1];
        let opts = VfeOptions {
            kl_weight: 0.1,
            mc_samples: 2,
        };
        let loss = |m: &BayesianNetwork| {
            vfe_loss(m, &refs, &labels, opts, &mut bvar::rng::seeded(99)).unwrap()
        };
        let out = loss(&model);
        let analytic = out.gradients.concat();
        let base = model.flat_params();
        assert!(base.len() <= 500, "{} parameters", base.len());
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += H;
            model.set_flat_params(&p).unwrap();
            let up = loss(&model).loss;
            p[k] -= 2.0 * H;
            model.set_flat_params(&p).unwrap();
            let down = loss(&model).loss;
            worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * H)));
        }
        model.set_flat_params(&base).unwrap();
        assert!(worst < REL_TOL, "variant {variant}: {worst}");
    }
}

#[test]
fn unused_parameter_gets_zero() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.param(Tensor::scalar(3.0));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(b).data(), &[0.0]);
    assert_eq!(grads.wrt(a).data(), &[1.0, 1.0]);
}
