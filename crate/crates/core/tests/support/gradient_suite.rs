//! Central-difference checks of every differentiable primitive and of a
//! small end-to-end model. Each primitive runs on 20 instances with
//! pairwise distinct input shapes and random values. Every check panics on
//! failure.

use std::collections::BTreeSet;

use densecxr::densenet::{transition_forward, Model, ModelConfig, Mode};
use densecxr::gradcheck::{finite_difference_check, GradCheckReport};
use densecxr::loss::{self, ClassWeights};
use densecxr::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps the test free of extra distributions
        let u: f64 = r.random_range(1e-12..1.0);
        let v: f64 = r.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

/// Values bounded away from zero, so no probe crosses a ReLU kink.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.5);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `Σ r_i·y_i` with a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Instance `i` as a distinct pair in `1..=4 × 1..=5`.
fn pair(i: usize) -> (usize, usize) {
    (1 + i / 5, 1 + i % 5)
}

fn assert_passes(what: &str, instance: usize, report: &GradCheckReport) {
    assert!(
        report.passed,
        "{what} instance {instance}: max relative error {:.3e}; failing {:?}",
        report.max_rel_error(),
        report.failing().collect::<Vec<_>>()
    );
}

/// Runs `INSTANCES` checks; `make(rng, i)` returns the parameters and the
/// loss builder of instance `i`. The first parameters' shapes must not repeat.
fn check_all<F>(what: &str, tag: u64, make: impl Fn(&mut ChaCha8Rng, usize) -> (Vec<Tensor<f64>>, F))
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_all_at(what, tag, TOL, make)
}

fn check_all_at<F>(what: &str, tag: u64, tol: f64, make: impl Fn(&mut ChaCha8Rng, usize) -> (Vec<Tensor<f64>>, F))
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut shapes = BTreeSet::new();
    for i in 0..INSTANCES {
        let mut r = ChaCha8Rng::seed_from_u64(tag * 1000 + i as u64);
        let (params, f) = make(&mut r, i);
        shapes.insert(params[0].shape().to_vec());
        let report = finite_difference_check(f, &params, STEP, tol).unwrap();
        assert_passes(what, i, &report);
    }
    assert_eq!(shapes.len(), INSTANCES, "{what}: instance shapes repeat");
}

pub fn conv2d_input_kernel_and_bias() {
    check_all("conv2d", 1, |r, i| {
        let (c_in, extra) = pair(i);
        let n = r.random_range(1..=2);
        let c_out = r.random_range(1..=3);
        let k = [1, 2, 3][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let (h, w) = (2 + extra, 3 + r.random_range(0..=2));
        let x = normal(r, &[n, c_in, h, w]);
        let kern = normal(r, &[c_out, c_in, k, k]);
        let bias = normal(r, &[c_out]);
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        let proj = normal(r, &[n, c_out, h_out, w_out]);
        // x leads, but its shape depends on random n and w too; key on c_in × h
        let tag = Tensor::zeros(&[c_in, h]);
        (vec![tag, x, kern, bias], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[1], v[2], Some(v[3]), stride, pad)?;
            project(g, y, &proj)
        })
    });
}

pub fn pointwise_conv() {
    check_all("1x1 conv", 2, |r, i| {
        let (c_in, s) = pair(i);
        let c_out = r.random_range(1..=4);
        let x = normal(r, &[2, c_in, s + 1, 3]);
        let kern = normal(r, &[c_out, c_in, 1, 1]);
        let proj = normal(r, &[2, c_out, s + 1, 3]);
        (vec![x, kern], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            project(g, y, &proj)
        })
    });
}

pub fn average_pool_2x2() {
    check_all("avg_pool2d", 3, |r, i| {
        let (a, b) = pair(i);
        let x = normal(r, &[2, 2, 2 * a, 2 * b]);
        let proj = normal(r, &[2, 2, a, b]);
        (vec![x], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.avg_pool2d(v[0], 2)?;
            project(g, y, &proj)
        })
    });
}

pub fn global_average_pool() {
    check_all("global_avg_pool", 4, |r, i| {
        let (a, b) = pair(i);
        let x = normal(r, &[2, 3, a, b]);
        let proj = normal(r, &[2, 3]);
        (vec![x], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, &proj)
        })
    });
}

pub fn relu() {
    check_all("relu", 5, |r, i| {
        let (a, b) = pair(i);
        let x = off_zero(r, &[a, b, 3]);
        let proj = normal(r, &[a, b, 3]);
        (vec![x], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0])?;
            project(g, y, &proj)
        })
    });
}

pub fn sigmoid() {
    check_all("sigmoid", 6, |r, i| {
        let (a, b) = pair(i);
        let x = normal(r, &[a, b]);
        let proj = normal(r, &[a, b]);
        (vec![x], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.sigmoid(v[0])?;
            project(g, y, &proj)
        })
    });
}

pub fn linear_layer() {
    check_all("linear", 7, |r, i| {
        let (n, f) = pair(i);
        let k = r.random_range(1..=4);
        let x = normal(r, &[n, f]);
        let w = normal(r, &[k, f]);
        let b = normal(r, &[k]);
        let proj = normal(r, &[n, k]);
        (vec![x, w, b], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, &proj)
        })
    });
}

pub fn channel_concat() {
    check_all("concat", 8, |r, i| {
        let (ca, cb) = pair(i);
        let a = normal(r, &[2, ca, 3, cb]);
        let b = normal(r, &[2, cb, 3, cb]);
        let proj = normal(r, &[2, ca + cb, 3, cb]);
        (vec![a, b], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y, &proj)
        })
    });
}

pub fn batch_norm_training_mode() {
    check_all("batch_norm_train", 9, |r, i| {
        let (c, s) = pair(i);
        let x = normal(r, &[2, c, s + 1, 2]);
        let gamma = normal(r, &[c]);
        let beta = normal(r, &[c]);
        let proj = normal(r, &[2, c, s + 1, 2]);
        (vec![x, gamma, beta], move |g: &mut Graph<f64>, v: &[Var]| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, &proj)
        })
    });
}

pub fn batch_norm_evaluation_mode() {
    check_all("batch_norm_eval", 10, |r, i| {
        let (c, s) = pair(i);
        let x = normal(r, &[2, c, s, 2]);
        let gamma = normal(r, &[c]);
        let beta = normal(r, &[c]);
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
        let proj = normal(r, &[2, c, s, 2]);
        (vec![x, gamma, beta], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(g, y, &proj)
        })
    });
}

pub fn dropout_with_fixed_mask() {
    check_all("dropout", 11, |r, i| {
        let (a, b) = pair(i);
        let x = normal(r, &[a, b, 2]);
        let proj = normal(r, &[a, b, 2]);
        let seed: u64 = r.random();
        (vec![x], move |g: &mut Graph<f64>, v: &[Var]| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(v[0], 0.3, &mut mask_rng)?;
            project(g, y, &proj)
        })
    });
}

pub fn arithmetic_and_reductions() {
    check_all("add/mul/scale/mean", 12, |r, i| {
        let (a, b) = pair(i);
        let x = normal(r, &[a, b]);
        let y = normal(r, &[a, b]);
        let factor = r.random_range(-2.0..2.0);
        (vec![x, y], move |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.add(v[0], v[1])?;
            let p = g.mul(s, v[0])?;
            let q = g.scale(p, factor)?;
            g.mean(q)
        })
    });
}

/// The loss is smooth in the probabilities, so the bar is tighter here.
pub fn weighted_cross_entropy() {
    check_all_at("weighted_bce", 13, 1e-6, |r, i| {
        let (n, k) = pair(i);
        let probs = Tensor::from_fn(&[n, k], |_| r.random_range(0.05..0.95));
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..k).map(|_| u8::from(r.random::<bool>())).collect()).collect();
        let w_pos: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        let weights = ClassWeights {
            w_neg: w_pos.iter().map(|w| 1.0 - w).collect(),
            w_pos,
            degenerate: vec![],
        };
        (vec![probs], move |g: &mut Graph<f64>, v: &[Var]| {
            loss::weighted_bce(g, v[0], &labels, &weights, loss::DEFAULT_CLAMP_EPS)
        })
    });
}

pub fn transition_layer() {
    check_all("transition", 14, |r, i| {
        let (c, s) = pair(i);
        let c_out = r.random_range(1..=3);
        let x = normal(r, &[2, c, 2 * s, 4]);
        let k = normal(r, &[c_out, c, 1, 1]);
        let proj = normal(r, &[2, c_out, s, 2]);
        (vec![x, k], move |g: &mut Graph<f64>, v: &[Var]| {
            let y = transition_forward(g, v[0], v[1])?;
            project(g, y, &proj)
        })
    });
}

fn mini_config(size: usize) -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        input_size: (size, size),
        initial_channels: 4,
        growth_rate: 4,
        block_layout: vec![2, 2],
        num_classes: 3,
        dropout_rate: 0.0,
        use_batch_norm: true,
    }
}

/// Model parameters with batch-norm scales and shifts moved off 1 and 0.
/// At initialization, with β = 0 and bias-free convolutions, pixels whose
/// inputs are all rectified away land exactly on the next ReLU's kink,
/// where a central difference sees half a slope.
fn perturbed_params(model: &Model<f64>, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    model
        .params()
        .iter()
        .map(|p| {
            let base = if p.name.ends_with("gamma") {
                1.0
            } else if p.name.ends_with("beta") {
                0.0
            } else {
                return p.value.clone();
            };
            Tensor::from_fn(p.value.shape(), |_| base + r.random_range(-0.3..0.3))
        })
        .collect()
}

pub fn dense_block() {
    check_all("dense block", 15, |r, i| {
        let model = Model::<f64>::build(mini_config(8), r.random()).unwrap();
        let params = perturbed_params(&model, r);
        let (n, s) = pair(i);
        let x = normal(r, &[n + 1, 4, s + 1, 3]);
        let proj = normal(r, &[n + 1, 12, s + 1, 3]);
        let mut all = vec![x];
        all.extend(params);
        (all, move |g: &mut Graph<f64>, v: &[Var]| {
            let (y, _) = model.dense_block_forward(g, 0, v[0], &v[1..], true)?;
            project(g, y, &proj)
        })
    });
}

/// Conditioning limits for end-to-end instances, checked on the base point
/// before any probing. The central difference at h = 1e-5 cannot resolve a
/// loss change below one ulp of the loss (about 5e-12 in the slope), so an
/// entry under ~5e-8 fails the relative test however correct the backward
/// pass is. A ReLU input within a few steps of zero gets crossed by a probe
/// and the difference quotient straddles the kink.
const RESOLVABLE: f64 = 1e-7;
const KINK_MARGIN: f64 = 1e-4;

/// `(smallest |gradient entry|, smallest |ReLU input|)` at the base point.
fn conditioning(f: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, params: &[Tensor<f64>]) -> (f64, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = vars
        .iter()
        .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
        .fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let kink = g.relu_inputs().flat_map(|t| t.data()).fold(f64::INFINITY, |m, x| m.min(x.abs()));
    (grad, kink)
}

/// Weighted BCE on a full training-mode forward pass, every parameter
/// checked. Ill-conditioned draws are redrawn before any numeric probing.
pub fn end_to_end_mini_model() {
    let weights = ClassWeights {
        w_pos: vec![0.8, 0.6, 0.5],
        w_neg: vec![0.2, 0.4, 0.5],
        degenerate: vec![],
    };
    let mut r = ChaCha8Rng::seed_from_u64(16_000);
    let mut checked = 0;
    let mut redrawn = 0;
    while checked < INSTANCES {
        let n = 2 + checked % 2;
        let model = Model::<f64>::build(mini_config(8), r.random()).unwrap();
        let params = perturbed_params(&model, &mut r);
        let batch = normal(&mut r, &[n, 1, 8, 8]);
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..3).map(|_| u8::from(r.random::<bool>())).collect()).collect();
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let fp = model.forward_with_params(g, &batch, v.to_vec(), Mode::Train { rng: &mut unused })?;
            loss::weighted_bce(g, fp.probabilities, &labels, &weights, loss::DEFAULT_CLAMP_EPS)
        };
        let (grad, kink) = conditioning(&f, &params);
        if grad < RESOLVABLE || kink < KINK_MARGIN {
            redrawn += 1;
            continue;
        }
        let report = finite_difference_check(f, &params, STEP, TOL).unwrap();
        assert_passes("mini model", checked, &report);
        assert_eq!(report.params.len(), model.params().len());
        checked += 1;
    }
    assert!(redrawn <= 3 * INSTANCES, "{redrawn} instances redrawn");
    eprintln!("end-to-end: {checked} instances checked, {redrawn} redrawn");
}

/// Every check of the suite, by name, for the acceptance run.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("conv2d_input_kernel_and_bias", conv2d_input_kernel_and_bias),
    ("pointwise_conv", pointwise_conv),
    ("average_pool_2x2", average_pool_2x2),
    ("global_average_pool", global_average_pool),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("linear_layer", linear_layer),
    ("channel_concat", channel_concat),
    ("batch_norm_training_mode", batch_norm_training_mode),
    ("batch_norm_evaluation_mode", batch_norm_evaluation_mode),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("arithmetic_and_reductions", arithmetic_and_reductions),
    ("weighted_cross_entropy", weighted_cross_entropy),
    ("transition_layer", transition_layer),
    ("dense_block", dense_block),
    ("end_to_end_mini_model", end_to_end_mini_model),
];
