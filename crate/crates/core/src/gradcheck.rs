//! Central finite-difference checks of every analytic gradient.
//!
//! Errors are normwise per gradient tensor, `|a - n| / max(|a|, |n|)` in the
//! Euclidean norm, so that entries that are nearly zero do not drown in the
//! round-off of the difference quotient.

use serde::Serialize;

use crate::loss::{
    holistic, jaccard_distance_grad, soft_jaccard, wce_forward, wce_grad_logits, HolisticConfig,
    Reduction, WeightFamily, WeightSpec,
};
use crate::model::layers::{
    concat_backward, concat_forward, conv2d_backward, conv2d_forward, deconv2x2s2_backward,
    deconv2x2s2_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
};
use crate::model::{he_init, LayerParams, UNet, UNetConfig};
use crate::{Result, SeededRng, Tensor};

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0, |a, x| a + x * x).sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * STEP);
    }
    grad
}

fn err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    relative_error(analytic.data(), numeric.data())
}

fn random_mask(rng: &mut SeededRng, shape: impl Into<Vec<usize>>) -> Tensor {
    rng.uniform_tensor(shape, 0.0, 1.0).map(|u| if u < 0.3 { 1.0 } else { 0.0 })
}

/// Normal values pushed at least 0.05 away from zero, clear of the ReLU kink.
fn off_kink(rng: &mut SeededRng, shape: impl Into<Vec<usize>>) -> Tensor {
    rng.normal_tensor(shape, 0.0, 1.0).map(|v| v.signum() * (0.05 + v.abs()))
}

fn params(rng: &mut SeededRng, out_ch: usize, in_ch: usize, k: usize) -> LayerParams {
    LayerParams {
        kernels: rng.normal_tensor([out_ch, in_ch, k, k], 0.0, 0.5),
        biases: rng.normal_tensor([out_ch], 0.0, 0.5),
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn report(name: &'static str, instances: usize, tolerance: f64, errs: impl Iterator<Item = Result<f64>>) -> Result<SuiteReport> {
    let mut max_rel_err = 0.0f64;
    for e in errs {
        let e = e?;
        max_rel_err = if e.is_nan() { f64::INFINITY } else { max_rel_err.max(e) };
    }
    Ok(SuiteReport {
        name,
        instances,
        max_rel_err,
        tolerance,
    })
}

pub fn check_wce(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "wce_grad_logits",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let shape = [rng.int_range(1, 6), rng.int_range(1, 6)];
            let z = rng.normal_tensor(shape, 0.0, 3.0);
            let y = random_mask(rng, shape);
            let q = rng.uniform_range(0.1, 10.0);
            let red = if rng.uniform() < 0.5 { Reduction::Sum } else { Reduction::MeanPerPixel };
            let analytic = wce_grad_logits(&z, &y, q, red)?;
            let numeric = numeric_grad(&z, |z| wce_forward(z, &y, q, red).expect("valid instance"));
            Ok(err(&analytic, &numeric))
        }),
    )
}

pub fn check_jaccard(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "jaccard_distance_grad",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let shape = [rng.int_range(1, 6), rng.int_range(1, 6)];
            let p = rng.uniform_tensor(shape, 0.01, 0.99);
            let y = random_mask(rng, shape);
            let lambda = rng.uniform_range(0.1, 2.0);
            let analytic = jaccard_distance_grad(&p, &y, lambda)?;
            let numeric = numeric_grad(&p, |p| 1.0 - soft_jaccard(p, &y, lambda).expect("valid instance"));
            Ok(err(&analytic, &numeric))
        }),
    )
}

/// Input and parameter gradients of a parameterized layer under `L = <r, f(x)>`.
fn check_param_layer(
    x: &Tensor,
    p: &LayerParams,
    forward: fn(&Tensor, &LayerParams) -> Result<Tensor>,
    backward: fn(&Tensor, &LayerParams, &Tensor) -> Result<(Tensor, LayerParams)>,
    rng: &mut SeededRng,
) -> Result<f64> {
    let out = forward(x, p)?;
    let r = rng.normal_tensor(out.shape().to_vec(), 0.0, 1.0);
    let (gx, gp) = backward(x, p, &r)?;
    let loss = |x: &Tensor, p: &LayerParams| dot(&r, &forward(x, p).expect("valid instance"));
    let nx = numeric_grad(x, |x| loss(x, p));
    let nk = numeric_grad(&p.kernels, |k| {
        loss(x, &LayerParams { kernels: k.clone(), biases: p.biases.clone() })
    });
    let nb = numeric_grad(&p.biases, |b| {
        loss(x, &LayerParams { kernels: p.kernels.clone(), biases: b.clone() })
    });
    Ok(err(&gx, &nx).max(err(&gp.kernels, &nk)).max(err(&gp.biases, &nb)))
}

pub fn check_conv(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "conv2d",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let (c, co) = (rng.int_range(1, 3), rng.int_range(1, 3));
            let (h, w) = (rng.int_range(1, 6), rng.int_range(1, 6));
            let k = if rng.uniform() < 0.8 { 3 } else { 1 };
            let x = rng.normal_tensor([c, h, w], 0.0, 1.0);
            let p = params(rng, co, c, k);
            check_param_layer(&x, &p, conv2d_forward, conv2d_backward, rng)
        }),
    )
}

pub fn check_deconv(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "deconv2x2s2",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let (c, co) = (rng.int_range(1, 3), rng.int_range(1, 3));
            let (h, w) = (rng.int_range(1, 4), rng.int_range(1, 4));
            let x = rng.normal_tensor([c, h, w], 0.0, 1.0);
            let p = params(rng, co, c, 2);
            check_param_layer(&x, &p, deconv2x2s2_forward, deconv2x2s2_backward, rng)
        }),
    )
}

pub fn check_relu(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "relu",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let shape = [rng.int_range(1, 3), rng.int_range(1, 5), rng.int_range(1, 5)];
            let x = off_kink(rng, shape);
            let r = rng.normal_tensor(x.shape().to_vec(), 0.0, 1.0);
            let analytic = relu_backward(&relu_forward(&x), &r)?;
            let numeric = numeric_grad(&x, |x| dot(&r, &relu_forward(x)));
            Ok(err(&analytic, &numeric))
        }),
    )
}

pub fn check_maxpool(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "maxpool2x2",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let shape = [rng.int_range(1, 3), 2 * rng.int_range(1, 3), 2 * rng.int_range(1, 3)];
            // Distinct values at least 0.01 apart so no window is near a tie.
            let n: usize = shape.iter().product();
            let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            rng.shuffle(&mut values);
            let x = Tensor::new(shape, values)?;
            let pooled = maxpool2x2_forward(&x)?;
            let r = rng.normal_tensor(pooled.output.shape().to_vec(), 0.0, 1.0);
            let analytic = maxpool2x2_backward(x.shape(), &pooled.argmax, &r)?;
            let numeric = numeric_grad(&x, |x| dot(&r, &maxpool2x2_forward(x).expect("valid").output));
            Ok(err(&analytic, &numeric))
        }),
    )
}

pub fn check_concat(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    report(
        "concat",
        instances,
        LAYER_TOLERANCE,
        (0..instances).map(|_| {
            let (h, w) = (rng.int_range(1, 4), rng.int_range(1, 4));
            let (ca, cb) = (rng.int_range(1, 3), rng.int_range(1, 3));
            let a = rng.normal_tensor([ca, h, w], 0.0, 1.0);
            let b = rng.normal_tensor([cb, h, w], 0.0, 1.0);
            let r = rng.normal_tensor([a.shape()[0] + b.shape()[0], h, w], 0.0, 1.0);
            let (ga, gb) = concat_backward(&r, a.shape()[0])?;
            let na = numeric_grad(&a, |a| dot(&r, &concat_forward(a, &b).expect("valid")));
            let nb = numeric_grad(&b, |b| dot(&r, &concat_forward(&a, b).expect("valid")));
            Ok(err(&ga, &na).max(err(&gb, &nb)))
        }),
    )
}

/// Whole depth-1, single-channel network under the holistic loss, 4x4 input.
///
/// Instances where a `STEP` perturbation of any parameter flips a ReLU or a
/// max-pool choice are redrawn: the loss has a kink there and central
/// differences are meaningless. The test looks only at forward passes.
pub fn check_network(instances: usize, rng: &mut SeededRng) -> Result<SuiteReport> {
    let cfg = UNetConfig {
        depth: 1,
        base_channels: 1,
        input_channels: 1,
    };
    let spec = WeightSpec::smoothed(WeightFamily::exp10(0.75));
    let hcfg = HolisticConfig { a: 1.0, b: 1.0, lambda: 1.0 };
    let mut errs = Vec::with_capacity(instances);
    let mut attempts = 0;
    while errs.len() < instances {
        attempts += 1;
        if attempts > 20 * instances.max(1) {
            return Err(crate::Error::Numerical(
                "could not draw kink-free network instances".into(),
            ));
        }
        let mut net = he_init(cfg, rng)?;
        for p in net.params_mut() {
            p.biases = rng.normal_tensor(p.biases.shape().to_vec(), 0.0, 0.1);
        }
        let images = rng.uniform_tensor([1, 1, 4, 4], 0.0, 1.0);
        let mask = random_mask(rng, [1, 4, 4]);
        let logits = net.forward(&images)?;
        let loss = holistic(&logits, &mask, &spec, &hcfg, Reduction::Sum)?;
        let grads = net.backward(&loss.grad_logits)?;

        let base = net.params().to_vec();
        let pattern = net.activation_pattern(&images)?;
        let mut smooth = true;
        let mut objective = |params: Vec<LayerParams>| {
            let net = UNet::from_params(cfg, params).expect("same layout");
            smooth &= net.activation_pattern(&images).expect("valid input") == pattern;
            let logits = net.predict(&images).expect("valid input");
            holistic(&logits, &mask, &spec, &hcfg, Reduction::Sum)
                .expect("finite loss")
                .value
        };
        let mut worst = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            let nk = numeric_grad(&base[i].kernels, |k| {
                let mut p = base.clone();
                p[i].kernels = k.clone();
                objective(p)
            });
            let nb = numeric_grad(&base[i].biases, |b| {
                let mut p = base.clone();
                p[i].biases = b.clone();
                objective(p)
            });
            worst = worst.max(err(&g.kernels, &nk)).max(err(&g.biases, &nb));
        }
        if smooth {
            errs.push(Ok(worst));
        }
    }
    report("unet_depth1", instances, NETWORK_TOLERANCE, errs.into_iter())
}

/// Every suite, each on its own stream of `seed`.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let root = SeededRng::new(seed);
    let suites: [fn(usize, &mut SeededRng) -> Result<SuiteReport>; 8] = [
        check_wce,
        check_jaccard,
        check_conv,
        check_relu,
        check_maxpool,
        check_deconv,
        check_concat,
        check_network,
    ];
    suites
        .iter()
        .enumerate()
        .map(|(i, suite)| suite(instances, &mut root.derive(i as u64)))
        .collect()
}
