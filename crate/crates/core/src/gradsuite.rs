//! The finite-difference suite behind `lesionforge gradcheck`.
//!
//! Every differentiable op, the conv classifier stack, the softmax head and
//! the full dual encoder are checked in 64-bit on several seeded inputs.
//! Single ops are reduced to a scalar through a random linear probe
//! `L = Σ r·y`, so the analytic side is the op's backward pass fed `dy = r`.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::nncore::gradcheck::{grad_check, spread_coords, GradCheckReport};
use crate::nncore::{
    concat_channels, conv2d, conv2d_backward, dense, dense_backward, depthwise_conv2d,
    depthwise_conv2d_backward, dice_bce_loss, dice_bce_with_logits, global_avg_pool,
    global_avg_pool_backward, max_pool2d, max_pool2d_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax, softmax_cross_entropy_grad, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward, weighted_cross_entropy, DiceBce, Module, Padding, Tensor,
};
use crate::segmentation::{DualEncoder, DualEncoderConfig};
use crate::{rng, Result};

/// Tolerance for single ops and small stacks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed dual encoder.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Parameter coordinates sampled from the dual encoder per seed.
const NETWORK_COORDS: usize = 300;

/// Names of the checks, in run order.
pub const CHECKS: [&str; 15] = [
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "relu",
    "sigmoid",
    "max_pool2d",
    "global_avg_pool",
    "upsample_nearest2x",
    "concat_channels",
    "softmax_cross_entropy",
    "dice_bce",
    "dice_bce_with_logits",
    "conv_classifier_stack",
    "softmax_head",
    "dual_encoder",
];

#[derive(Clone, Debug)]
pub struct GradSuiteConfig {
    pub seeds: Vec<u64>,
    /// Check whose analytic gradient gets corrupted, as a negative control.
    pub inject_fault: Option<String>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            seeds: (0..5).collect(),
            inject_fault: None,
        }
    }
}

/// Worst result of one check over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub results: Vec<OpResult>,
    pub seconds: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// One `op max_rel_err tolerance PASS|FAIL` line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            s.push_str(&format!(
                "{:<24} max_rel_err={:.3e} tol={:.0e} seeds={} coords={} {}\n",
                r.op,
                r.max_rel_err,
                r.tolerance,
                r.seeds,
                r.coords_checked,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("total {:.2}s\n", self.seconds));
        s
    }
}

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn flatten(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Vec<Tensor<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[at..at + n].to_vec()).expect("shape matches length");
            at += n;
            t
        })
        .collect()
}

fn probe_dot(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn corrupt(g: &mut [f64]) {
    let i = g.len() / 2;
    g[i] = g[i] * 1.05 + 1e-3;
}

/// Checks a tensor function through a random linear probe. `backward`
/// returns the gradients of all inputs given `dy`.
fn check_op(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    forward: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    fault: bool,
) -> GradCheckReport {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let y = forward(&inputs);
    let mut r = rng::stream(seed, &[rng::name_key(name), rng::name_key("probe")]);
    let dy = uniform(&mut r, y.shape(), -1.0, 1.0);
    let mut analytic = flatten(&backward(&inputs, &dy));
    if fault {
        corrupt(&mut analytic);
    }
    let x = flatten(&inputs);
    grad_check(
        name,
        |p| probe_dot(&forward(&unflatten(&shapes, p)), &dy),
        &x,
        &analytic,
        None,
        OP_TOLERANCE,
    )
}

/// Checks a scalar loss of flat inputs with a known gradient.
fn check_scalar(
    name: &str,
    x: Vec<f64>,
    loss: impl Fn(&[f64]) -> (f64, Vec<f64>),
    fault: bool,
) -> GradCheckReport {
    let (_, mut analytic) = loss(&x);
    if fault {
        corrupt(&mut analytic);
    }
    grad_check(name, |p| loss(p).0, &x, &analytic, None, OP_TOLERANCE)
}

fn run_check(name: &str, seed: u64, fault: bool) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, &[rng::name_key(name)]);
    let rep = match name {
        "conv2d" => {
            let (stride, pad) = if seed % 2 == 0 { (1, Padding::Same) } else { (2, Padding::Valid) };
            let inputs = vec![
                uniform(&mut r, &[2, 3, 7, 7], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
                uniform(&mut r, &[4], -0.1, 0.1),
            ];
            check_op(
                name,
                seed,
                inputs,
                |t| conv2d(&t[0], &t[1], &t[2], stride, pad).expect("valid shapes"),
                |t, dy| {
                    let g = conv2d_backward(&t[0], &t[1], stride, pad, dy).expect("valid shapes");
                    vec![g.dx, g.dw, g.db]
                },
                fault,
            )
        }
        "depthwise_conv2d" => {
            let (stride, pad) = if seed % 2 == 0 { (1, Padding::Same) } else { (2, Padding::Same) };
            let inputs = vec![
                uniform(&mut r, &[2, 3, 7, 7], -1.0, 1.0),
                uniform(&mut r, &[3, 1, 3, 3], -0.5, 0.5),
                uniform(&mut r, &[3], -0.1, 0.1),
            ];
            check_op(
                name,
                seed,
                inputs,
                |t| depthwise_conv2d(&t[0], &t[1], &t[2], stride, pad).expect("valid shapes"),
                |t, dy| {
                    let g = depthwise_conv2d_backward(&t[0], &t[1], stride, pad, dy).expect("valid shapes");
                    vec![g.dx, g.dw, g.db]
                },
                fault,
            )
        }
        "dense" => {
            let inputs = vec![
                uniform(&mut r, &[4, 6], -1.0, 1.0),
                uniform(&mut r, &[6, 3], -0.5, 0.5),
                uniform(&mut r, &[3], -0.1, 0.1),
            ];
            check_op(
                name,
                seed,
                inputs,
                |t| dense(&t[0], &t[1], &t[2]).expect("valid shapes"),
                |t, dy| {
                    let g = dense_backward(&t[0], &t[1], dy).expect("valid shapes");
                    vec![g.dx, g.dw, g.db]
                },
                fault,
            )
        }
        "relu" => check_op(
            name,
            seed,
            vec![off_zero(&mut r, &[2, 2, 4, 4])],
            |t| relu(&t[0]),
            |t, dy| vec![relu_backward(&t[0], dy)],
            fault,
        ),
        "sigmoid" => check_op(
            name,
            seed,
            vec![uniform(&mut r, &[2, 2, 4, 4], -4.0, 4.0)],
            |t| sigmoid(&t[0]),
            |t, dy| vec![sigmoid_backward(&sigmoid(&t[0]), dy)],
            fault,
        ),
        "max_pool2d" => check_op(
            name,
            seed,
            vec![uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0)],
            |t| max_pool2d(&t[0], 2, 2).expect("valid shapes").0,
            |t, dy| {
                let (_, idx) = max_pool2d(&t[0], 2, 2).expect("valid shapes");
                vec![max_pool2d_backward(&idx, dy)]
            },
            fault,
        ),
        "global_avg_pool" => check_op(
            name,
            seed,
            vec![uniform(&mut r, &[2, 3, 4, 5], -1.0, 1.0)],
            |t| global_avg_pool(&t[0]).expect("rank 4"),
            |t, dy| vec![global_avg_pool_backward(t[0].shape(), dy)],
            fault,
        ),
        "upsample_nearest2x" => check_op(
            name,
            seed,
            vec![uniform(&mut r, &[2, 2, 3, 4], -1.0, 1.0)],
            |t| upsample_nearest2x(&t[0]).expect("rank 4"),
            |_, dy| vec![upsample_nearest2x_backward(dy).expect("even dims")],
            fault,
        ),
        "concat_channels" => check_op(
            name,
            seed,
            vec![uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0)],
            |t| concat_channels(&[&t[0], &t[1]]).expect("same spatial dims"),
            |_, dy| split_channels(dy, &[2, 3]).expect("channel split"),
            fault,
        ),
        "softmax_cross_entropy" => {
            let (n, k) = (5, 4);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let w: Vec<f64> = (0..k).map(|_| r.random_range(0.5..2.0)).collect();
            let x = uniform(&mut r, &[n, k], -3.0, 3.0).into_data();
            check_scalar(
                name,
                x,
                |z| {
                    let p = softmax(&Tensor::new(&[n, k], z.to_vec()).expect("n·k values")).expect("rank 2");
                    let l = weighted_cross_entropy(&p, &labels, Some(&w)).expect("valid labels");
                    let g = softmax_cross_entropy_grad(&p, &labels, Some(&w)).expect("valid labels");
                    (l, g.into_data())
                },
                fault,
            )
        }
        "dice_bce" => {
            let gt: Vec<f64> = (0..24).map(|_| r.random::<bool>() as u8 as f64).collect();
            let p: Vec<f64> = (0..24).map(|_| r.random_range(0.05..0.95)).collect();
            check_scalar(name, p, |p| dice_bce_loss(p, &gt, &DiceBce::default()).expect("same length"), fault)
        }
        "dice_bce_with_logits" => {
            let gt: Vec<f64> = (0..24).map(|_| r.random::<bool>() as u8 as f64).collect();
            let z: Vec<f64> = (0..24).map(|_| r.random_range(-4.0..4.0)).collect();
            check_scalar(name, z, |z| dice_bce_with_logits(z, &gt, &DiceBce::default()).expect("same length"), fault)
        }
        "conv_classifier_stack" => conv_stack(&mut r, fault),
        "softmax_head" => softmax_head(&mut r, fault),
        "dual_encoder" => dual_encoder(seed, fault)?,
        other => {
            return Err(crate::Error::InvalidArgument(format!("unknown gradient check {other}")));
        }
    };
    Ok(rep)
}

/// conv2d → relu → max_pool → GAP → dense → softmax → cross-entropy, with
/// respect to the input and every parameter.
fn conv_stack(r: &mut impl Rng, fault: bool) -> GradCheckReport {
    let (n, c, h, o, k) = (2, 3, 6, 4, 3);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let inputs = [
        uniform(r, &[n, c, h, h], -1.0, 1.0),
        uniform(r, &[o, c, 3, 3], -0.5, 0.5),
        uniform(r, &[o], -0.1, 0.1),
        uniform(r, &[o, k], -1.0, 1.0),
        uniform(r, &[k], -0.1, 0.1),
    ];
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |t: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let a = conv2d(&t[0], &t[1], &t[2], 1, Padding::Same).expect("valid shapes");
        let z = relu(&a);
        let (m, idx) = max_pool2d(&z, 2, 2).expect("valid shapes");
        let g = global_avg_pool(&m).expect("rank 4");
        let p = softmax(&dense(&g, &t[3], &t[4]).expect("valid shapes")).expect("rank 2");
        let loss = weighted_cross_entropy(&p, &labels, None).expect("valid labels");
        let dl = softmax_cross_entropy_grad(&p, &labels, None).expect("valid labels");
        let dd = dense_backward(&g, &t[3], &dl).expect("valid shapes");
        let dm = global_avg_pool_backward(m.shape(), &dd.dx);
        let dz = max_pool2d_backward(&idx, &dm);
        let da = relu_backward(&a, &dz);
        let dc = conv2d_backward(&t[0], &t[1], 1, Padding::Same, &da).expect("valid shapes");
        (loss, vec![dc.dx, dc.dw, dc.db, dd.dw, dd.db])
    };
    let x = flatten(&inputs);
    let mut analytic = flatten(&eval(&inputs).1);
    if fault {
        corrupt(&mut analytic);
    }
    grad_check(
        "conv_classifier_stack",
        |p| eval(&unflatten(&shapes, p)).0,
        &x,
        &analytic,
        None,
        OP_TOLERANCE,
    )
}

/// The classifier head as trained: standardized rows → dense → softmax →
/// class-weighted cross-entropy, with respect to the head parameters.
fn softmax_head(r: &mut impl Rng, fault: bool) -> GradCheckReport {
    let (n, f, k) = (6, 8, 3);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let w: Vec<f64> = (0..k).map(|_| r.random_range(0.5..2.0)).collect();
    let raw = uniform(r, &[n, f], -2.0, 2.0);
    let x = standardize(&raw);
    let params = [uniform(r, &[f, k], -0.5, 0.5), uniform(r, &[k], -0.1, 0.1)];
    let shapes: Vec<Vec<usize>> = params.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |t: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let p = softmax(&dense(&x, &t[0], &t[1]).expect("valid shapes")).expect("rank 2");
        let loss = weighted_cross_entropy(&p, &labels, Some(&w)).expect("valid labels");
        let dl = softmax_cross_entropy_grad(&p, &labels, Some(&w)).expect("valid labels");
        let g = dense_backward(&x, &t[0], &dl).expect("valid shapes");
        (loss, vec![g.dw, g.db])
    };
    let theta = flatten(&params);
    let mut analytic = flatten(&eval(&params).1);
    if fault {
        corrupt(&mut analytic);
    }
    grad_check("softmax_head", |p| eval(&unflatten(&shapes, p)).0, &theta, &analytic, None, OP_TOLERANCE)
}

fn standardize(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, f) = x.dims2().expect("rank 2");
    let mut out = x.clone();
    for j in 0..f {
        let col: Vec<f64> = (0..n).map(|i| x.data()[i * f + j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-6);
        for i in 0..n {
            out.data_mut()[i * f + j] = (col[i] - m) / sd;
        }
    }
    out
}

/// Full dual encoder on an 8×8 input, Dice+BCE loss, sampled parameter
/// coordinates.
fn dual_encoder(seed: u64, fault: bool) -> Result<GradCheckReport> {
    let cfg = DualEncoderConfig {
        base_channels: 4,
        ..DualEncoderConfig::default()
    };
    let net0: DualEncoder<f64> = DualEncoder::new(cfg, seed)?;
    let mut r = rng::stream(seed, &[rng::name_key("dual_encoder")]);
    let x = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let gt: Vec<f64> = (0..64).map(|_| r.random::<bool>() as u8 as f64).collect();
    let mut net = net0.clone();
    let (z, cache) = net.forward(&x)?;
    let (_, g) = dice_bce_with_logits(z.data(), &gt, &DiceBce::default())?;
    net.zero_grad();
    net.backward(&cache, &Tensor::new(z.shape(), g)?)?;
    let theta = net.flat_values();
    let mut analytic = net.flat_grads();
    if fault {
        corrupt(&mut analytic);
    }
    let mut coords = spread_coords(theta.len(), NETWORK_COORDS);
    if fault && !coords.contains(&(theta.len() / 2)) {
        coords.push(theta.len() / 2);
    }
    let mut probe = net0;
    Ok(grad_check(
        "dual_encoder",
        |p| {
            probe.set_flat_values(p);
            let (z, _) = probe.forward(&x).expect("shapes fixed above");
            dice_bce_with_logits(z.data(), &gt, &DiceBce::default()).expect("same length").0
        },
        &theta,
        &analytic,
        Some(&coords),
        NETWORK_TOLERANCE,
    ))
}

/// Runs every check on every seed and keeps the worst error per check.
pub fn run_grad_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for name in CHECKS {
        let fault = cfg.inject_fault.as_deref() == Some(name);
        let mut worst = 0.0f64;
        let mut coords = 0;
        let mut tolerance = OP_TOLERANCE;
        for &seed in &cfg.seeds {
            let rep = run_check(name, seed, fault)?;
            worst = worst.max(rep.max_rel_err);
            coords += rep.checked;
            tolerance = rep.tolerance;
        }
        results.push(OpResult {
            op: name.to_string(),
            max_rel_err: worst,
            tolerance,
            seeds: cfg.seeds.len(),
            coords_checked: coords,
            passed: !cfg.seeds.is_empty() && worst < tolerance,
        });
    }
    Ok(GradSuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
