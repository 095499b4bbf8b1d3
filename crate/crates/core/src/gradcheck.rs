//! Central finite-difference gradient oracle and the seeded random-network
//! check suite.
//!
//! [`finite_diff_grad`] perturbs one parameter entry at a time and evaluates
//! the loss twice per entry; it never touches the analytic backward path, so
//! the two routes stay independent. The suite drives both routes over random
//! small networks and both loss kinds (mean entropy of the softmax output,
//! cross-entropy against one-hot labels).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backward::{backward_segment, filter_all};
use crate::error::Result;
use crate::layer::{Layer, NormKind, ParamKind};
use crate::loss::{
    cross_entropy, cross_entropy_grad_rows, entropy_grad_rows, entropy_rows, one_hot, softmax,
    softmax_vjp,
};
use crate::matrix::Matrix;
use crate::net::{forward, StatsMode};
use crate::optim::zero_grads;
use crate::scalar::{cast_usize, Scalar};

/// Step used by the seeded suite.
pub const FD_STEP: f64 = 1e-5;
/// Per-entry relative tolerance of the suite.
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor below which differences always pass.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Central-difference gradient of `loss_fn` with respect to one parameter:
/// `(f(p+h) - f(p-h)) / 2h` per entry. The parameter is restored bitwise.
pub fn finite_diff_grad<T: Scalar>(
    layers: &mut [Layer<T>],
    layer_idx: usize,
    kind: ParamKind,
    h: T,
    loss_fn: &mut dyn FnMut(&[Layer<T>]) -> Result<T>,
) -> Result<Matrix<T>> {
    assert!(h > T::zero(), "step must be positive");
    let shape = layers[layer_idx]
        .param(kind)
        .expect("parameter exists")
        .value
        .shape();
    let mut grad = Matrix::zeros(shape.0, shape.1);
    let n = shape.0 * shape.1;
    let two_h = h + h;
    for k in 0..n {
        let original = layers[layer_idx].param(kind).unwrap().value.data()[k];

        layers[layer_idx].param_mut(kind).unwrap().value.data_mut()[k] = original + h;
        let f_plus = loss_fn(layers)?;

        layers[layer_idx].param_mut(kind).unwrap().value.data_mut()[k] = original - h;
        let f_minus = loss_fn(layers)?;

        layers[layer_idx].param_mut(kind).unwrap().value.data_mut()[k] = original;
        grad.data_mut()[k] = (f_plus - f_minus) / two_h;
    }
    Ok(grad)
}

/// Loss kind exercised by the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over rows of the entropy of the softmax output.
    Entropy,
    /// Cross-entropy of the softmax output against fixed one-hot labels.
    CrossEntropy,
}

/// One entry where analytic and numeric gradients disagreed.
#[derive(Clone, Debug)]
pub struct GradcheckFailure {
    pub trial: usize,
    pub layer: usize,
    pub kind: ParamKind,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub trials: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn entries_agree(analytic: f64, numeric: f64) -> (bool, f64) {
    let err = (analytic - numeric).abs();
    if err <= FD_ABS_FLOOR {
        return (true, 0.0);
    }
    let scale = analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
    let rel = err / scale;
    (rel <= FD_REL_TOL, rel)
}

fn mean_entropy_loss(layers: &[Layer<f64>], x: &Matrix<f64>, mode: StatsMode) -> Result<f64> {
    let (logits, _) = forward(layers, x, mode)?;
    let probs = softmax(&logits)?;
    let e = entropy_rows(&probs)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn ce_loss(
    layers: &[Layer<f64>],
    x: &Matrix<f64>,
    labels: &[usize],
    classes: usize,
    mode: StatsMode,
) -> Result<f64> {
    let (logits, _) = forward(layers, x, mode)?;
    let probs = softmax(&logits)?;
    cross_entropy(&probs, &one_hot(labels, classes))
}

/// Analytic gradient of the same losses via the backward pass. Accumulates
/// into the grad buffers of every parameter (filter = all).
fn analytic_grads(
    layers: &mut [Layer<f64>],
    x: &Matrix<f64>,
    loss: LossKind,
    labels: &[usize],
    mode: StatsMode,
) -> Result<()> {
    zero_grads(layers);
    let (logits, trace) = forward(layers, x, mode)?;
    let probs = softmax(&logits)?;
    let n = probs.rows();
    let w = vec![1.0 / n as f64; n];
    let dprobs = match loss {
        LossKind::Entropy => entropy_grad_rows(&probs, &w),
        LossKind::CrossEntropy => cross_entropy_grad_rows(&probs, labels, &w),
    };
    let dlogits = softmax_vjp(&probs, &dprobs);
    backward_segment(layers, &trace, &dlogits, &filter_all)?;
    Ok(())
}

struct Trial {
    layers: Vec<Layer<f64>>,
    x: Matrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    mode: StatsMode,
    loss: LossKind,
}

/// Draws a random trial, rejecting configurations where the loss is not
/// smooth inside the finite-difference window (relu inputs near the kink, or
/// probabilities near the log clamp).
fn draw_trial(rng: &mut ChaCha8Rng, trial_idx: usize) -> Trial {
    loop {
        let blocks = rng.gen_range(1..=3usize);
        let classes = rng.gen_range(2..=5usize);
        let in_dim = rng.gen_range(2..=8usize);
        let rows = rng.gen_range(2..=6usize);
        let mode = if rng.gen_bool(0.75) {
            StatsMode::Batch
        } else {
            StatsMode::Running
        };

        let mut layers: Vec<Layer<f64>> = Vec::new();
        let mut width = in_dim;
        for _ in 0..blocks {
            let w = rng.gen_range(2..=8usize);
            layers.push(Layer::dense_init(width, w, rng));
            match rng.gen_range(0..3u8) {
                0 => layers.push(Layer::norm(NormKind::Batch, w)),
                1 => layers.push(Layer::norm(NormKind::Layer, w)),
                _ => {}
            }
            layers.push(Layer::Relu);
            width = w;
        }
        layers.push(Layer::dense_init(width, classes, rng));

        // Perturb running stats away from the fresh defaults so the running
        // path is exercised on non-trivial values.
        for layer in &mut layers {
            if let Layer::Norm(norm) = layer {
                for v in norm.running_mean.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
                for v in norm.running_var.data_mut() {
                    *v = rng.gen_range(0.25..2.0);
                }
            }
        }

        let mut x = Matrix::zeros(rows, in_dim);
        for v in x.data_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let loss = if trial_idx % 2 == 0 {
            LossKind::Entropy
        } else {
            LossKind::CrossEntropy
        };

        if !trial_is_smooth(&layers, &x, mode) {
            continue;
        }
        return Trial {
            layers,
            x,
            labels,
            classes,
            mode,
            loss,
        };
    }
}

/// Margin by which relu inputs must clear zero and probabilities must clear
/// the clamp for the finite-difference window to stay on one smooth piece.
const KINK_MARGIN: f64 = 1e-3;

fn trial_is_smooth(layers: &[Layer<f64>], x: &Matrix<f64>, mode: StatsMode) -> bool {
    let Ok((logits, trace)) = forward(layers, x, mode) else {
        return false;
    };
    for (layer, lt) in layers.iter().zip(&trace.layers) {
        if matches!(layer, Layer::Relu) {
            if lt.input.data().iter().any(|v| v.abs() < KINK_MARGIN) {
                return false;
            }
        }
    }
    let Ok(probs) = softmax(&logits) else {
        return false;
    };
    probs.data().iter().all(|&p| p > 1e-9)
}

/// Runs `trials` seeded random gradient checks; every dense and gamma/beta
/// entry is compared between the analytic backward and central differences.
pub fn run_suite(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    let h = FD_STEP;

    for t in 0..trials {
        let mut trial = draw_trial(&mut rng, t);
        analytic_grads(&mut trial.layers, &trial.x, trial.loss, &trial.labels, trial.mode)?;
        let analytic: Vec<(usize, ParamKind, Matrix<f64>)> = trial
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(k, p)| (i, k, p.grad.clone()))
            })
            .collect();

        for (layer_idx, kind, agrad) in analytic {
            let x = trial.x.clone();
            let labels = trial.labels.clone();
            let classes = trial.classes;
            let mode = trial.mode;
            let loss = trial.loss;
            let mut loss_fn = move |ls: &[Layer<f64>]| match loss {
                LossKind::Entropy => mean_entropy_loss(ls, &x, mode),
                LossKind::CrossEntropy => ce_loss(ls, &x, &labels, classes, mode),
            };
            let ngrad =
                finite_diff_grad(&mut trial.layers, layer_idx, kind, h, &mut loss_fn)?;
            for e in 0..agrad.data().len() {
                let a = agrad.data()[e];
                let n = ngrad.data()[e];
                let (ok, rel) = entries_agree(a, n);
                report.entries_checked += 1;
                report.max_rel_err = report.max_rel_err.max(rel);
                if !ok {
                    report.failures.push(GradcheckFailure {
                        trial: t,
                        layer: layer_idx,
                        kind,
                        entry: e,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
        }
        report.trials += 1;
    }
    Ok(report)
}

/// Convenience used by tests: mean entropy loss of a segment output.
pub fn segment_mean_entropy<T: Scalar>(
    layers: &[Layer<T>],
    x: &Matrix<T>,
    mode: StatsMode,
) -> Result<T> {
    let (logits, _) = forward(layers, x, mode)?;
    let probs = softmax(&logits)?;
    let e = entropy_rows(&probs)?;
    let n = cast_usize::<T>(e.len());
    Ok(e.into_iter().sum::<T>() / n)
}
