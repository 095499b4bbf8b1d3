//! Test-time adaptation engine.
//!
//! The main procedure splits the source network into shallow layers `G` and a
//! branch, deep-copies the branch into a frozen source branch and a trainable
//! adapt branch, and then, per test batch, iteratively re-selects reliable
//! (low-entropy) samples and applies two updates per round: an entropy
//! minimization step on `G`'s normalization affine parameters over the fused
//! prediction, and a cross-entropy step on the adapt branch's normalization
//! affine parameters against detached pseudo-labels. Samples that start above
//! the entropy threshold and end below it are the potentially reliable set.
//!
//! Entropy-minimization baselines (full-batch and threshold-filtered) operate
//! on the unsplit network and report predictions from before their update,
//! the strict online protocol.

use crate::backward::{backward_segment, filter_none, filter_trainable, grad_norm_stats};
use crate::error::{CoreError, Result};
use crate::layer::{has_norm_layer, set_norm_affine_trainable_only, set_trainable, Layer};
use crate::loss::{cross_entropy_grad_rows, entropy_grad_rows, entropy_rows, softmax, softmax_vjp};
use crate::matrix::Matrix;
use crate::net::{forward, ForwardTrace, Network, StatsMode};
use crate::optim::{sgd_step, zero_grads};
use crate::scalar::{cast, cast_usize, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    NoAdapt,
    Tent,
    ThresholdTent,
    Poem,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::Tent => "tent",
            Method::ThresholdTent => "threshold_tent",
            Method::Poem => "poem",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_adapt" => Ok(Method::NoAdapt),
            "tent" => Ok(Method::Tent),
            "threshold_tent" => Ok(Method::ThresholdTent),
            "poem" => Ok(Method::Poem),
            other => Err(CoreError::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// Adaptation hyper-parameters.
///
/// The entropy threshold is `entropy_factor * ln(num_classes)`; `max_iters`
/// bounds the re-selection rounds per batch; `fusion_alpha` weights the
/// source branch in the fused prediction.
#[derive(Clone, Debug)]
pub struct AdaptConfig<T> {
    pub entropy_factor: T,
    pub max_iters: usize,
    pub fusion_alpha: T,
    pub lr_shallow: T,
    pub lr_adapt: T,
    pub momentum: T,
    pub method: Method,
}

impl<T: Scalar> Default for AdaptConfig<T> {
    fn default() -> Self {
        Self {
            entropy_factor: cast(0.4),
            max_iters: 2,
            fusion_alpha: cast(0.5),
            // Calibrated for the desk-scale benchmark; normalization affine
            // steps below ~0.1 move per-sample entropies by less than 1e-2
            // nats per round and adaptation becomes a no-op.
            lr_shallow: cast(0.3),
            lr_adapt: cast(0.2),
            momentum: cast(0.9),
            method: Method::Poem,
        }
    }
}

impl<T: Scalar> AdaptConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_factor > T::zero()) {
            return Err(CoreError::InvalidConfig(
                "entropy factor must be positive".into(),
            ));
        }
        if self.fusion_alpha < T::zero() || self.fusion_alpha > T::one() {
            return Err(CoreError::InvalidConfig("alpha must be in [0, 1]".into()));
        }
        if self.lr_shallow < T::zero() || self.lr_adapt < T::zero() {
            return Err(CoreError::InvalidConfig(
                "learning rates must be non-negative".into(),
            ));
        }
        if self.momentum < T::zero() || self.momentum >= T::one() {
            return Err(CoreError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Branch predictions and their fusion for one batch.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub probs_source: Matrix<T>,
    pub probs_adapt: Matrix<T>,
    /// `alpha * source + (1 - alpha) * adapt`, rowwise.
    pub probs_fused: Matrix<T>,
    /// Rowwise argmax of the fused probabilities, ties toward the lowest
    /// class index.
    pub pseudo_labels: Vec<usize>,
}

/// Entropies and the selected reliable index set at one iteration.
#[derive(Clone, Debug)]
pub struct SelectionResult<T> {
    pub entropies: Vec<T>,
    /// Sorted ascending; `i` is selected iff `entropies[i] < threshold`.
    pub selected: Vec<usize>,
    pub iteration: usize,
}

/// Per-batch bookkeeping of the adaptation loop.
#[derive(Clone, Debug)]
pub struct AdaptTrace<T> {
    /// Selection at iteration 0, then after each update round.
    pub selections: Vec<SelectionResult<T>>,
    pub initial_prediction: Prediction<T>,
    pub final_fused: Matrix<T>,
    /// Final selection minus initial selection: samples that were high
    /// entropy before the loop and low entropy after it.
    pub potentially_reliable: Vec<usize>,
    /// Full-batch forward passes through the model (fused counts once).
    pub forward_count: usize,
    /// Per-sample backward contributions (each loss backward adds the number
    /// of samples it averaged over).
    pub backward_count: usize,
    /// Mean gradient L2 norm of the updated parameters, one entry per round.
    pub grad_norms: Vec<T>,
}

impl<T: Scalar> AdaptTrace<T> {
    /// (full-batch forwards, per-sample backward contributions).
    pub fn forward_backward_counters(&self) -> (usize, usize) {
        (self.forward_count, self.backward_count)
    }
}

/// Strict-threshold selection: `{ i : entropies[i] < threshold }`.
pub fn select_reliable<T: Scalar>(entropies: &[T], threshold: T, iteration: usize) -> SelectionResult<T> {
    let selected = entropies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e < threshold)
        .map(|(i, _)| i)
        .collect();
    SelectionResult {
        entropies: entropies.to_vec(),
        selected,
        iteration,
    }
}

/// Sorted set difference `a \ b` (both sorted ascending).
fn sorted_diff(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|i| b.binary_search(i).is_err()).collect()
}

/// Stats mode for a test batch: batch statistics when the batch is large
/// enough, otherwise the running-statistics fallback (single-sample arrival).
pub fn stats_mode_for_batch<T: Scalar>(x: &Matrix<T>) -> StatsMode {
    if x.rows() >= 2 {
        StatsMode::Batch
    } else {
        StatsMode::Running
    }
}

/// Forward traces of the three segments for one fused prediction.
#[derive(Debug)]
pub struct FusedTraces<T> {
    pub shallow: ForwardTrace<T>,
    pub source: ForwardTrace<T>,
    pub adapt: ForwardTrace<T>,
}

/// Live adaptation state: shallow layers with trainable normalization
/// affines, a fully frozen source branch, and a trainable-normalization
/// adapt branch cloned from it.
#[derive(Clone, Debug)]
pub struct PoemState<T> {
    pub shallow: Vec<Layer<T>>,
    pub source_branch: Vec<Layer<T>>,
    pub adapt_branch: Vec<Layer<T>>,
    pub num_classes: usize,
    /// `entropy_factor * ln(num_classes)`.
    pub entropy_threshold: T,
    pub fusion_alpha: T,
}

/// Splits the network at its split index and deep-copies the branch.
///
/// Only normalization gamma/beta stay trainable in the shallow segment and
/// the adapt branch; the source branch is frozen entirely. Optimizer state
/// (gradients and momentum buffers) starts from zero.
pub fn split_and_clone<T: Scalar>(net: &Network<T>, cfg: &AdaptConfig<T>) -> Result<PoemState<T>> {
    cfg.validate()?;
    net.validate()?;

    let mut shallow = net.shallow().to_vec();
    set_norm_affine_trainable_only(&mut shallow);
    let mut source_branch = net.branch().to_vec();
    set_trainable(&mut source_branch, false);
    let mut adapt_branch = net.branch().to_vec();
    set_norm_affine_trainable_only(&mut adapt_branch);

    if !has_norm_layer(&shallow) && !has_norm_layer(&adapt_branch) {
        return Err(CoreError::NothingToAdapt);
    }

    for seg in [&mut shallow, &mut source_branch, &mut adapt_branch] {
        zero_grads(seg);
        for layer in seg.iter_mut() {
            for (_, p) in layer.params_mut() {
                p.momentum_buf.fill(T::zero());
            }
        }
    }

    let threshold = cfg.entropy_factor * cast_usize::<T>(net.num_classes).ln();
    Ok(PoemState {
        shallow,
        source_branch,
        adapt_branch,
        num_classes: net.num_classes,
        entropy_threshold: threshold,
        fusion_alpha: cfg.fusion_alpha,
    })
}

impl<T: Scalar> PoemState<T> {
    /// Shared features through the shallow layers, one softmax head per
    /// branch, and the rowwise convex fusion of the two.
    pub fn predict_fused(
        &self,
        x: &Matrix<T>,
        mode: StatsMode,
    ) -> Result<(Prediction<T>, FusedTraces<T>)> {
        let (features, shallow_trace) = forward(&self.shallow, x, mode)?;
        let (logits_s, source_trace) = forward(&self.source_branch, &features, mode)?;
        let (logits_a, adapt_trace) = forward(&self.adapt_branch, &features, mode)?;
        let probs_source = softmax(&logits_s)?;
        let probs_adapt = softmax(&logits_a)?;
        let alpha = self.fusion_alpha;
        let probs_fused = probs_source
            .scale(alpha)
            .add(&probs_adapt.scale(T::one() - alpha));
        let pseudo_labels = probs_fused.argmax_rows();
        Ok((
            Prediction {
                probs_source,
                probs_adapt,
                probs_fused,
                pseudo_labels,
            },
            FusedTraces {
                shallow: shallow_trace,
                source: source_trace,
                adapt: adapt_trace,
            },
        ))
    }

    /// One adaptation round from the current prediction and traces: entropy
    /// step on the shallow normalization affines, cross-entropy step on the
    /// adapt branch's, both from the same forward. Returns the mean gradient
    /// norm over the updated parameters.
    fn update_round(
        &mut self,
        pred: &Prediction<T>,
        traces: &FusedTraces<T>,
        selected: &[usize],
        cfg: &AdaptConfig<T>,
    ) -> Result<T> {
        let rows = pred.probs_fused.rows();
        let mut weights = vec![T::zero(); rows];
        let inv_m = T::one() / cast_usize::<T>(selected.len());
        for &i in selected {
            weights[i] = inv_m;
        }
        let alpha = self.fusion_alpha;

        // Entropy objective on the fused prediction; gradients flow through
        // both branches into the shallow segment, but only its normalization
        // affines accumulate.
        let dfused = entropy_grad_rows(&pred.probs_fused, &weights);
        let dlogits_s = softmax_vjp(&pred.probs_source, &dfused.scale(alpha));
        let dlogits_a = softmax_vjp(&pred.probs_adapt, &dfused.scale(T::one() - alpha));
        let dphi_s =
            backward_segment(&mut self.source_branch, &traces.source, &dlogits_s, &filter_none)?;
        let dphi_a =
            backward_segment(&mut self.adapt_branch, &traces.adapt, &dlogits_a, &filter_none)?;
        let dphi = dphi_s.add(&dphi_a);
        backward_segment(&mut self.shallow, &traces.shallow, &dphi, &filter_trainable)?;
        let (norm_sum_g, count_g) = grad_norm_stats(&self.shallow, &filter_trainable);

        // Cross-entropy against the detached pseudo-labels of the current
        // forward, through the adapt-branch path of the fusion only.
        let dfused_ce = cross_entropy_grad_rows(&pred.probs_fused, &pred.pseudo_labels, &weights);
        let dlogits_ce = softmax_vjp(&pred.probs_adapt, &dfused_ce.scale(T::one() - alpha));
        backward_segment(&mut self.adapt_branch, &traces.adapt, &dlogits_ce, &filter_trainable)?;
        let (norm_sum_a, count_a) = grad_norm_stats(&self.adapt_branch, &filter_trainable);

        sgd_step(&mut self.shallow, cfg.lr_shallow, cfg.momentum);
        sgd_step(&mut self.adapt_branch, cfg.lr_adapt, cfg.momentum);

        let count = count_g + count_a;
        Ok(if count == 0 {
            T::zero()
        } else {
            (norm_sum_g + norm_sum_a) / cast_usize(count)
        })
    }

    /// Full per-batch adaptation: predict, select, then loop update rounds
    /// while the round budget lasts and the selection keeps changing.
    ///
    /// An empty selection stops the loop immediately (no update at all when
    /// the initial selection is empty). The returned prediction is the last
    /// re-prediction; the trace records the potentially reliable set
    /// `S_final \ S_initial`.
    pub fn adapt_batch_poem(
        &mut self,
        x: &Matrix<T>,
        cfg: &AdaptConfig<T>,
    ) -> Result<(Prediction<T>, AdaptTrace<T>)> {
        cfg.validate()?;
        let mode = stats_mode_for_batch(x);
        let (mut pred, mut traces) = self.predict_fused(x, mode)?;
        let initial_prediction = pred.clone();
        let mut forward_count = 1usize;
        let mut backward_count = 0usize;
        let mut grad_norms = Vec::new();

        let entropies = entropy_rows(&pred.probs_fused)?;
        let mut sel = select_reliable(&entropies, self.entropy_threshold, 0);
        let initial_selected = sel.selected.clone();
        let mut selections = vec![sel.clone()];

        let mut prev_selected: Option<Vec<usize>> = None;
        let mut t = 0usize;
        while t < cfg.max_iters
            && prev_selected.as_deref() != Some(sel.selected.as_slice())
            && !sel.selected.is_empty()
        {
            prev_selected = Some(sel.selected.clone());
            let gn = self.update_round(&pred, &traces, &sel.selected, cfg)?;
            grad_norms.push(gn);
            backward_count += 2 * sel.selected.len();

            let (new_pred, new_traces) = self.predict_fused(x, mode)?;
            forward_count += 1;
            let e = entropy_rows(&new_pred.probs_fused)?;
            t += 1;
            sel = select_reliable(&e, self.entropy_threshold, t);
            selections.push(sel.clone());
            pred = new_pred;
            traces = new_traces;
        }

        let potentially_reliable = sorted_diff(&sel.selected, &initial_selected);
        let trace = AdaptTrace {
            selections,
            initial_prediction,
            final_fused: pred.probs_fused.clone(),
            potentially_reliable,
            forward_count,
            backward_count,
            grad_norms,
        };
        Ok((pred, trace))
    }

    /// Per-sample entropy-gradient norms over the adaptable parameters, for
    /// gradient banding diagnostics, along with the prediction they were
    /// probed at. Restores all gradient buffers to zero.
    pub fn per_sample_grad_norms(&mut self, x: &Matrix<T>) -> Result<(Vec<T>, Prediction<T>)> {
        let mode = stats_mode_for_batch(x);
        let (pred, traces) = self.predict_fused(x, mode)?;
        let rows = x.rows();
        let alpha = self.fusion_alpha;
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut weights = vec![T::zero(); rows];
            weights[i] = T::one();
            let dfused = entropy_grad_rows(&pred.probs_fused, &weights);
            let dlogits_s = softmax_vjp(&pred.probs_source, &dfused.scale(alpha));
            let dlogits_a = softmax_vjp(&pred.probs_adapt, &dfused.scale(T::one() - alpha));
            let dphi_s = backward_segment(
                &mut self.source_branch,
                &traces.source,
                &dlogits_s,
                &filter_none,
            )?;
            let dphi_a = backward_segment(
                &mut self.adapt_branch,
                &traces.adapt,
                &dlogits_a,
                &filter_trainable,
            )?;
            let dphi = dphi_s.add(&dphi_a);
            backward_segment(&mut self.shallow, &traces.shallow, &dphi, &filter_trainable)?;
            let (sum_g, _) = grad_norm_stats(&self.shallow, &filter_trainable);
            let (sum_a, _) = grad_norm_stats(&self.adapt_branch, &filter_trainable);
            out.push(sum_g + sum_a);
            zero_grads(&mut self.shallow);
            zero_grads(&mut self.adapt_branch);
        }
        Ok((out, pred))
    }
}

/// Baseline state: the unsplit network with only normalization affines
/// trainable.
#[derive(Clone, Debug)]
pub struct TentState<T> {
    pub net: Network<T>,
}

impl<T: Scalar> TentState<T> {
    pub fn new(mut net: Network<T>) -> Result<Self> {
        net.validate()?;
        set_norm_affine_trainable_only(&mut net.layers);
        if !has_norm_layer(&net.layers) {
            return Err(CoreError::NothingToAdapt);
        }
        zero_grads(&mut net.layers);
        for layer in net.layers.iter_mut() {
            for (_, p) in layer.params_mut() {
                p.momentum_buf.fill(T::zero());
            }
        }
        Ok(Self { net })
    }

    fn forward_prediction(&self, x: &Matrix<T>) -> Result<(Prediction<T>, ForwardTrace<T>)> {
        let mode = stats_mode_for_batch(x);
        let (logits, trace) = forward(&self.net.layers, x, mode)?;
        let probs = softmax(&logits)?;
        let pseudo_labels = probs.argmax_rows();
        Ok((
            Prediction {
                probs_source: probs.clone(),
                probs_adapt: probs.clone(),
                probs_fused: probs,
                pseudo_labels,
            },
            trace,
        ))
    }

    /// One forward, one entropy-minimization step over the given selection
    /// (every sample, or the reliable subset). The reported prediction is
    /// from before the update (online protocol); an empty selection leaves
    /// the parameters bitwise unchanged.
    fn adapt_entropy_step(
        &mut self,
        x: &Matrix<T>,
        cfg: &AdaptConfig<T>,
        threshold: Option<T>,
    ) -> Result<(Prediction<T>, AdaptTrace<T>)> {
        cfg.validate()?;
        let (pred, trace) = self.forward_prediction(x)?;
        let entropies = entropy_rows(&pred.probs_fused)?;
        let sel = match threshold {
            Some(t) => select_reliable(&entropies, t, 0),
            None => SelectionResult {
                selected: (0..x.rows()).collect(),
                entropies,
                iteration: 0,
            },
        };

        let mut backward_count = 0usize;
        let mut grad_norms = Vec::new();
        if !sel.selected.is_empty() {
            let mut weights = vec![T::zero(); x.rows()];
            let inv_m = T::one() / cast_usize::<T>(sel.selected.len());
            for &i in &sel.selected {
                weights[i] = inv_m;
            }
            let dprobs = entropy_grad_rows(&pred.probs_fused, &weights);
            let dlogits = softmax_vjp(&pred.probs_fused, &dprobs);
            backward_segment(&mut self.net.layers, &trace, &dlogits, &filter_trainable)?;
            let (norm_sum, count) = grad_norm_stats(&self.net.layers, &filter_trainable);
            grad_norms.push(if count == 0 {
                T::zero()
            } else {
                norm_sum / cast_usize(count)
            });
            backward_count = sel.selected.len();
            sgd_step(&mut self.net.layers, cfg.lr_shallow, cfg.momentum);
        }

        let final_fused = pred.probs_fused.clone();
        let adapt_trace = AdaptTrace {
            selections: vec![sel],
            initial_prediction: pred.clone(),
            final_fused,
            potentially_reliable: Vec::new(),
            forward_count: 1,
            backward_count,
            grad_norms,
        };
        Ok((pred, adapt_trace))
    }

    /// Entropy minimization over every sample in the batch.
    pub fn adapt_batch_tent(
        &mut self,
        x: &Matrix<T>,
        cfg: &AdaptConfig<T>,
    ) -> Result<(Prediction<T>, AdaptTrace<T>)> {
        self.adapt_entropy_step(x, cfg, None)
    }

    /// Entropy minimization over the reliable subset only.
    pub fn adapt_batch_threshold(
        &mut self,
        x: &Matrix<T>,
        cfg: &AdaptConfig<T>,
    ) -> Result<(Prediction<T>, AdaptTrace<T>)> {
        let threshold = cfg.entropy_factor * cast_usize::<T>(self.net.num_classes).ln();
        self.adapt_entropy_step(x, cfg, Some(threshold))
    }
}

/// Pure source inference with running statistics; no parameters change.
pub fn adapt_batch_no_adapt<T: Scalar>(
    net: &Network<T>,
    x: &Matrix<T>,
) -> Result<(Prediction<T>, AdaptTrace<T>)> {
    let (logits, _) = forward(&net.layers, x, StatsMode::Running)?;
    let probs = softmax(&logits)?;
    let entropies = entropy_rows(&probs)?;
    let pseudo_labels = probs.argmax_rows();
    let pred = Prediction {
        probs_source: probs.clone(),
        probs_adapt: probs.clone(),
        probs_fused: probs,
        pseudo_labels,
    };
    let trace = AdaptTrace {
        selections: vec![SelectionResult {
            entropies,
            selected: Vec::new(),
            iteration: 0,
        }],
        initial_prediction: pred.clone(),
        final_fused: pred.probs_fused.clone(),
        potentially_reliable: Vec::new(),
        forward_count: 1,
        backward_count: 0,
        grad_norms: Vec::new(),
    };
    Ok((pred, trace))
}

/// Method dispatch over one owned model state, one instance per stream.
#[derive(Clone, Debug)]
pub enum Adapter<T> {
    NoAdapt(Network<T>),
    Tent(TentState<T>),
    ThresholdTent(TentState<T>),
    Poem(PoemState<T>),
}

impl<T: Scalar> Adapter<T> {
    pub fn new(net: Network<T>, cfg: &AdaptConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.method {
            Method::NoAdapt => Adapter::NoAdapt(net),
            Method::Tent => Adapter::Tent(TentState::new(net)?),
            Method::ThresholdTent => Adapter::ThresholdTent(TentState::new(net)?),
            Method::Poem => Adapter::Poem(split_and_clone(&net, cfg)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Adapter::NoAdapt(_) => Method::NoAdapt,
            Adapter::Tent(_) => Method::Tent,
            Adapter::ThresholdTent(_) => Method::ThresholdTent,
            Adapter::Poem(_) => Method::Poem,
        }
    }

    pub fn adapt_batch(
        &mut self,
        x: &Matrix<T>,
        cfg: &AdaptConfig<T>,
    ) -> Result<(Prediction<T>, AdaptTrace<T>)> {
        match self {
            Adapter::NoAdapt(net) => adapt_batch_no_adapt(net, x),
            Adapter::Tent(state) => state.adapt_batch_tent(x, cfg),
            Adapter::ThresholdTent(state) => state.adapt_batch_threshold(x, cfg),
            Adapter::Poem(state) => state.adapt_batch_poem(x, cfg),
        }
    }

    pub fn poem_state_mut(&mut self) -> Option<&mut PoemState<T>> {
        match self {
            Adapter::Poem(state) => Some(state),
            _ => None,
        }
    }
}
