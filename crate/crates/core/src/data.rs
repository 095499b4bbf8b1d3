//! Synthetic benchmark generation: separable Gaussian source tasks, source
//! model training, covariate shifts with severity levels, and the stream
//! regimes driven by the experiment harness.
//!
//! Everything here is a pure function of its inputs and a seed (ChaCha8
//! streams), so identical configurations reproduce bitwise-identical data.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backward::{backward_segment, filter_trainable};
use crate::error::{CoreError, Result};
use crate::layer::{Layer, NormKind};
use crate::loss::{cross_entropy, cross_entropy_grad_rows, one_hot, softmax, softmax_vjp};
use crate::net::{forward, Network, StatsMode};
use crate::optim::{sgd_step, zero_grads};
use crate::{Mat, Net};

/// Feature matrix with class labels, the labels riding in a side channel
/// that only evaluation code may consult.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Mat,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.rows() {
            return Err(CoreError::InvalidConfig(format!(
                "{} labels for {} rows",
                self.y.len(),
                self.x.rows()
            )));
        }
        if self.len() < self.num_classes {
            return Err(CoreError::InvalidConfig(
                "need at least one sample per class".into(),
            ));
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= self.num_classes) {
            return Err(CoreError::InvalidConfig(format!(
                "label {bad} out of range 0..{}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Draws `n` samples from `c` well-separated anisotropic Gaussian clusters
/// in `d` dimensions: class means are seeded random unit directions scaled
/// by `separation`, with a shared per-dimension noise scale. Classes are
/// balanced (as evenly as `n % c` allows) in round-robin label order.
pub fn make_source_task(seed: u64, c: usize, d: usize, n: usize, separation: f64) -> Result<LabeledSet> {
    if c < 2 || d < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "need c >= 2 and d >= 2, got c={c} d={d}"
        )));
    }
    if n < 10 * c {
        return Err(CoreError::InvalidConfig(format!(
            "need n >= 10*c, got n={n} c={c}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        for a in &mut v {
            *a *= separation / norm;
        }
        means.push(v);
    }
    // Shared anisotropic covariance scale per dimension. The wide range
    // matters: low-variance dimensions carry most of the class signal per
    // unit length, so additive shift noise degrades them hardest and
    // statistics-based adaptation has something real to recover.
    let scales: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..1.5)).collect();

    let mut x = Mat::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        y.push(class);
        let row = x.row_mut(i);
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            row[j] = means[class][j] + scales[j] * eps;
        }
    }
    Ok(LabeledSet { x, y, num_classes: c })
}

/// Draws one task and splits it into train and test halves that share the
/// cluster geometry. Rows are in round-robin class order, so a prefix split
/// keeps both halves balanced when the sizes divide the class count.
pub fn make_task_split(
    seed: u64,
    c: usize,
    d: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
) -> Result<(LabeledSet, LabeledSet)> {
    let full = make_source_task(seed, c, d, n_train + n_test, separation)?;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
    let train = LabeledSet {
        x: full.x.gather_rows(&train_idx),
        y: train_idx.iter().map(|&i| full.y[i]).collect(),
        num_classes: c,
    };
    let test = LabeledSet {
        x: full.x.gather_rows(&test_idx),
        y: test_idx.iter().map(|&i| full.y[i]).collect(),
        num_classes: c,
    };
    Ok((train, test))
}

/// One block of the source architecture: a dense layer of the given width,
/// an optional normalization layer, and a relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchBlock {
    pub width: usize,
    pub norm: Option<NormKind>,
}

/// Architecture of the source model: hidden blocks plus an implicit final
/// dense classifier, with the shallow/branch split between two blocks.
///
/// Text form: blocks separated by `,`, the split marked by `|` in place of a
/// comma; each block is a width with an optional norm suffix (`b` batch
/// norm, `l` layer norm). `"64b|64b"` is two batch-norm blocks split in the
/// middle; `"64b,64b|"` keeps both blocks shallow and leaves only the
/// classifier in the branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub blocks: Vec<ArchBlock>,
    /// Blocks `[0, split_block)` are shallow; must be >= 1.
    pub split_block: usize,
}

impl ArchSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut split_block = None;
        let halves: Vec<&str> = s.split('|').collect();
        if halves.len() != 2 {
            return Err(CoreError::Parse(format!(
                "arch '{s}' must contain exactly one '|' split marker"
            )));
        }
        for (half_idx, half) in halves.iter().enumerate() {
            for token in half.split(',') {
                let token = token.trim();
                if token.is_empty() {
                    continue;
                }
                let (num, norm) = match token.chars().last() {
                    Some('b') => (&token[..token.len() - 1], Some(NormKind::Batch)),
                    Some('l') => (&token[..token.len() - 1], Some(NormKind::Layer)),
                    _ => (token, None),
                };
                let width: usize = num
                    .parse()
                    .map_err(|_| CoreError::Parse(format!("bad arch block '{token}'")))?;
                if width == 0 {
                    return Err(CoreError::Parse("zero-width block".into()));
                }
                blocks.push(ArchBlock { width, norm });
            }
            if half_idx == 0 {
                split_block = Some(blocks.len());
            }
        }
        let split_block = split_block.unwrap_or(0);
        let spec = ArchSpec { blocks, split_block };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(CoreError::InvalidConfig("arch needs at least one block".into()));
        }
        if self.split_block == 0 {
            return Err(CoreError::InvalidConfig(
                "split must keep at least one block shallow".into(),
            ));
        }
        if self.split_block > self.blocks.len() {
            return Err(CoreError::InvalidConfig("split block out of range".into()));
        }
        Ok(())
    }

    /// Builds a freshly initialized network for this architecture.
    pub fn build(&self, input_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Net> {
        self.check()?;
        let mut layers: Vec<Layer<f64>> = Vec::new();
        let mut width = input_dim;
        let mut split_index = 0usize;
        for (b, block) in self.blocks.iter().enumerate() {
            layers.push(Layer::dense_init(width, block.width, rng));
            if let Some(kind) = block.norm {
                layers.push(Layer::norm(kind, block.width));
            }
            layers.push(Layer::Relu);
            width = block.width;
            if b + 1 == self.split_block {
                split_index = layers.len();
            }
        }
        layers.push(Layer::dense_init(width, num_classes, rng));
        Network::new(layers, split_index, num_classes, input_dim)
    }
}

impl std::fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(if i == self.split_block { "|" } else { "," })?;
            }
            write!(f, "{}", b.width)?;
            match b.norm {
                Some(NormKind::Batch) => f.write_str("b")?,
                Some(NormKind::Layer) => f.write_str("l")?,
                None => {}
            }
        }
        if self.split_block == self.blocks.len() {
            f.write_str("|")?;
        }
        Ok(())
    }
}

/// Recomputes every batch-norm layer's running statistics from a full pass
/// over `x` (population statistics at the current weights, layer by layer in
/// batch mode).
pub fn capture_running_stats(net: &mut Net, x: &Mat) -> Result<()> {
    if x.rows() < 2 {
        return Err(CoreError::DegenerateBatch);
    }
    let mut cur = x.clone();
    for layer in net.layers.iter_mut() {
        let (out, _) = forward(std::slice::from_ref(layer), &cur, StatsMode::Batch)?;
        if let Layer::Norm(norm) = layer {
            if norm.kind == NormKind::Batch {
                let mean = cur.col_mean();
                let var = cur.col_var(&mean);
                norm.running_mean = mean;
                norm.running_var = var;
            }
        }
        cur = out;
    }
    Ok(())
}

/// Full-parameter supervised training: cross-entropy, SGD with momentum 0.9,
/// seeded shuffling, minibatches of 64. Running statistics are captured once
/// from the trained weights over the whole training set.
pub fn train_source_model(
    data: &LabeledSet,
    arch: &ArchSpec,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Net> {
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = arch.build(data.dim(), data.num_classes, &mut rng)?;

    let n = data.len();
    let bs = 64.min(n);
    let momentum = 0.9;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue; // leftover single sample cannot feed batch norm
            }
            let xb = data.x.gather_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let (logits, trace) = forward(&net.layers, &xb, StatsMode::Batch)?;
            let probs = softmax(&logits)?;
            let loss = cross_entropy(&probs, &one_hot(&yb, data.num_classes))?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged { epoch });
            }
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let dprobs = cross_entropy_grad_rows(&probs, &yb, &w);
            let dlogits = softmax_vjp(&probs, &dprobs);
            backward_segment(&mut net.layers, &trace, &dlogits, &filter_trainable)?;
            sgd_step(&mut net.layers, lr, momentum);
        }
    }

    capture_running_stats(&mut net, &data.x)?;
    zero_grads(&mut net.layers);
    for layer in net.layers.iter_mut() {
        for (_, p) in layer.params_mut() {
            p.momentum_buf.fill(0.0);
        }
    }
    Ok(net)
}

/// Top-1 accuracy of a network on a labeled set.
pub fn evaluate_accuracy(net: &Net, set: &LabeledSet, mode: StatsMode) -> Result<f64> {
    let (logits, _) = forward(&net.layers, &set.x, mode)?;
    let probs = softmax(&logits)?;
    let pred = probs.argmax_rows();
    let correct = pred.iter().zip(&set.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftKind {
    GaussNoise,
    FeatureScale,
    Rotation,
    MeanShift,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::GaussNoise,
        ShiftKind::FeatureScale,
        ShiftKind::Rotation,
        ShiftKind::MeanShift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::GaussNoise => "gauss_noise",
            ShiftKind::FeatureScale => "feature_scale",
            ShiftKind::Rotation => "rotation",
            ShiftKind::MeanShift => "mean_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss_noise" => Ok(ShiftKind::GaussNoise),
            "feature_scale" => Ok(ShiftKind::FeatureScale),
            "rotation" => Ok(ShiftKind::Rotation),
            "mean_shift" => Ok(ShiftKind::MeanShift),
            other => Err(CoreError::Parse(format!("unknown shift kind '{other}'"))),
        }
    }
}

/// A covariate shift family at an integer severity in 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(CoreError::InvalidConfig(format!(
                "severity {severity} out of range 1..=5"
            )));
        }
        Ok(Self { kind, severity })
    }
}

/// Applies a shift to the features, preserving labels and sample count.
///
/// gauss_noise: `x + 0.2*s * eps`; feature_scale: `x * (1 + 0.3*s)` on a
/// seeded half of the coordinates; rotation: each seeded coordinate pair
/// rotated by `9 degrees * s`; mean_shift: `x + 0.4*s * u` for a seeded unit
/// vector `u`.
pub fn apply_shift(data: &LabeledSet, spec: ShiftSpec, seed: u64) -> Result<LabeledSet> {
    ShiftSpec::new(spec.kind, spec.severity)?;
    let s = spec.severity as f64;
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = data.x.clone();
    match spec.kind {
        ShiftKind::GaussNoise => {
            let sigma = 0.2 * s;
            for v in x.data_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += sigma * eps;
            }
        }
        ShiftKind::FeatureScale => {
            let factor = 1.0 + 0.3 * s;
            let mut coords: Vec<usize> = (0..d).collect();
            coords.shuffle(&mut rng);
            let half = &coords[..d.div_ceil(2)];
            for i in 0..x.rows() {
                let row = x.row_mut(i);
                for &j in half {
                    row[j] *= factor;
                }
            }
        }
        ShiftKind::Rotation => {
            let theta = s * 9.0 * std::f64::consts::PI / 180.0;
            let (sin, cos) = theta.sin_cos();
            let mut coords: Vec<usize> = (0..d).collect();
            coords.shuffle(&mut rng);
            for pair in coords.chunks_exact(2) {
                let (a, b) = (pair[0], pair[1]);
                for i in 0..x.rows() {
                    let va = x.get(i, a);
                    let vb = x.get(i, b);
                    x.set(i, a, va * cos - vb * sin);
                    x.set(i, b, va * sin + vb * cos);
                }
            }
        }
        ShiftKind::MeanShift => {
            let u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            let scale = 0.4 * s / norm;
            for i in 0..x.rows() {
                for (v, &uj) in x.row_mut(i).iter_mut().zip(&u) {
                    *v += scale * uj;
                }
            }
        }
    }
    Ok(LabeledSet {
        x,
        y: data.y.clone(),
        num_classes: data.num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Standard,
    ImbalancedLabel,
    SingleSample,
    MixedShift,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::ImbalancedLabel => "imbalanced_label",
            Regime::SingleSample => "single_sample",
            Regime::MixedShift => "mixed_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "imbalanced_label" => Ok(Regime::ImbalancedLabel),
            "single_sample" => Ok(Regime::SingleSample),
            "mixed_shift" => Ok(Regime::MixedShift),
            other => Err(CoreError::Parse(format!("unknown regime '{other}'"))),
        }
    }
}

/// An ordered sequence of test batches realizing one evaluation regime.
#[derive(Clone, Debug)]
pub struct StreamScenario {
    pub regime: Regime,
    pub batch_size: usize,
    /// Per-batch shift round-robin; used by the mixed regime only.
    pub shifts: Vec<ShiftSpec>,
    pub seed: u64,
}

impl StreamScenario {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.regime == Regime::SingleSample && self.batch_size != 1 {
            return Err(CoreError::InvalidConfig(
                "single_sample regime requires batch size 1".into(),
            ));
        }
        if self.regime == Regime::MixedShift && self.shifts.is_empty() {
            return Err(CoreError::InvalidConfig(
                "mixed_shift regime needs a shift list".into(),
            ));
        }
        Ok(())
    }
}

/// One test batch; the labels are for evaluation only and must never reach
/// the adaptation engine.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub x: Mat,
    pub labels: Vec<usize>,
}

fn chunk_batches(data: &LabeledSet, order: &[usize], batch_size: usize) -> Vec<StreamBatch> {
    order
        .chunks(batch_size)
        .map(|chunk| StreamBatch {
            x: data.x.gather_rows(chunk),
            labels: chunk.iter().map(|&i| data.y[i]).collect(),
        })
        .collect()
}

/// Builds the ordered batch list for a scenario.
///
/// standard: seeded shuffle, fixed-size batches. imbalanced_label: samples
/// sorted by class so every batch is as single-class as the counts allow.
/// single_sample: batch size 1 over a seeded shuffle. mixed_shift: seeded
/// shuffle of clean data, then each batch gets the next shift in seeded
/// round-robin.
pub fn make_stream(data: &LabeledSet, scenario: &StreamScenario) -> Result<Vec<StreamBatch>> {
    data.validate()?;
    scenario.validate()?;
    if scenario.batch_size > data.len() {
        return Err(CoreError::InvalidConfig(format!(
            "batch size {} exceeds {} samples",
            scenario.batch_size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    match scenario.regime {
        Regime::Standard | Regime::SingleSample => {
            Ok(chunk_batches(data, &order, scenario.batch_size))
        }
        Regime::ImbalancedLabel => {
            order.sort_by_key(|&i| data.y[i]); // stable: shuffled within class
            Ok(chunk_batches(data, &order, scenario.batch_size))
        }
        Regime::MixedShift => {
            let clean = chunk_batches(data, &order, scenario.batch_size);
            let mut batches = Vec::with_capacity(clean.len());
            for (j, batch) in clean.into_iter().enumerate() {
                let spec = scenario.shifts[j % scenario.shifts.len()];
                let batch_seed: u64 = rng.gen();
                let as_set = LabeledSet {
                    x: batch.x,
                    y: batch.labels,
                    num_classes: data.num_classes,
                };
                let shifted = apply_shift(&as_set, spec, batch_seed)?;
                batches.push(StreamBatch {
                    x: shifted.x,
                    labels: shifted.y,
                });
            }
            Ok(batches)
        }
    }
}

// ---------------------------------------------------------------------------
// Flat text serialization (fixture pinning): header "n d C", then one row of
// d feature values plus the label per line. f64 values round-trip exactly
// through their shortest decimal form.
// ---------------------------------------------------------------------------

pub fn write_labeled_set<W: Write>(set: &LabeledSet, out: &mut W) -> Result<()> {
    writeln!(out, "{} {} {}", set.len(), set.dim(), set.num_classes)?;
    for i in 0..set.len() {
        let mut line = String::new();
        for v in set.x.row(i) {
            line.push_str(&format!("{v} "));
        }
        line.push_str(&set.y[i].to_string());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_labeled_set<R: BufRead>(input: &mut R) -> Result<LabeledSet> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let parts: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CoreError::Parse(format!("bad header token '{t}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(CoreError::Parse("header must be 'n d C'".into()));
    }
    let (n, d, c) = (parts[0], parts[1], parts[2]);
    let mut x = Mat::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(CoreError::Parse(format!("expected {n} rows, got {i}")));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 1 {
            return Err(CoreError::Parse(format!("row {i} has {} fields, want {}", tokens.len(), d + 1)));
        }
        for (j, t) in tokens[..d].iter().enumerate() {
            x.set(i, j, t.parse().map_err(|_| CoreError::Parse(format!("bad value '{t}'")))?);
        }
        y.push(
            tokens[d]
                .parse()
                .map_err(|_| CoreError::Parse(format!("bad label '{}'", tokens[d])))?,
        );
    }
    let set = LabeledSet { x, y, num_classes: c };
    set.validate()?;
    Ok(set)
}

pub fn save_labeled_set(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_labeled_set(set, &mut f)
}

pub fn load_labeled_set(path: &Path) -> Result<LabeledSet> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    read_labeled_set(&mut f)
}

/// Streams serialize as a batch count followed by one labeled-set block per
/// batch (all sharing the stream's class count).
pub fn write_stream<W: Write>(batches: &[StreamBatch], num_classes: usize, out: &mut W) -> Result<()> {
    writeln!(out, "batches {}", batches.len())?;
    for b in batches {
        let set = LabeledSet {
            x: b.x.clone(),
            y: b.labels.clone(),
            num_classes,
        };
        write_labeled_set(&set, out)?;
    }
    Ok(())
}

pub fn read_stream<R: BufRead>(input: &mut R) -> Result<Vec<StreamBatch>> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let count: usize = header
        .trim()
        .strip_prefix("batches ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CoreError::Parse(format!("bad stream header '{}'", header.trim())))?;
    let mut batches = Vec::with_capacity(count);
    for _ in 0..count {
        let set = read_labeled_set(input)?;
        batches.push(StreamBatch { x: set.x, labels: set.y });
    }
    Ok(batches)
}
