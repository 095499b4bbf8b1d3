//! Drives one method over one stream, batch by batch, producing metrics
//! records; loops over seeds for an experiment and over (method, factor)
//! cells for threshold sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use tta_core::data::{apply_shift, make_stream, make_task_split, train_source_model, ShiftSpec};
use tta_core::loss::entropy_rows;
use tta_core::net::Network;
use tta_core::tta::{Adapter, Method, Prediction};
use tta_core::{CoreError, Mat, Result};

use crate::config::{derive_seed, RunConfig, SEED_SHIFT};
use crate::records::{BatchRecord, Record, SummaryRecord, SCHEMA_VERSION};
use crate::seal::SealedLabels;

/// Trained source models keyed by everything that determines them (seed,
/// task, architecture, training settings), shared across grid cells.
#[derive(Default)]
pub struct SourceCache {
    nets: BTreeMap<(u64, String), (Network<f64>, f64)>,
}

impl SourceCache {
    fn key(cfg: &RunConfig, seed: u64) -> (u64, String) {
        let t = &cfg.task;
        (
            seed,
            format!(
                "{}|c{}d{}n{}t{}s{}|e{}lr{}",
                cfg.arch, t.classes, t.dim, t.n_train, t.n_test, t.separation,
                cfg.train.epochs, cfg.train.lr
            ),
        )
    }

    pub fn get_or_train(&mut self, cfg: &RunConfig, seed: u64) -> Result<(Network<f64>, f64)> {
        let key = Self::key(cfg, seed);
        if let Some((net, acc)) = self.nets.get(&key) {
            return Ok((net.clone(), *acc));
        }
        let t = &cfg.task;
        let (train, _) = make_task_split(seed, t.classes, t.dim, t.n_train, t.n_test, t.separation)?;
        let net = train_source_model(&train, &cfg.arch, cfg.train.epochs, cfg.train.lr, seed)?;
        let acc = tta_core::data::evaluate_accuracy(&net, &train, tta_core::net::StatsMode::Running)?;
        self.nets.insert(key, (net.clone(), acc));
        Ok((net, acc))
    }
}

/// One per-sample banding point: initial entropy, entropy-gradient norm, and
/// whether the pseudo-label at probe time was correct.
#[derive(Clone, Copy, Debug)]
pub struct BandPoint {
    pub entropy: f64,
    pub grad_norm: f64,
    pub correct: bool,
}

/// Everything one (config, seed) cell produces.
pub struct CellOutput {
    pub records: Vec<Record>,
    pub summary: SummaryRecord,
    /// Per-batch wall-clock, microseconds; non-deterministic, persisted to a
    /// sidecar rather than the metrics file.
    pub timings_us: Vec<u128>,
    pub bands: Vec<BandPoint>,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct GroupTally {
    prs_count: usize,
    prs_correct: usize,
    g1_count: usize,
    g1_correct: usize,
    g2_count: usize,
    g2_correct: usize,
}

/// Potentially-reliable group bookkeeping for one batch.
///
/// The high-entropy axis above the threshold is divided into bins of width
/// `0.1 * ln C`; group 1 is every initially-high-entropy sample falling in a
/// bin that contains at least one PRS sample (the samples "sharing the PRS
/// entropy range"), group 2 is group 1 minus the PRS. Pseudo-label accuracy
/// is measured on the final prediction.
fn prs_groups(
    initial_entropies: &[f64],
    threshold: f64,
    bin_width: f64,
    prs: &[usize],
    final_pred: &Prediction<f64>,
    labels: &[usize],
) -> Option<GroupTally> {
    if prs.is_empty() {
        return None;
    }
    let bin_of = |e: f64| ((e - threshold) / bin_width).floor() as i64;
    let prs_bins: Vec<i64> = {
        let mut bins: Vec<i64> = prs
            .iter()
            .map(|&i| bin_of(initial_entropies[i].max(threshold)))
            .collect();
        bins.sort_unstable();
        bins.dedup();
        bins
    };
    let mut tally = GroupTally {
        prs_count: 0,
        prs_correct: 0,
        g1_count: 0,
        g1_correct: 0,
        g2_count: 0,
        g2_correct: 0,
    };
    for (i, &e) in initial_entropies.iter().enumerate() {
        let in_prs = prs.binary_search(&i).is_ok();
        let correct = final_pred.pseudo_labels[i] == labels[i];
        if in_prs {
            tally.prs_count += 1;
            tally.prs_correct += correct as usize;
        }
        let high = e >= threshold;
        if high && prs_bins.binary_search(&bin_of(e)).is_ok() {
            tally.g1_count += 1;
            tally.g1_correct += correct as usize;
            if !in_prs {
                tally.g2_count += 1;
                tally.g2_correct += correct as usize;
            }
        }
    }
    Some(tally)
}

/// Runs one (config, seed) cell: build task, train or fetch the source
/// model, build the stream, drive the method batch by batch.
pub fn run_cell(cfg: &RunConfig, seed: u64, cache: &mut SourceCache) -> Result<CellOutput> {
    cfg.validate()?;
    let t = &cfg.task;
    let (_, test) = make_task_split(seed, t.classes, t.dim, t.n_train, t.n_test, t.separation)?;
    let (net, train_accuracy) = cache.get_or_train(cfg, seed)?;

    let scenario = cfg.scenario(seed);
    let stream_data = match (cfg.regime, cfg.shift) {
        (tta_core::data::Regime::MixedShift, _) | (_, None) => test,
        (_, Some(kind)) => apply_shift(
            &test,
            ShiftSpec { kind, severity: cfg.severity },
            derive_seed(seed, SEED_SHIFT),
        )?,
    };
    let batches = make_stream(&stream_data, &scenario)?;
    let sealed: Vec<(Mat, SealedLabels)> = batches
        .into_iter()
        .map(|b| (b.x, SealedLabels::new(b.labels)))
        .collect();

    let mut adapter = Adapter::new(net, &cfg.adapt)?;
    let threshold = cfg.adapt.entropy_factor * (t.classes as f64).ln();
    let run_id = cfg.run_id(seed);
    let method = cfg.adapt.method;

    let mut records = Vec::with_capacity(sealed.len() + 1);
    let mut timings_us = Vec::with_capacity(sealed.len());
    let mut bands = Vec::new();

    let mut samples = 0usize;
    let mut correct_natural = 0usize;
    let mut correct_pre = 0usize;
    let mut correct_post = 0usize;
    let mut total_forwards = 0usize;
    let mut total_backwards = 0usize;
    let mut selected_sum = 0usize;
    let mut prs_total = 0usize;
    let mut prs_correct_total = 0usize;
    let mut g1_total = 0usize;
    let mut g1_correct_total = 0usize;
    let mut g2_total = 0usize;
    let mut g2_correct_total = 0usize;

    for (batch_index, (x, seal)) in sealed.iter().enumerate() {
        if cfg.bands {
            if let Some(state) = adapter.poem_state_mut() {
                let (norms, probe_pred) = state.per_sample_grad_norms(x)?;
                let ent = entropy_rows(&probe_pred.probs_fused)?;
                let labels = seal.read();
                for i in 0..x.rows() {
                    bands.push(BandPoint {
                        entropy: ent[i],
                        grad_norm: norms[i],
                        correct: probe_pred.pseudo_labels[i] == labels[i],
                    });
                }
            }
        }

        let reads_before = seal.reads();
        let started = Instant::now();
        let (pred, trace) = adapter.adapt_batch(x, &cfg.adapt)?;
        timings_us.push(started.elapsed().as_micros());
        if seal.reads() != reads_before {
            return Err(CoreError::InvalidConfig(
                "label seal violated: labels were read during adaptation".into(),
            ));
        }

        let labels = seal.read();
        let acc_pre = accuracy(&trace.initial_prediction.pseudo_labels, labels);
        let is_poem = method == Method::Poem;
        let acc_post = is_poem.then(|| accuracy(&pred.pseudo_labels, labels));
        let acc = acc_post.unwrap_or(acc_pre);

        let first_sel = &trace.selections[0];
        let last_sel = trace.selections.last().expect("non-empty selections");
        let mean_entropy_pre = mean(&first_sel.entropies);
        let mean_entropy_post = is_poem.then(|| mean(&last_sel.entropies));
        let grad_norm_mean = mean(&trace.grad_norms);

        let tally = if is_poem {
            prs_groups(
                &first_sel.entropies,
                threshold,
                0.1 * (t.classes as f64).ln(),
                &trace.potentially_reliable,
                &pred,
                labels,
            )
        } else {
            None
        };

        let n = labels.len();
        samples += n;
        correct_pre += (acc_pre * n as f64).round() as usize;
        if let Some(ap) = acc_post {
            correct_post += (ap * n as f64).round() as usize;
        }
        correct_natural += (acc * n as f64).round() as usize;
        total_forwards += trace.forward_count;
        total_backwards += trace.backward_count;
        selected_sum += first_sel.selected.len();
        if let Some(g) = &tally {
            prs_total += g.prs_count;
            prs_correct_total += g.prs_correct;
            g1_total += g.g1_count;
            g1_correct_total += g.g1_correct;
            g2_total += g.g2_count;
            g2_correct_total += g.g2_correct;
        }

        records.push(Record::Batch(BatchRecord {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.clone(),
            method: method.name().into(),
            scenario: cfg.regime.name().into(),
            shift: cfg.shift_label(),
            severity: cfg.severity,
            entropy_factor: cfg.adapt.entropy_factor,
            max_iters: cfg.adapt.max_iters,
            seed,
            batch_index,
            batch_size: n,
            acc,
            acc_pre,
            acc_post,
            n_selected: first_sel.selected.len(),
            n_selected_final: is_poem.then(|| last_sel.selected.len()),
            n_prs: trace.potentially_reliable.len(),
            mean_entropy_pre,
            mean_entropy_post,
            mean_grad_norm: grad_norm_mean,
            forwards: trace.forward_count,
            backwards: trace.backward_count,
            prs_count: tally.as_ref().map(|g| g.prs_count),
            prs_correct: tally.as_ref().map(|g| g.prs_correct),
            group1_count: tally.as_ref().map(|g| g.g1_count),
            group1_correct: tally.as_ref().map(|g| g.g1_correct),
            group2_count: tally.as_ref().map(|g| g.g2_count),
            group2_correct: tally.as_ref().map(|g| g.g2_correct),
        }));
    }

    let batches_n = timings_us.len();
    let summary = SummaryRecord {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.clone(),
        method: method.name().into(),
        scenario: cfg.regime.name().into(),
        shift: cfg.shift_label(),
        severity: cfg.severity,
        entropy_factor: cfg.adapt.entropy_factor,
        max_iters: cfg.adapt.max_iters,
        seed,
        batches: batches_n,
        samples,
        train_accuracy,
        accuracy: correct_natural as f64 / samples as f64,
        accuracy_pre: correct_pre as f64 / samples as f64,
        accuracy_post: (method == Method::Poem).then(|| correct_post as f64 / samples as f64),
        mean_selected: selected_sum as f64 / batches_n as f64,
        total_forwards,
        total_backwards,
        prs_total,
        prs_correct: prs_correct_total,
        group1_total: g1_total,
        group1_correct: g1_correct_total,
        group2_total: g2_total,
        group2_correct: g2_correct_total,
    };
    records.push(Record::Summary(summary.clone()));

    Ok(CellOutput {
        records,
        summary,
        timings_us,
        bands,
    })
}

/// Serializes the banding points into a decile grid CSV: rows are (entropy
/// decile, gradient-norm decile, count, pseudo-label accuracy).
pub fn bands_to_csv(points: &[BandPoint]) -> String {
    let mut out = String::from("entropy_decile,grad_decile,count,pseudo_correct,pseudo_acc\n");
    if points.is_empty() {
        return out;
    }
    let decile_of = |values: &[f64], v: f64| -> usize {
        // rank within sorted values, clamped to 0..=9
        let idx = values.partition_point(|&u| u < v);
        (idx * 10 / values.len()).min(9)
    };
    let mut ent: Vec<f64> = points.iter().map(|p| p.entropy).collect();
    let mut grad: Vec<f64> = points.iter().map(|p| p.grad_norm).collect();
    ent.sort_by(f64::total_cmp);
    grad.sort_by(f64::total_cmp);
    let mut count = [[0usize; 10]; 10];
    let mut hits = [[0usize; 10]; 10];
    for p in points {
        let e = decile_of(&ent, p.entropy);
        let g = decile_of(&grad, p.grad_norm);
        count[e][g] += 1;
        hits[e][g] += p.correct as usize;
    }
    for e in 0..10 {
        for g in 0..10 {
            if count[e][g] == 0 {
                continue;
            }
            let acc = hits[e][g] as f64 / count[e][g] as f64;
            out.push_str(&format!("{e},{g},{},{},{acc}\n", count[e][g], hits[e][g]));
        }
    }
    out
}

fn timing_csv(timings: &[u128]) -> String {
    let mut out = String::from("batch_index,wall_us\n");
    for (i, t) in timings.iter().enumerate() {
        out.push_str(&format!("{i},{t}\n"));
    }
    out
}

/// Persists one cell: metrics records (deterministic), the wall-clock
/// sidecar, and optionally the banding grid. Files are staged in memory and
/// written whole.
pub fn persist_cell(cfg: &RunConfig, seed: u64, cell: &CellOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let run_id = cfg.run_id(seed);
    let mut buf = Vec::new();
    crate::records::write_records(&cell.records, &mut buf)?;
    std::fs::write(dir.join(format!("{run_id}.jsonl")), buf)?;
    std::fs::write(
        dir.join(format!("{run_id}.timing.csv")),
        timing_csv(&cell.timings_us),
    )?;
    if cfg.bands {
        std::fs::write(
            dir.join(format!("{run_id}.bands.csv")),
            bands_to_csv(&cell.bands),
        )?;
    }
    Ok(())
}

/// Runs the configured method over every seed, persisting one metrics file
/// and one timing sidecar per seed under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<SummaryRecord>> {
    cfg.validate()?;
    let mut cache = SourceCache::default();
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let cell = run_cell(cfg, seed, &mut cache)?;
        persist_cell(cfg, seed, &cell, &cfg.out)?;
        summaries.push(cell.summary);
    }
    Ok(summaries)
}

/// Runs each method at each entropy factor over the seed list, persisting
/// every cell and returning all summaries.
pub fn sweep_threshold(
    base: &RunConfig,
    factors: &[f64],
    methods: &[Method],
) -> Result<Vec<SummaryRecord>> {
    if factors.is_empty() {
        return Err(CoreError::InvalidConfig("factor list is empty".into()));
    }
    if factors.iter().any(|&f| !(f > 0.0)) {
        return Err(CoreError::InvalidConfig("factors must be positive".into()));
    }
    base.validate()?;
    let mut cache = SourceCache::default();
    let mut summaries = Vec::new();
    for &method in methods {
        for &factor in factors {
            let mut cfg = base.clone();
            cfg.adapt.method = method;
            cfg.adapt.entropy_factor = factor;
            cfg.bands = false;
            cfg.validate()?;
            for &seed in &cfg.seeds {
                let cell = run_cell(&cfg, seed, &mut cache)?;
                persist_cell(&cfg, seed, &cell, &cfg.out)?;
                summaries.push(cell.summary);
            }
        }
    }
    Ok(summaries)
}
