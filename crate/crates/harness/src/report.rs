//! Report generation: pure functions from persisted records (plus the
//! timing sidecars for throughput) to CSV tables.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use tta_core::{CoreError, Result};

use crate::records::{read_records, Record, SummaryRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Summary,
    Prs,
    Accounting,
    Sweep,
}

impl ReportKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(ReportKind::Summary),
            "prs" => Ok(ReportKind::Prs),
            "accounting" => Ok(ReportKind::Accounting),
            "sweep" => Ok(ReportKind::Sweep),
            other => Err(CoreError::Parse(format!("unknown report kind '{other}'"))),
        }
    }
}

/// Loads records from one `.jsonl` file or every `.jsonl` file in a
/// directory (sorted by name for determinism).
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    if files.is_empty() {
        return Err(CoreError::InvalidConfig(format!(
            "no .jsonl metrics files under {}",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for f in files {
        let mut reader = BufReader::new(std::fs::File::open(&f)?);
        records.extend(read_records(&mut reader)?);
    }
    Ok(records)
}

/// Total wall-clock microseconds per run id, from the timing sidecars next
/// to the metrics files.
pub fn load_timings(path: &Path) -> BTreeMap<String, u128> {
    let mut out = BTreeMap::new();
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        match path.parent() {
            Some(p) => p.to_path_buf(),
            None => return out,
        }
    };
    let Ok(entries) = std::fs::read_dir(&dir) else {
        return out;
    };
    for entry in entries.flatten() {
        let p = entry.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(run_id) = name.strip_suffix(".timing.csv") else {
            continue;
        };
        let Ok(text) = std::fs::read_to_string(&p) else {
            continue;
        };
        let total: u128 = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1))
            .filter_map(|t| t.parse::<u128>().ok())
            .sum();
        out.insert(run_id.to_string(), total);
    }
    out
}

fn summaries(records: &[Record]) -> Vec<&SummaryRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Summary(s) => Some(s),
            _ => None,
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "na".into())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// One row per run: the headline accuracies and counters.
pub fn report_summary(records: &[Record]) -> String {
    let mut out = String::from(
        "run_id,method,scenario,shift,severity,entropy_factor,seed,batches,samples,train_accuracy,accuracy,accuracy_pre,accuracy_post,mean_selected,prs_total\n",
    );
    let mut rows = summaries(records);
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    for s in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.run_id,
            s.method,
            s.scenario,
            s.shift,
            s.severity,
            s.entropy_factor,
            s.seed,
            s.batches,
            s.samples,
            s.train_accuracy,
            s.accuracy,
            s.accuracy_pre,
            fmt_opt(s.accuracy_post),
            s.mean_selected,
            s.prs_total,
        ));
    }
    out
}

/// Pseudo-label accuracy of the potentially-reliable set against the two
/// entropy-range control groups, per run. Runs with an empty PRS get an
/// explicit marker.
pub fn report_prs(records: &[Record]) -> String {
    let mut out = String::from(
        "run_id,method,seed,prs_count,prs_acc,group1_count,group1_acc,group2_count,group2_acc,empty_prs\n",
    );
    let mut rows = summaries(records);
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    for s in rows {
        let ratio = |c: usize, n: usize| {
            if n == 0 {
                "na".to_string()
            } else {
                (c as f64 / n as f64).to_string()
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.run_id,
            s.method,
            s.seed,
            s.prs_total,
            ratio(s.prs_correct, s.prs_total),
            s.group1_total,
            ratio(s.group1_correct, s.group1_total),
            s.group2_total,
            ratio(s.group2_correct, s.group2_total),
            s.prs_total == 0,
        ));
    }
    out
}

/// Forward/backward totals per method, the per-batch forward bound, and
/// throughput when timing sidecars are available.
pub fn report_accounting(records: &[Record], timings: &BTreeMap<String, u128>) -> String {
    let mut out = String::from(
        "method,runs,batches,samples,total_forwards,total_backwards,forwards_per_batch,backwards_per_batch,forward_bound,bound_ok,batches_per_sec\n",
    );
    let mut by_method: BTreeMap<&str, Vec<&SummaryRecord>> = BTreeMap::new();
    for s in summaries(records) {
        by_method.entry(&s.method).or_default().push(s);
    }
    for (method, rows) in by_method {
        let runs = rows.len();
        let batches: usize = rows.iter().map(|s| s.batches).sum();
        let samples: usize = rows.iter().map(|s| s.samples).sum();
        let forwards: usize = rows.iter().map(|s| s.total_forwards).sum();
        let backwards: usize = rows.iter().map(|s| s.total_backwards).sum();
        let bound = rows.iter().map(|s| s.max_iters).max().unwrap_or(0) + 1;
        let bound_ok = forwards <= bound * batches;
        let total_us: u128 = rows
            .iter()
            .filter_map(|s| timings.get(&s.run_id))
            .sum();
        let throughput = if total_us > 0 {
            format!("{}", batches as f64 / (total_us as f64 / 1e6))
        } else {
            "na".to_string()
        };
        out.push_str(&format!(
            "{method},{runs},{batches},{samples},{forwards},{backwards},{},{},{bound},{bound_ok},{throughput}\n",
            forwards as f64 / batches as f64,
            backwards as f64 / batches as f64,
        ));
    }
    out
}

/// Accuracy per (method, entropy factor) with across-seed std, followed by
/// per-method across-factor stability rows.
pub fn report_sweep(records: &[Record]) -> String {
    let mut out =
        String::from("section,method,entropy_factor,mean_accuracy,std_accuracy,n_seeds\n");
    // (method, factor-string) -> accuracies over seeds
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    // (method, seed) -> accuracies over factors
    let mut per_seed: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for s in summaries(records) {
        cells
            .entry((s.method.clone(), format!("{}", s.entropy_factor)))
            .or_default()
            .push(s.accuracy);
        per_seed
            .entry((s.method.clone(), s.seed))
            .or_default()
            .push(s.accuracy);
    }
    for ((method, factor), accs) in &cells {
        let (m, sd) = mean_std(accs);
        out.push_str(&format!(
            "cell,{method},{factor},{m},{sd},{}\n",
            accs.len()
        ));
    }
    // Across-factor stability: std over factors per seed, averaged per method.
    let mut stds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((method, _seed), accs) in &per_seed {
        let (_, sd) = mean_std(accs);
        stds.entry(method.clone()).or_default().push(sd);
    }
    for (method, sds) in stds {
        let (m, _) = mean_std(&sds);
        out.push_str(&format!("across_factor_std,{method},all,{m},na,{}\n", sds.len()));
    }
    out
}

pub fn render(kind: ReportKind, records: &[Record], timings: &BTreeMap<String, u128>) -> String {
    match kind {
        ReportKind::Summary => report_summary(records),
        ReportKind::Prs => report_prs(records),
        ReportKind::Accounting => report_accounting(records, timings),
        ReportKind::Sweep => report_sweep(records),
    }
}
