//! Adaptation diagnostics: entropy distribution, per-round entropy movement,
//! selection churn, and PRS counts for one configuration.
//!
//! cargo run --example diagnose -- [sep] [epochs] [lr_shallow] [lr_adapt] [seed] [shift]

use tta_core::data::{apply_shift, make_stream, make_task_split, train_source_model, ShiftKind, ShiftSpec};
use tta_core::loss::entropy_rows;
use tta_core::tta::{split_and_clone, AdaptConfig, Method};
use tta_harness::config::{derive_seed, RunConfig, TaskSpec, SEED_SHIFT};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr_s: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let lr_a: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let shift = args
        .get(6)
        .map(|s| ShiftKind::parse(s).unwrap())
        .unwrap_or(ShiftKind::GaussNoise);

    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec { separation: sep, ..TaskSpec::default() };
    cfg.train.epochs = epochs;
    cfg.adapt.lr_shallow = lr_s;
    cfg.adapt.lr_adapt = lr_a;
    cfg.adapt.method = Method::Poem;
    cfg.shift = shift;

    let t = &cfg.task;
    let (train, test) = make_task_split(seed, t.classes, t.dim, t.n_train, t.n_test, t.separation).unwrap();
    let net = train_source_model(&train, &cfg.arch, cfg.train.epochs, cfg.train.lr, seed).unwrap();
    let shifted = apply_shift(
        &test,
        ShiftSpec { kind: cfg.shift, severity: cfg.severity },
        derive_seed(seed, SEED_SHIFT),
    )
    .unwrap();
    let batches = make_stream(&shifted, &cfg.scenario(seed)).unwrap();

    let threshold = cfg.adapt.entropy_factor * (t.classes as f64).ln();
    let mut state = split_and_clone(&net, &cfg.adapt).unwrap();

    println!("threshold={threshold:.4}");
    let mut total_prs = 0usize;
    let mut moves: Vec<f64> = Vec::new();
    let mut band_count = 0usize;
    let mut above = 0usize;
    let mut total = 0usize;
    for (bi, b) in batches.iter().enumerate() {
        let (_, trace) = state.adapt_batch_poem(&b.x, &cfg.adapt).unwrap();
        let e0s = &trace.selections[0].entropies;
        let elast = &trace.selections.last().unwrap().entropies;
        total_prs += trace.potentially_reliable.len();
        for (a, z) in e0s.iter().zip(elast) {
            moves.push((a - z).abs());
        }
        above += e0s.iter().filter(|&&e| e >= threshold).count();
        band_count += e0s
            .iter()
            .filter(|&&e| e >= threshold && e < threshold + 0.1)
            .count();
        total += e0s.len();
        if bi % 8 == 0 {
            let mut es = e0s.clone();
            es.sort_by(f64::total_cmp);
            println!(
                "batch {bi:2}: |S0|={:2} rounds={} prs={} e(min/med/max)={:.3}/{:.3}/{:.3}",
                trace.selections[0].selected.len(),
                trace.selections.len() - 1,
                trace.potentially_reliable.len(),
                es[0],
                es[es.len() / 2],
                es[es.len() - 1]
            );
        }
    }
    moves.sort_by(f64::total_cmp);
    println!(
        "frac_above_threshold={:.3} band(+0.1)={:.3} movement med={:.4} p90={:.4} total_prs={}",
        above as f64 / total as f64,
        band_count as f64 / total as f64,
        moves[moves.len() / 2],
        moves[(moves.len() * 9) / 10],
        total_prs
    );

    // accuracy summary for the three methods
    for method in [Method::NoAdapt, Method::Tent, Method::Poem] {
        let mut c2 = cfg.clone();
        c2.adapt.method = method;
        let mut adapter = tta_core::tta::Adapter::new(net.clone(), &c2.adapt).unwrap();
        let mut correct = 0usize;
        let mut n = 0usize;
        for b in &batches {
            let (pred, _) = adapter.adapt_batch(&b.x, &c2.adapt).unwrap();
            correct += pred
                .pseudo_labels
                .iter()
                .zip(&b.labels)
                .filter(|(p, y)| p == y)
                .count();
            n += b.labels.len();
        }
        println!("{}: acc={:.4}", method.name(), correct as f64 / n as f64);
    }
    let (ent_clean, _) = {
        let (logits, _) = tta_core::net::forward(&net.layers, &test.x, tta_core::net::StatsMode::Running).unwrap();
        let p = tta_core::loss::softmax(&logits).unwrap();
        let e = entropy_rows(&p).unwrap();
        (e.iter().sum::<f64>() / e.len() as f64, 0)
    };
    println!("clean mean entropy (running stats): {ent_clean:.4}");
}
