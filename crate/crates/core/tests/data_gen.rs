//! Benchmark generation: source tasks, training, shifts, and streams.

use std::collections::BTreeMap;

use tta_core::data::{
    apply_shift, evaluate_accuracy, load_labeled_set, make_source_task, make_stream,
    make_task_split, read_stream, save_labeled_set, train_source_model, ArchSpec, Regime,
    ShiftKind, ShiftSpec, StreamScenario,
};
use tta_core::net::StatsMode;
use tta_core::CoreError;

#[test]
fn source_task_is_deterministic_and_balanced() {
    let a = make_source_task(7, 4, 8, 400, 6.0).unwrap();
    let b = make_source_task(7, 4, 8, 400, 6.0).unwrap();
    assert_eq!(a, b);

    let mut hist = vec![0usize; 4];
    for &y in &a.y {
        hist[y] += 1;
    }
    assert!(hist.iter().all(|&c| c == 100));
}

#[test]
fn source_task_rejects_bad_sizes() {
    assert!(matches!(
        make_source_task(0, 1, 8, 400, 6.0).unwrap_err(),
        CoreError::InvalidConfig(_)
    ));
    assert!(make_source_task(0, 4, 1, 400, 6.0).is_err());
    assert!(make_source_task(0, 4, 8, 30, 6.0).is_err());
}

#[test]
fn separable_two_class_task_trains_above_99() {
    let train = make_source_task(3, 2, 2, 200, 6.0).unwrap();
    let arch = ArchSpec::parse("4b|4b").unwrap();
    let net = train_source_model(&train, &arch, 20, 0.05, 99).unwrap();
    let acc = evaluate_accuracy(&net, &train, StatsMode::Running).unwrap();
    assert!(acc > 0.99, "accuracy {acc}");
}

#[test]
fn training_accuracy_on_default_toy_task() {
    let train = make_source_task(5, 4, 8, 400, 6.0).unwrap();
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let net = train_source_model(&train, &arch, 15, 0.05, 5).unwrap();
    let acc = evaluate_accuracy(&net, &train, StatsMode::Running).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn zero_lr_training_keeps_initial_weights() {
    let train = make_source_task(5, 4, 8, 400, 6.0).unwrap();
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let trained = train_source_model(&train, &arch, 1, 0.0, 123).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
    use rand::SeedableRng;
    let fresh = arch.build(train.dim(), train.num_classes, &mut rng).unwrap();
    for (a, b) in trained.layers.iter().zip(&fresh.layers) {
        for ((_, pa), (_, pb)) in a.params().into_iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let train = make_source_task(5, 4, 8, 400, 6.0).unwrap();
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let a = train_source_model(&train, &arch, 5, 0.05, 11).unwrap();
    let b = train_source_model(&train, &arch, 5, 0.05, 11).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for ((_, pa), (_, pb)) in la.params().into_iter().zip(lb.params()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}

#[test]
fn shifts_preserve_labels_and_counts() {
    let set = make_source_task(9, 4, 8, 400, 6.0).unwrap();
    for kind in ShiftKind::ALL {
        let spec = ShiftSpec::new(kind, 3).unwrap();
        let shifted = apply_shift(&set, spec, 42).unwrap();
        assert_eq!(shifted.y, set.y);
        assert_eq!(shifted.len(), set.len());
        assert_eq!(shifted.dim(), set.dim());
    }
    assert!(ShiftSpec::new(ShiftKind::GaussNoise, 0).is_err());
    assert!(ShiftSpec::new(ShiftKind::GaussNoise, 6).is_err());
}

#[test]
fn rotation_preserves_row_norms() {
    let set = make_source_task(9, 4, 8, 400, 6.0).unwrap();
    let spec = ShiftSpec::new(ShiftKind::Rotation, 5).unwrap();
    let rotated = apply_shift(&set, spec, 7).unwrap();
    for i in 0..set.len() {
        let n0: f64 = set.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = rotated.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-9, "row {i}: {n0} vs {n1}");
    }
}

#[test]
fn severity_five_degrades_frozen_source_accuracy() {
    let (train, test) = make_task_split(15, 4, 8, 400, 400, 6.0).unwrap();
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let net = train_source_model(&train, &arch, 15, 0.05, 15).unwrap();
    let clean = evaluate_accuracy(&net, &test, StatsMode::Running).unwrap();
    for kind in ShiftKind::ALL {
        let shifted = apply_shift(&test, ShiftSpec::new(kind, 5).unwrap(), 16).unwrap();
        let acc = evaluate_accuracy(&net, &shifted, StatsMode::Running).unwrap();
        assert!(
            acc < clean,
            "{}: severity 5 acc {acc} not below clean {clean}",
            kind.name()
        );
    }
}

#[test]
fn imbalanced_stream_first_batch_is_single_class() {
    let set = make_source_task(21, 4, 8, 256, 6.0).unwrap();
    let scenario = StreamScenario {
        regime: Regime::ImbalancedLabel,
        batch_size: 64,
        shifts: vec![],
        seed: 0,
    };
    let batches = make_stream(&set, &scenario).unwrap();
    assert_eq!(batches.len(), 4);
    let first: Vec<usize> = batches[0].labels.clone();
    assert!(first.iter().all(|&y| y == first[0]));
}

#[test]
fn single_sample_stream_has_n_unit_batches() {
    let set = make_source_task(22, 4, 8, 100, 6.0).unwrap();
    let scenario = StreamScenario {
        regime: Regime::SingleSample,
        batch_size: 1,
        shifts: vec![],
        seed: 1,
    };
    let batches = make_stream(&set, &scenario).unwrap();
    assert_eq!(batches.len(), 100);
    assert!(batches.iter().all(|b| b.x.rows() == 1));

    let bad = StreamScenario {
        regime: Regime::SingleSample,
        batch_size: 2,
        shifts: vec![],
        seed: 1,
    };
    assert!(make_stream(&set, &bad).is_err());
}

#[test]
fn streams_are_deterministic_and_permutations() {
    let set = make_source_task(23, 4, 8, 200, 6.0).unwrap();
    let scenario = StreamScenario {
        regime: Regime::Standard,
        batch_size: 32,
        shifts: vec![],
        seed: 5,
    };
    let a = make_stream(&set, &scenario).unwrap();
    let b = make_stream(&set, &scenario).unwrap();
    assert_eq!(a, b);

    // Multiset of (x, y) across batches equals the input multiset.
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for batch in &a {
        for i in 0..batch.x.rows() {
            let key = format!("{:?}|{}", batch.x.row(i), batch.labels[i]);
            *seen.entry(key).or_default() += 1;
        }
    }
    let mut expect: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..set.len() {
        let key = format!("{:?}|{}", set.x.row(i), set.y[i]);
        *expect.entry(key).or_default() += 1;
    }
    assert_eq!(seen, expect);
}

#[test]
fn mixed_stream_rotates_shifts() {
    let set = make_source_task(24, 4, 8, 256, 6.0).unwrap();
    let shifts: Vec<ShiftSpec> = ShiftKind::ALL
        .iter()
        .map(|&k| ShiftSpec::new(k, 5).unwrap())
        .collect();
    let scenario = StreamScenario {
        regime: Regime::MixedShift,
        batch_size: 64,
        shifts,
        seed: 9,
    };
    let batches = make_stream(&set, &scenario).unwrap();
    assert_eq!(batches.len(), 4);
    // Labels are preserved through the per-batch shifts: same label multiset.
    let mut labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
    labels.sort_unstable();
    let mut expect = set.y.clone();
    expect.sort_unstable();
    assert_eq!(labels, expect);
}

#[test]
fn labeled_set_text_roundtrip_is_bitwise() {
    let set = make_source_task(31, 3, 5, 60, 6.0).unwrap();
    let dir = std::env::temp_dir().join("tta_core_data_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("set.txt");
    save_labeled_set(&set, &path).unwrap();
    let loaded = load_labeled_set(&path).unwrap();
    assert_eq!(set, loaded);
    std::fs::remove_file(&path).ok();
}

#[test]
fn stream_text_roundtrip() {
    let set = make_source_task(32, 3, 5, 60, 6.0).unwrap();
    let scenario = StreamScenario {
        regime: Regime::Standard,
        batch_size: 16,
        shifts: vec![],
        seed: 2,
    };
    let batches = make_stream(&set, &scenario).unwrap();
    let mut buf: Vec<u8> = Vec::new();
    tta_core::data::write_stream(&batches, set.num_classes, &mut buf).unwrap();
    let mut reader = std::io::BufReader::new(&buf[..]);
    let loaded = read_stream(&mut reader).unwrap();
    assert_eq!(batches, loaded);
}

#[test]
fn arch_spec_parse_and_display() {
    let a = ArchSpec::parse("64b,32l|16|").unwrap_err(); // two split markers
    assert!(matches!(a, CoreError::Parse(_)));

    let spec = ArchSpec::parse("64b,32l|16").unwrap();
    assert_eq!(spec.blocks.len(), 3);
    assert_eq!(spec.split_block, 2);
    assert_eq!(spec.to_string(), "64b,32l|16");

    let trailing = ArchSpec::parse("64b,64b|").unwrap();
    assert_eq!(trailing.split_block, 2);
    assert_eq!(trailing.to_string(), "64b,64b|");

    assert!(ArchSpec::parse("|64b").is_err()); // nothing shallow
    assert!(ArchSpec::parse("64x|64").is_err());
}
