//! Engine behavior: model splitting, selection, fusion, the per-batch
//! adaptation loop, and the baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tta_core::data::{make_source_task, train_source_model, ArchSpec};
use tta_core::gradcheck::finite_diff_grad;
use tta_core::layer::{Layer, ParamKind};
use tta_core::loss::entropy_rows;
use tta_core::matrix::Matrix;
use tta_core::net::{forward, StatsMode};
use tta_core::tta::{
    adapt_batch_no_adapt, select_reliable, split_and_clone, AdaptConfig, Adapter, Method,
    PoemState, TentState,
};
use tta_core::{CoreError, Mat, Net};

fn toy_net(seed: u64) -> Net {
    let arch = ArchSpec::parse("6b|6b").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.build(4, 4, &mut rng).unwrap()
}

fn toy_batch(seed: u64, rows: usize, cols: usize) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Mat::zeros(rows, cols);
    for v in x.data_mut() {
        use rand::Rng;
        *v = rng.gen_range(-2.0..2.0);
    }
    x
}

fn trained_net(seed: u64) -> (Net, tta_core::data::LabeledSet) {
    let train = make_source_task(seed, 4, 8, 400, 6.0).unwrap();
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let net = train_source_model(&train, &arch, 10, 0.05, seed ^ 0x5eed).unwrap();
    (net, train)
}

fn params_snapshot(layers: &[Layer<f64>]) -> Vec<Matrix<f64>> {
    layers
        .iter()
        .flat_map(|l| l.params().into_iter().map(|(_, p)| p.value.clone()))
        .collect()
}

#[test]
fn threshold_matches_factor_times_log_classes() {
    let arch = ArchSpec::parse("8b|8b").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = arch.build(16, 1000, &mut rng).unwrap();
    let cfg = AdaptConfig::<f64>::default(); // factor 0.4
    let state = split_and_clone(&net, &cfg).unwrap();
    assert!((state.entropy_threshold - 2.76310).abs() < 1e-5);
    assert_eq!(state.entropy_threshold, 0.4 * (1000f64).ln());
}

#[test]
fn clone_identity_and_frozen_source() {
    let net = toy_net(2);
    let cfg = AdaptConfig::default();
    let state = split_and_clone(&net, &cfg).unwrap();

    // Branch copies are value-identical and the source branch is frozen.
    assert_eq!(
        params_snapshot(&state.source_branch),
        params_snapshot(&state.adapt_branch)
    );
    for layer in &state.source_branch {
        for (_, p) in layer.params() {
            assert!(!p.trainable);
        }
    }
    for layer in &state.shallow {
        for (kind, p) in layer.params() {
            let expect = matches!(kind, ParamKind::NormGamma | ParamKind::NormBeta);
            assert_eq!(p.trainable, expect);
        }
    }

    // Immediately after cloning the two heads agree, so fusion is a no-op.
    let x = toy_batch(3, 6, 4);
    let (pred, _) = state.predict_fused(&x, StatsMode::Batch).unwrap();
    assert_eq!(pred.probs_source, pred.probs_adapt);
    assert_eq!(pred.probs_fused, pred.probs_source);

    // And the fused pseudo-labels equal the unsplit network's argmax.
    let (logits, _) = forward(&net.layers, &x, StatsMode::Batch).unwrap();
    let source_labels = tta_core::loss::softmax(&logits).unwrap().argmax_rows();
    assert_eq!(pred.pseudo_labels, source_labels);
}

#[test]
fn split_requires_a_norm_layer_somewhere() {
    let arch = ArchSpec::parse("6|6").unwrap(); // no norms at all
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = arch.build(4, 4, &mut rng).unwrap();
    let err = split_and_clone(&net, &AdaptConfig::default()).unwrap_err();
    assert!(matches!(err, CoreError::NothingToAdapt));
}

#[test]
fn uniform_sample_not_selected_at_exact_threshold() {
    // factor 1.0 over 4 classes puts the threshold at ln 4; a uniform
    // prediction has entropy exactly ln 4 and the comparison is strict.
    let e = entropy_rows(&Mat::from_rows(&[vec![0.25, 0.25, 0.25, 0.25]])).unwrap();
    let sel = select_reliable(&e, 1.0 * 4f64.ln(), 0);
    assert!(sel.selected.is_empty());
}

#[test]
fn select_reliable_examples() {
    let e = [0.1, 3.0, 2.0, 2.7];
    assert_eq!(select_reliable(&e, 2.5, 0).selected, vec![0, 2]);
    assert_eq!(select_reliable(&e, 0.0, 0).selected, Vec::<usize>::new());
    assert_eq!(select_reliable(&e, 4f64.ln() + 10.0, 0).selected, vec![0, 1, 2, 3]);
}

#[test]
fn fusion_arithmetic() {
    let pg = Mat::from_rows(&[vec![0.8, 0.2]]);
    let pa = Mat::from_rows(&[vec![0.4, 0.6]]);
    let fused = pg.scale(0.5).add(&pa.scale(0.5));
    assert!((fused.get(0, 0) - 0.6).abs() < 1e-15);
    assert!((fused.get(0, 1) - 0.4).abs() < 1e-15);
    assert_eq!(fused.argmax_rows(), vec![0]);
}

#[test]
fn poem_zero_iterations_is_identity() {
    let net = toy_net(5);
    let cfg = AdaptConfig {
        max_iters: 0,
        ..AdaptConfig::default()
    };
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let before_shallow = params_snapshot(&state.shallow);
    let before_adapt = params_snapshot(&state.adapt_branch);
    let x = toy_batch(6, 8, 4);
    let (pred, trace) = state.adapt_batch_poem(&x, &cfg).unwrap();
    assert_eq!(trace.forward_count, 1);
    assert_eq!(trace.backward_count, 0);
    assert!(trace.potentially_reliable.is_empty());
    assert_eq!(pred.probs_fused, trace.initial_prediction.probs_fused);
    assert_eq!(params_snapshot(&state.shallow), before_shallow);
    assert_eq!(params_snapshot(&state.adapt_branch), before_adapt);
}

#[test]
fn poem_empty_selection_is_exact_noop() {
    let net = toy_net(7);
    // A microscopic factor puts the threshold below any realistic entropy.
    let cfg = AdaptConfig {
        entropy_factor: 1e-9,
        ..AdaptConfig::default()
    };
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let before_shallow = params_snapshot(&state.shallow);
    let before_adapt = params_snapshot(&state.adapt_branch);
    let x = toy_batch(8, 8, 4);
    let (pred, trace) = state.adapt_batch_poem(&x, &cfg).unwrap();
    assert!(trace.selections[0].selected.is_empty());
    assert_eq!(trace.forward_count, 1);
    assert_eq!(trace.backward_count, 0);
    assert!(trace.potentially_reliable.is_empty());
    assert_eq!(pred.probs_fused, trace.initial_prediction.probs_fused);
    assert_eq!(params_snapshot(&state.shallow), before_shallow);
    assert_eq!(params_snapshot(&state.adapt_branch), before_adapt);
}

#[test]
fn poem_zero_lr_terminates_early_by_set_equality() {
    // With lr = 0 the re-prediction is identical, so the second selection
    // equals the first and the loop exits after one round: two forwards.
    let net = toy_net(9);
    let cfg = AdaptConfig {
        lr_shallow: 0.0,
        lr_adapt: 0.0,
        entropy_factor: 1.0, // select something
        ..AdaptConfig::default()
    };
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let x = toy_batch(10, 8, 4);
    let (_, trace) = state.adapt_batch_poem(&x, &cfg).unwrap();
    assert!(!trace.selections[0].selected.is_empty(), "fixture must select");
    assert_eq!(trace.forward_count, 2);
    assert_eq!(trace.grad_norms.len(), 1);
    assert_eq!(trace.selections.len(), 2);
    assert_eq!(trace.selections[0].selected, trace.selections[1].selected);
}

#[test]
fn poem_frozen_source_branch_over_many_batches() {
    let (net, _) = trained_net(11);
    let cfg = AdaptConfig {
        entropy_factor: 0.8,
        ..AdaptConfig::default()
    };
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let frozen = params_snapshot(&state.source_branch);
    for b in 0..100 {
        let x = toy_batch(1000 + b, 16, 8);
        let (_, trace) = state.adapt_batch_poem(&x, &cfg).unwrap();
        assert!(trace.forward_count <= cfg.max_iters + 1);
        // PRS is disjoint from the initial selection by construction.
        for i in &trace.potentially_reliable {
            assert!(trace.selections[0].selected.binary_search(i).is_err());
        }
    }
    assert_eq!(params_snapshot(&state.source_branch), frozen);
}

#[test]
fn poem_deterministic_across_replicas() {
    let (net, _) = trained_net(13);
    let cfg = AdaptConfig::default();
    let mut a = split_and_clone(&net, &cfg).unwrap();
    let mut b = split_and_clone(&net, &cfg).unwrap();
    for batch in 0..10 {
        let x = toy_batch(2000 + batch, 16, 8);
        let (pa, ta) = a.adapt_batch_poem(&x, &cfg).unwrap();
        let (pb, tb) = b.adapt_batch_poem(&x, &cfg).unwrap();
        assert_eq!(pa.probs_fused, pb.probs_fused);
        assert_eq!(ta.potentially_reliable, tb.potentially_reliable);
        assert_eq!(ta.forward_count, tb.forward_count);
        for (sa, sb) in ta.selections.iter().zip(&tb.selections) {
            assert_eq!(sa.selected, sb.selected);
            assert_eq!(sa.entropies, sb.entropies);
        }
    }
}

#[test]
fn poem_single_sample_batch_uses_running_fallback() {
    let (net, _) = trained_net(17);
    let cfg = AdaptConfig::default();
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let x = toy_batch(30, 1, 8);
    // Batch-norm layers fall back to running statistics; no degenerate error.
    let (pred, _) = state.adapt_batch_poem(&x, &cfg).unwrap();
    assert_eq!(pred.pseudo_labels.len(), 1);
}

#[test]
fn tent_zero_lr_keeps_source_prediction() {
    let net = toy_net(19);
    let cfg = AdaptConfig {
        lr_shallow: 0.0,
        method: Method::Tent,
        ..AdaptConfig::default()
    };
    let mut state = TentState::new(net.clone()).unwrap();
    let x = toy_batch(20, 8, 4);
    let before = params_snapshot(&state.net.layers);
    let (pred, trace) = state.adapt_batch_tent(&x, &cfg).unwrap();
    assert_eq!(params_snapshot(&state.net.layers), before);
    // Prediction equals the frozen source forward under the same convention.
    let (logits, _) = forward(&net.layers, &x, StatsMode::Batch).unwrap();
    let source = tta_core::loss::softmax(&logits).unwrap();
    assert_eq!(pred.probs_fused, source);
    assert_eq!(trace.forward_count, 1);
    assert_eq!(trace.backward_count, 8);
}

#[test]
fn tent_uniform_prediction_has_log_c_entropy() {
    // Zero out the classifier so logits are all equal: entropy is ln C.
    let mut net = toy_net(21);
    if let Some(Layer::Dense { weight, bias }) = net.layers.last_mut() {
        weight.value.fill(0.0);
        bias.value.fill(0.0);
    }
    let mut state = TentState::new(net).unwrap();
    let cfg = AdaptConfig {
        method: Method::Tent,
        ..AdaptConfig::default()
    };
    let x = toy_batch(22, 8, 4);
    let (_, trace) = state.adapt_batch_tent(&x, &cfg).unwrap();
    let mean: f64 =
        trace.selections[0].entropies.iter().sum::<f64>() / trace.selections[0].entropies.len() as f64;
    assert!((mean - 4f64.ln()).abs() < 1e-9);
}

#[test]
fn tent_small_step_descends_entropy() {
    let (net, _) = trained_net(23);
    let cfg = AdaptConfig {
        lr_shallow: 1e-3,
        momentum: 0.0,
        method: Method::Tent,
        ..AdaptConfig::default()
    };
    let mut state = TentState::new(net).unwrap();
    let x = toy_batch(24, 16, 8);
    let (_, trace) = state.adapt_batch_tent(&x, &cfg).unwrap();
    let pre: f64 =
        trace.selections[0].entropies.iter().sum::<f64>() / trace.selections[0].entropies.len() as f64;
    // Re-forward after the step on the updated parameters.
    let (logits, _) = forward(&state.net.layers, &x, StatsMode::Batch).unwrap();
    let probs = tta_core::loss::softmax(&logits).unwrap();
    let post_e = entropy_rows(&probs).unwrap();
    let post: f64 = post_e.iter().sum::<f64>() / post_e.len() as f64;
    assert!(post <= pre, "post {post} should not exceed pre {pre}");
}

#[test]
fn threshold_with_huge_factor_equals_tent() {
    let (net, _) = trained_net(29);
    let cfg = AdaptConfig {
        entropy_factor: 100.0,
        ..AdaptConfig::default()
    };
    let mut tent = TentState::new(net.clone()).unwrap();
    let mut thresh = TentState::new(net).unwrap();
    for b in 0..5 {
        let x = toy_batch(3000 + b, 16, 8);
        let (p1, _) = tent.adapt_batch_tent(&x, &cfg).unwrap();
        let (p2, t2) = thresh.adapt_batch_threshold(&x, &cfg).unwrap();
        assert_eq!(t2.selections[0].selected.len(), 16);
        assert_eq!(p1.probs_fused, p2.probs_fused);
    }
    assert_eq!(
        params_snapshot(&tent.net.layers),
        params_snapshot(&thresh.net.layers)
    );
}

#[test]
fn threshold_with_empty_selection_updates_nothing() {
    let (net, _) = trained_net(31);
    let cfg = AdaptConfig {
        entropy_factor: 1e-9,
        ..AdaptConfig::default()
    };
    let mut state = TentState::new(net).unwrap();
    let before = params_snapshot(&state.net.layers);
    let x = toy_batch(32, 16, 8);
    let (_, trace) = state.adapt_batch_threshold(&x, &cfg).unwrap();
    assert!(trace.selections[0].selected.is_empty());
    assert_eq!(trace.backward_count, 0);
    assert_eq!(params_snapshot(&state.net.layers), before);
}

#[test]
fn no_adapt_is_pure_and_counts_zero_backwards() {
    let (net, _) = trained_net(37);
    let x = toy_batch(38, 16, 8);
    let (p1, t1) = adapt_batch_no_adapt(&net, &x).unwrap();
    let (p2, _) = adapt_batch_no_adapt(&net, &x).unwrap();
    assert_eq!(p1.probs_fused, p2.probs_fused);
    assert_eq!(t1.backward_count, 0);
    assert_eq!(t1.forward_count, 1);
}

#[test]
fn adapter_dispatch_matches_methods() {
    let (net, _) = trained_net(41);
    for method in [Method::NoAdapt, Method::Tent, Method::ThresholdTent, Method::Poem] {
        let cfg = AdaptConfig {
            method,
            ..AdaptConfig::default()
        };
        let mut adapter = Adapter::new(net.clone(), &cfg).unwrap();
        assert_eq!(adapter.method(), method);
        let x = toy_batch(42, 16, 8);
        let (pred, _) = adapter.adapt_batch(&x, &cfg).unwrap();
        assert_eq!(pred.pseudo_labels.len(), 16);
    }
}

/// The engine's analytic gradients for both objectives, exposed through the
/// momentum buffers after an lr = 0, momentum = 0 round, must match central
/// finite differences of independently recomputed losses.
#[test]
fn poem_round_gradients_match_finite_differences() {
    let net = toy_net(43);
    let cfg = AdaptConfig {
        lr_shallow: 0.0,
        lr_adapt: 0.0,
        momentum: 0.0,
        max_iters: 1,
        entropy_factor: 2.0, // select everything: stable fixture
        ..AdaptConfig::default()
    };
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let x = toy_batch(44, 6, 4);

    let (pred0, _) = state.predict_fused(&x, StatsMode::Batch).unwrap();
    let selected: Vec<usize> = (0..6).collect();
    let pseudo = pred0.pseudo_labels.clone();

    let (_, trace) = state.adapt_batch_poem(&x, &cfg).unwrap();
    assert_eq!(trace.grad_norms.len(), 1);
    assert_eq!(trace.selections[0].selected, selected);

    // Locate the norm layers.
    let g_norm = state.shallow.iter().position(|l| l.is_norm()).unwrap();
    let a_norm = state.adapt_branch.iter().position(|l| l.is_norm()).unwrap();

    let alpha = state.fusion_alpha;
    let fused_of = |shallow: &[Layer<f64>], adapt: &[Layer<f64>], source: &[Layer<f64>]| {
        let (phi, _) = forward(shallow, &x, StatsMode::Batch)?;
        let (ls, _) = forward(source, &phi, StatsMode::Batch)?;
        let (la, _) = forward(adapt, &phi, StatsMode::Batch)?;
        let pg = tta_core::loss::softmax(&ls)?;
        let pa = tta_core::loss::softmax(&la)?;
        Ok::<Mat, CoreError>(pg.scale(alpha).add(&pa.scale(1.0 - alpha)))
    };

    // Entropy objective gradient wrt shallow gamma/beta.
    for kind in [ParamKind::NormGamma, ParamKind::NormBeta] {
        let analytic = state.shallow[g_norm]
            .param(kind)
            .unwrap()
            .momentum_buf
            .clone();
        let source = state.source_branch.clone();
        let adapt = state.adapt_branch.clone();
        let mut loss = |shallow: &[Layer<f64>]| {
            let fused = fused_of(shallow, &adapt, &source)?;
            let e = entropy_rows(&fused)?;
            Ok(e.iter().sum::<f64>() / e.len() as f64)
        };
        let numeric =
            finite_diff_grad(&mut state.shallow, g_norm, kind, 1e-5, &mut loss).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let scale = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / scale < 1e-4, "kind {kind:?}: a={a} n={n}");
        }
    }

    // Cross-entropy objective gradient wrt adapt-branch gamma/beta.
    for kind in [ParamKind::NormGamma, ParamKind::NormBeta] {
        let analytic = state.adapt_branch[a_norm]
            .param(kind)
            .unwrap()
            .momentum_buf
            .clone();
        let source = state.source_branch.clone();
        let shallow = state.shallow.clone();
        let pseudo = pseudo.clone();
        let mut loss = |adapt: &[Layer<f64>]| {
            let fused = fused_of(&shallow, adapt, &source)?;
            let mut total = 0.0;
            for (i, &c) in pseudo.iter().enumerate() {
                total -= fused.get(i, c).max(1e-12).ln();
            }
            Ok(total / pseudo.len() as f64)
        };
        let numeric =
            finite_diff_grad(&mut state.adapt_branch, a_norm, kind, 1e-5, &mut loss).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let scale = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / scale < 1e-4, "kind {kind:?}: a={a} n={n}");
        }
    }
}

#[test]
fn per_sample_grad_norms_restore_state() {
    let (net, _) = trained_net(47);
    let cfg = AdaptConfig::default();
    let mut state = split_and_clone(&net, &cfg).unwrap();
    let x = toy_batch(48, 8, 8);
    let before: PoemState<f64> = state.clone();
    let (norms, pred) = state.per_sample_grad_norms(&x).unwrap();
    assert_eq!(norms.len(), 8);
    assert_eq!(pred.pseudo_labels.len(), 8);
    assert!(norms.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert_eq!(params_snapshot(&state.shallow), params_snapshot(&before.shallow));
    assert_eq!(
        params_snapshot(&state.adapt_branch),
        params_snapshot(&before.adapt_branch)
    );
}
