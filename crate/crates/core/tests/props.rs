//! Property tests for the probability-space invariants.

use proptest::prelude::*;

use tta_core::loss::{entropy_rows, softmax};
use tta_core::tta::select_reliable;
use tta_core::Mat;

fn logits_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    let entry = prop_oneof![
        3 => -10.0..10.0f64,
        1 => -1000.0..1000.0f64,
    ];
    (1usize..5, 2usize..8).prop_flat_map(move |(rows, cols)| {
        proptest::collection::vec(proptest::collection::vec(entry.clone(), cols), rows)
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in logits_strategy()) {
        let logits = Mat::from_rows(&rows);
        let probs = softmax(&logits).unwrap();
        prop_assert!(probs.all_finite());
        for i in 0..probs.rows() {
            let sum: f64 = probs.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn entropy_within_bounds(rows in logits_strategy()) {
        let logits = Mat::from_rows(&rows);
        let probs = softmax(&logits).unwrap();
        let c = probs.cols() as f64;
        let e = entropy_rows(&probs).unwrap();
        for v in e {
            prop_assert!(v >= 0.0);
            prop_assert!(v <= c.ln() + 1e-9);
        }
    }

    #[test]
    fn selection_monotone_in_threshold(
        entropies in proptest::collection::vec(0.0..5.0f64, 1..64),
        t0 in 0.0..5.0f64,
        bump in 0.0..5.0f64,
    ) {
        let lo = select_reliable(&entropies, t0, 0).selected;
        let hi = select_reliable(&entropies, t0 + bump, 0).selected;
        for i in &lo {
            prop_assert!(hi.binary_search(i).is_ok(), "{i} dropped when threshold grew");
        }
    }

    #[test]
    fn fusion_rows_stay_distributions(
        a_rows in logits_strategy(),
        alpha in 0.0..=1.0f64,
    ) {
        let logits = Mat::from_rows(&a_rows);
        let pg = softmax(&logits).unwrap();
        let pa = softmax(&logits.scale(-0.5)).unwrap();
        let fused = pg.scale(alpha).add(&pa.scale(1.0 - alpha));
        // entropy_rows validates non-negativity and row sums within 1e-9.
        prop_assert!(entropy_rows(&fused).is_ok());
    }
}
