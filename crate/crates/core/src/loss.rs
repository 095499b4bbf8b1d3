//! Probability-space operations: softmax, per-sample entropy, cross-entropy,
//! and their analytic input gradients.
//!
//! Every logarithm clamps its argument at [`PROB_CLAMP`]; the gradient
//! helpers apply the same clamp so analytic and finite-difference paths agree.

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::scalar::{cast, cast_usize, Scalar};

/// Probability floor inside every log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Row-wise softmax with row-max subtraction for stability.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    if !logits.all_finite() {
        return Err(CoreError::NonFinite("softmax input"));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let orow = out.row_mut(i);
        let mut sum = T::zero();
        for (o, &z) in orow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

fn check_distribution_rows<T: Scalar>(probs: &Matrix<T>) -> Result<()> {
    let tol: T = cast(1e-9);
    for i in 0..probs.rows() {
        let mut sum = T::zero();
        for &p in probs.row(i) {
            if p < T::zero() || !p.is_finite() {
                return Err(CoreError::NotADistribution {
                    row: i,
                    sum: p.to_f64().unwrap_or(f64::NAN),
                });
            }
            sum += p;
        }
        if (sum - T::one()).abs() > tol {
            return Err(CoreError::NotADistribution {
                row: i,
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}

/// Per-sample Shannon entropy `-sum_c p log p`, with the probability clamp.
///
/// Each row must be a distribution (non-negative, summing to 1 within 1e-9).
pub fn entropy_rows<T: Scalar>(probs: &Matrix<T>) -> Result<Vec<T>> {
    check_distribution_rows(probs)?;
    let clamp: T = cast(PROB_CLAMP);
    Ok((0..probs.rows())
        .map(|i| {
            let mut e = T::zero();
            for &p in probs.row(i) {
                let pc = p.max(clamp);
                e -= pc * pc.ln();
            }
            e
        })
        .collect())
}

/// Mean over rows of `-ln p[hot]` against one-hot labels.
pub fn cross_entropy<T: Scalar>(probs: &Matrix<T>, onehot: &Matrix<T>) -> Result<T> {
    if probs.shape() != onehot.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "cross entropy",
            expected: format!("{:?}", probs.shape()),
            got: format!("{:?}", onehot.shape()),
        });
    }
    check_distribution_rows(probs)?;
    let clamp: T = cast(PROB_CLAMP);
    let mut total = T::zero();
    for i in 0..probs.rows() {
        let row = onehot.row(i);
        let mut hot: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if v == T::one() {
                if hot.is_some() {
                    return Err(CoreError::NotOneHot { row: i });
                }
                hot = Some(j);
            } else if v != T::zero() {
                return Err(CoreError::NotOneHot { row: i });
            }
        }
        let hot = hot.ok_or(CoreError::NotOneHot { row: i })?;
        total -= probs.get(i, hot).max(clamp).ln();
    }
    Ok(total / cast_usize(probs.rows()))
}

/// One-hot encodes class indices into an `n x c` matrix.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    assert!(!labels.is_empty());
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < num_classes, "label out of range");
        m.set(i, y, T::one());
    }
    m
}

/// Gradient of `sum_i w_i * entropy(row_i)` with respect to the probabilities.
///
/// Rows with weight zero contribute nothing. Entries at or below the clamp
/// have zero derivative (the clamp is active there).
pub fn entropy_grad_rows<T: Scalar>(probs: &Matrix<T>, row_weights: &[T]) -> Matrix<T> {
    assert_eq!(row_weights.len(), probs.rows());
    let clamp: T = cast(PROB_CLAMP);
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let w = row_weights[i];
        if w == T::zero() {
            continue;
        }
        for j in 0..probs.cols() {
            let p = probs.get(i, j);
            if p > clamp {
                g.set(i, j, -w * (p.ln() + T::one()));
            }
        }
    }
    g
}

/// Gradient of `sum_i w_i * (-ln p[i, labels[i]])` with respect to the
/// probabilities, clamp-consistent with [`cross_entropy`].
pub fn cross_entropy_grad_rows<T: Scalar>(
    probs: &Matrix<T>,
    labels: &[usize],
    row_weights: &[T],
) -> Matrix<T> {
    assert_eq!(labels.len(), probs.rows());
    assert_eq!(row_weights.len(), probs.rows());
    let clamp: T = cast(PROB_CLAMP);
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let w = row_weights[i];
        if w == T::zero() {
            continue;
        }
        let p = probs.get(i, labels[i]);
        if p > clamp {
            g.set(i, labels[i], -w / p);
        }
    }
    g
}

/// Pulls a gradient on softmax outputs back to the logits:
/// `dL/dz = p .* (g - sum_k g_k p_k)` per row.
pub fn softmax_vjp<T: Scalar>(probs: &Matrix<T>, upstream: &Matrix<T>) -> Matrix<T> {
    assert_eq!(probs.shape(), upstream.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let mut dot = T::zero();
        for (&g, &p) in upstream.row(i).iter().zip(probs.row(i)) {
            dot += g * p;
        }
        for j in 0..probs.cols() {
            let p = probs.get(i, j);
            out.set(i, j, p * (upstream.get(i, j) - dot));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]])).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.25f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let p = softmax(&Matrix::from_rows(&[vec![1000.0, 0.0]])).unwrap();
        assert!(p.all_finite());
        assert!(p.get(0, 0) > 1.0 - 1e-12);
        assert!(p.get(0, 1) < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&Matrix::from_rows(&[vec![2.0f64.ln(), 0.0]])).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_known_values() {
        let p = Matrix::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
        ]);
        let e = entropy_rows(&p).unwrap();
        assert!((e[0] - 4.0f64.ln()).abs() < 1e-12);
        assert!(e[1].abs() < 1e-10); // clamp leaves ~2.8e-11 per zero entry
        assert!((e[2] - 2.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn entropy_rejects_non_distribution() {
        let p = Matrix::from_rows(&[vec![0.7, 0.7]]);
        assert!(matches!(
            entropy_rows(&p).unwrap_err(),
            CoreError::NotADistribution { row: 0, .. }
        ));
        let neg = Matrix::from_rows(&[vec![-0.1, 1.1]]);
        assert!(entropy_rows(&neg).is_err());
    }

    #[test]
    fn cross_entropy_known_values() {
        let p = Matrix::from_rows(&[vec![0.7, 0.3]]);
        let y = one_hot::<f64>(&[0], 2);
        assert!((cross_entropy(&p, &y).unwrap() - (-(0.7f64.ln()))).abs() < 1e-12);

        let p = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let y = one_hot::<f64>(&[0], 2);
        assert!(cross_entropy(&p, &y).unwrap().abs() < 1e-12);

        let p = Matrix::from_rows(&[vec![0.25, 0.25, 0.25, 0.25]]);
        for c in 0..4 {
            let y = one_hot::<f64>(&[c], 4);
            assert!((cross_entropy(&p, &y).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let bad = Matrix::from_rows(&[vec![0.5, 0.5]]);
        assert!(matches!(
            cross_entropy(&p, &bad).unwrap_err(),
            CoreError::NotOneHot { row: 0 }
        ));
        let two_hot = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!(cross_entropy(&p, &two_hot).is_err());
    }
}
