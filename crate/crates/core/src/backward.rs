//! Exact analytic backward pass over a layer segment.
//!
//! Gradients are accumulated into the `grad` buffer of every parameter whose
//! [`ParamSite`] passes the filter; gradients still flow *through* layers
//! whose parameters are filtered out (a frozen branch is differentiable but
//! not updated).

use crate::error::{CoreError, Result};
use crate::layer::{Layer, NormKind, NormLayer, ParamKind, ParamSite};
use crate::matrix::Matrix;
use crate::net::{ForwardTrace, NormStats};
use crate::scalar::{cast_usize, Scalar};

/// Decides which parameters receive gradient accumulation.
pub type ParamFilter<'a> = &'a dyn Fn(&ParamSite) -> bool;

pub fn filter_all(_: &ParamSite) -> bool {
    true
}

pub fn filter_none(_: &ParamSite) -> bool {
    false
}

pub fn filter_trainable(site: &ParamSite) -> bool {
    site.trainable
}

fn dense_backward<T: Scalar>(
    weight: &mut crate::layer::Param<T>,
    bias: &mut crate::layer::Param<T>,
    input: &Matrix<T>,
    upstream: &Matrix<T>,
    layer_idx: usize,
    filter: ParamFilter,
) -> Matrix<T> {
    let w_site = ParamSite {
        layer: layer_idx,
        kind: ParamKind::DenseWeight,
        trainable: weight.trainable,
    };
    if filter(&w_site) {
        let dw = input.transpose().matmul(upstream);
        weight.grad = weight.grad.add(&dw);
    }
    let b_site = ParamSite {
        layer: layer_idx,
        kind: ParamKind::DenseBias,
        trainable: bias.trainable,
    };
    if filter(&b_site) {
        bias.grad = bias.grad.add(&upstream.col_sum());
    }
    upstream.matmul(&weight.value.transpose())
}

fn norm_backward<T: Scalar>(
    norm: &mut NormLayer<T>,
    input: &Matrix<T>,
    stats: &NormStats<T>,
    upstream: &Matrix<T>,
    layer_idx: usize,
    filter: ParamFilter,
) -> Matrix<T> {
    let (rows, cols) = input.shape();
    let gamma = &norm.gamma.value;

    // xhat and dL/dxhat, shared by all variants.
    let mut xhat = Matrix::zeros(rows, cols);
    let inv_std_at = |i: usize, j: usize| -> T {
        let v = match norm.kind {
            NormKind::Batch => stats.var.get(0, j),
            NormKind::Layer => stats.var.get(i, 0),
        };
        (v + norm.eps).sqrt().recip()
    };
    for i in 0..rows {
        for j in 0..cols {
            let mean = match norm.kind {
                NormKind::Batch => stats.mean.get(0, j),
                NormKind::Layer => stats.mean.get(i, 0),
            };
            xhat.set(i, j, (input.get(i, j) - mean) * inv_std_at(i, j));
        }
    }

    let g_site = ParamSite {
        layer: layer_idx,
        kind: ParamKind::NormGamma,
        trainable: norm.gamma.trainable,
    };
    if filter(&g_site) {
        let dg = upstream.hadamard(&xhat).col_sum();
        norm.gamma.grad = norm.gamma.grad.add(&dg);
    }
    let b_site = ParamSite {
        layer: layer_idx,
        kind: ParamKind::NormBeta,
        trainable: norm.beta.trainable,
    };
    if filter(&b_site) {
        norm.beta.grad = norm.beta.grad.add(&upstream.col_sum());
    }

    // dL/dxhat = upstream .* gamma (broadcast over rows).
    let mut dxhat = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            dxhat.set(i, j, upstream.get(i, j) * gamma.get(0, j));
        }
    }

    match (norm.kind, stats.batch_stats) {
        (NormKind::Batch, false) => {
            // Running statistics are constants.
            let mut dx = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let inv = (stats.var.get(0, j) + norm.eps).sqrt().recip();
                    dx.set(i, j, dxhat.get(i, j) * inv);
                }
            }
            dx
        }
        (NormKind::Batch, true) => {
            // Batch statistics depend on x:
            // dx = inv/n * (n*dxhat - sum_i dxhat - xhat * sum_i dxhat.*xhat)
            let n = cast_usize::<T>(rows);
            let sum_dxhat = dxhat.col_sum();
            let sum_dxhat_xhat = dxhat.hadamard(&xhat).col_sum();
            let mut dx = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let inv = (stats.var.get(0, j) + norm.eps).sqrt().recip();
                    let v = n * dxhat.get(i, j)
                        - sum_dxhat.get(0, j)
                        - xhat.get(i, j) * sum_dxhat_xhat.get(0, j);
                    dx.set(i, j, inv / n * v);
                }
            }
            dx
        }
        (NormKind::Layer, _) => {
            // Same reduction per row instead of per column.
            let d = cast_usize::<T>(cols);
            let mut dx = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..cols {
                    sum_dxhat += dxhat.get(i, j);
                    sum_dxhat_xhat += dxhat.get(i, j) * xhat.get(i, j);
                }
                let inv = (stats.var.get(i, 0) + norm.eps).sqrt().recip();
                for j in 0..cols {
                    let v = d * dxhat.get(i, j) - sum_dxhat - xhat.get(i, j) * sum_dxhat_xhat;
                    dx.set(i, j, inv / d * v);
                }
            }
            dx
        }
    }
}

/// Propagates `upstream = dL/d(segment output)` back through the segment,
/// accumulating parameter gradients where the filter passes, and returns
/// `dL/d(segment input)`.
pub fn backward_segment<T: Scalar>(
    segment: &mut [Layer<T>],
    trace: &ForwardTrace<T>,
    upstream: &Matrix<T>,
    filter: ParamFilter,
) -> Result<Matrix<T>> {
    if trace.layers.len() != segment.len() {
        return Err(CoreError::MissingTrace(trace.layers.len().min(segment.len())));
    }
    let out_shape = trace.output().shape();
    if upstream.shape() != out_shape {
        return Err(CoreError::ShapeMismatch {
            context: "backward upstream",
            expected: format!("{out_shape:?}"),
            got: format!("{:?}", upstream.shape()),
        });
    }
    let mut grad = upstream.clone();
    for (idx, layer) in segment.iter_mut().enumerate().rev() {
        let lt = &trace.layers[idx];
        grad = match layer {
            Layer::Dense { weight, bias } => {
                dense_backward(weight, bias, &lt.input, &grad, idx, filter)
            }
            Layer::Relu => {
                let mut dx = grad.clone();
                for (g, &x) in dx.data_mut().iter_mut().zip(lt.input.data()) {
                    if x <= T::zero() {
                        *g = T::zero();
                    }
                }
                dx
            }
            Layer::Norm(norm) => {
                let stats = lt
                    .norm_stats
                    .as_ref()
                    .ok_or(CoreError::MissingTrace(idx))?;
                norm_backward(norm, &lt.input, stats, &grad, idx, filter)
            }
        };
    }
    Ok(grad)
}

/// Sum of per-parameter gradient L2 norms and the number of parameters the
/// filter selected.
pub fn grad_norm_stats<T: Scalar>(segment: &[Layer<T>], filter: ParamFilter) -> (T, usize) {
    let mut total = T::zero();
    let mut count = 0usize;
    for (idx, layer) in segment.iter().enumerate() {
        for (kind, p) in layer.params() {
            let site = ParamSite {
                layer: idx,
                kind,
                trainable: p.trainable,
            };
            if filter(&site) {
                total += p.grad.frobenius_norm();
                count += 1;
            }
        }
    }
    (total, count)
}

/// Mean L2 norm of the gradient buffers selected by the filter; zero when the
/// filter selects nothing.
pub fn mean_grad_norm<T: Scalar>(segment: &[Layer<T>], filter: ParamFilter) -> T {
    let (total, count) = grad_norm_stats(segment, filter);
    if count == 0 {
        T::zero()
    } else {
        total / cast_usize(count)
    }
}
