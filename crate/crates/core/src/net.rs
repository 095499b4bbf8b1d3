//! Network container and the forward pass with cached activations.

use crate::error::{CoreError, Result};
use crate::layer::{Layer, NormKind, NormLayer};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Which statistics normalization layers use during a forward pass.
///
/// `Batch` is the adaptation convention: batch-norm layers normalize by
/// current-batch mean/variance. `Running` is standard inference against the
/// statistics captured at source-training completion. Layer-norm is
/// per-sample and ignores the mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    Batch,
    Running,
}

/// Statistics a normalization layer actually used, cached for backward.
///
/// Batch-norm: `1 x features` mean/var. Layer-norm: `rows x 1` per-sample
/// mean/var. `batch_stats` records whether the values depend on the batch
/// (and therefore need the full normalization backward).
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Matrix<T>,
    pub var: Matrix<T>,
    pub batch_stats: bool,
}

#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub input: Matrix<T>,
    pub output: Matrix<T>,
    pub norm_stats: Option<NormStats<T>>,
}

/// Cached activations for one segment forward; consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub mode: StatsMode,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.layers.last().expect("non-empty trace").output
    }
}

/// An ordered layer stack with a split point separating the shallow segment
/// from the branch segment, and a fixed class count.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    /// Layers `[0, split_index)` form the shallow segment; the rest is the
    /// branch. Must satisfy `0 < split_index < layers.len()`.
    pub split_index: usize,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl<T: Scalar> Network<T> {
    pub fn new(
        layers: Vec<Layer<T>>,
        split_index: usize,
        num_classes: usize,
        input_dim: usize,
    ) -> Result<Self> {
        let net = Self {
            layers,
            split_index,
            num_classes,
            input_dim,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::InvalidConfig("network has no layers".into()));
        }
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(CoreError::InvalidConfig(format!(
                "split index {} out of range (1..{})",
                self.split_index,
                self.layers.len()
            )));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            width = layer.out_width(width).ok_or_else(|| CoreError::ShapeMismatch {
                context: "layer chain",
                expected: format!("layer {i} accepting width {width}"),
                got: format!("{layer:?}").chars().take(40).collect(),
            })?;
        }
        if width != self.num_classes {
            return Err(CoreError::InvalidConfig(format!(
                "final layer width {} != num_classes {}",
                width, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn shallow(&self) -> &[Layer<T>] {
        &self.layers[..self.split_index]
    }

    pub fn branch(&self) -> &[Layer<T>] {
        &self.layers[self.split_index..]
    }

    /// Full-network forward; see [`forward`].
    pub fn forward(&self, x: &Matrix<T>, mode: StatsMode) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        forward(&self.layers, x, mode)
    }
}

fn norm_forward<T: Scalar>(
    norm: &NormLayer<T>,
    x: &Matrix<T>,
    mode: StatsMode,
) -> Result<(Matrix<T>, NormStats<T>)> {
    let (rows, cols) = x.shape();
    if norm.features() != cols {
        return Err(CoreError::ShapeMismatch {
            context: "norm forward",
            expected: format!("{} features", norm.features()),
            got: format!("{cols} features"),
        });
    }
    match norm.kind {
        NormKind::Batch => {
            let (mean, var, batch_stats) = match mode {
                StatsMode::Batch => {
                    if rows < 2 {
                        return Err(CoreError::DegenerateBatch);
                    }
                    let mean = x.col_mean();
                    let var = x.col_var(&mean);
                    (mean, var, true)
                }
                StatsMode::Running => (norm.running_mean.clone(), norm.running_var.clone(), false),
            };
            let mut y = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let inv = (var.get(0, j) + norm.eps).sqrt().recip();
                    let xhat = (x.get(i, j) - mean.get(0, j)) * inv;
                    y.set(i, j, norm.gamma.value.get(0, j) * xhat + norm.beta.value.get(0, j));
                }
            }
            Ok((y, NormStats { mean, var, batch_stats }))
        }
        NormKind::Layer => {
            // Per-sample statistics across features; independent of mode.
            let mut mean = Matrix::zeros(rows, 1);
            let mut var = Matrix::zeros(rows, 1);
            let inv_d = T::one() / crate::scalar::cast_usize::<T>(cols);
            for i in 0..rows {
                let mut m = T::zero();
                for &v in x.row(i) {
                    m += v;
                }
                m *= inv_d;
                let mut s = T::zero();
                for &v in x.row(i) {
                    let d = v - m;
                    s += d * d;
                }
                mean.set(i, 0, m);
                var.set(i, 0, s * inv_d);
            }
            let mut y = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let inv = (var.get(i, 0) + norm.eps).sqrt().recip();
                for j in 0..cols {
                    let xhat = (x.get(i, j) - mean.get(i, 0)) * inv;
                    y.set(i, j, norm.gamma.value.get(0, j) * xhat + norm.beta.value.get(0, j));
                }
            }
            Ok((y, NormStats { mean, var, batch_stats: true }))
        }
    }
}

/// Runs `x` through a layer segment, caching everything backward needs.
///
/// With `StatsMode::Batch`, batch-norm layers require at least two rows and
/// normalize by current-batch statistics; with `StatsMode::Running` they are
/// pure functions of their inputs.
pub fn forward<T: Scalar>(
    segment: &[Layer<T>],
    x: &Matrix<T>,
    mode: StatsMode,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    if segment.is_empty() {
        return Err(CoreError::InvalidConfig("empty segment".into()));
    }
    if !x.all_finite() {
        return Err(CoreError::NonFinite("forward input"));
    }
    let mut traces = Vec::with_capacity(segment.len());
    let mut cur = x.clone();
    for layer in segment {
        let input = cur;
        let (output, norm_stats) = match layer {
            Layer::Dense { weight, bias } => {
                if input.cols() != weight.value.rows() {
                    return Err(CoreError::ShapeMismatch {
                        context: "dense forward",
                        expected: format!("{} input features", weight.value.rows()),
                        got: format!("{}", input.cols()),
                    });
                }
                (input.matmul(&weight.value).add_row_broadcast(&bias.value), None)
            }
            Layer::Relu => (input.map(|v| if v > T::zero() { v } else { T::zero() }), None),
            Layer::Norm(norm) => {
                let (y, stats) = norm_forward(norm, &input, mode)?;
                (y, Some(stats))
            }
        };
        cur = output.clone();
        traces.push(LayerTrace { input, output, norm_stats });
    }
    if !cur.all_finite() {
        return Err(CoreError::NonFinite("forward output"));
    }
    Ok((cur, ForwardTrace { layers: traces, mode }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::NormKind;

    #[test]
    fn identity_dense_forward() {
        let layer: Layer<f64> = Layer::dense_from(Matrix::identity(2), Matrix::zeros(1, 2));
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let (y, trace) = forward(&[layer], &x, StatsMode::Running).unwrap();
        assert_eq!(y, x);
        assert_eq!(trace.layers.len(), 1);
    }

    #[test]
    fn relu_forward() {
        let x = Matrix::from_rows(&[vec![-1.0, 3.0]]);
        let (y, _) = forward(&[Layer::<f64>::Relu], &x, StatsMode::Running).unwrap();
        assert_eq!(y, Matrix::from_rows(&[vec![0.0, 3.0]]));
    }

    #[test]
    fn batch_norm_hand_computed() {
        // Column [1, 3]: mean 2, population variance 1, so the normalized
        // values are exactly -1/sqrt(1 + 1e-5) and +1/sqrt(1 + 1e-5).
        let layer: Layer<f64> = Layer::norm(NormKind::Batch, 1);
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        let (y, trace) = forward(&[layer], &x, StatsMode::Batch).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-15);
        assert!((y.get(1, 0) - expect).abs() < 1e-15);
        let stats = trace.layers[0].norm_stats.as_ref().unwrap();
        assert_eq!(stats.mean.get(0, 0), 2.0);
        assert_eq!(stats.var.get(0, 0), 1.0);
    }

    #[test]
    fn batch_stats_single_row_is_degenerate() {
        let layer: Layer<f64> = Layer::norm(NormKind::Batch, 2);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let err = forward(&[layer], &x, StatsMode::Batch).unwrap_err();
        assert!(matches!(err, CoreError::DegenerateBatch));
    }

    #[test]
    fn layer_norm_single_row_ok() {
        let layer: Layer<f64> = Layer::norm(NormKind::Layer, 2);
        let x = Matrix::from_rows(&[vec![1.0, 3.0]]);
        let (y, _) = forward(&[layer], &x, StatsMode::Batch).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-15);
        assert!((y.get(0, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn running_mode_is_pure() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        use rand::SeedableRng;
        let layers: Vec<Layer<f64>> = vec![
            Layer::dense_init(3, 4, &mut rng),
            Layer::norm(NormKind::Batch, 4),
            Layer::Relu,
        ];
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 1.4], vec![0.0, 0.1, -0.7]]);
        let (y1, _) = forward(&layers, &x, StatsMode::Running).unwrap();
        let (y2, _) = forward(&layers, &x, StatsMode::Running).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn shape_mismatch_reported() {
        let layer: Layer<f64> = Layer::dense_from(Matrix::identity(2), Matrix::zeros(1, 2));
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let err = forward(&[layer], &x, StatsMode::Running).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_variance_batch_is_finite() {
        let layer: Layer<f64> = Layer::norm(NormKind::Batch, 1);
        let x = Matrix::from_rows(&[vec![2.0], vec![2.0]]);
        let (y, _) = forward(&[layer], &x, StatsMode::Batch).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.get(0, 0), 0.0);
    }
}
