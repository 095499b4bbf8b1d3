//! Layer stack primitives: dense, relu, and normalization layers.
//!
//! A [`Param`] bundles a value with its gradient and momentum buffer so the
//! optimizer can be a single pass over a layer slice. Normalization layers
//! carry both affine parameters (gamma/beta, the only parameters a test-time
//! update may touch) and frozen running statistics captured at source
//! training time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::matrix::Matrix;
use crate::scalar::{cast, Scalar};

/// A learnable tensor with its gradient and SGD momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub momentum_buf: Matrix<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Matrix<T>, trainable: bool) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            momentum_buf: Matrix::zeros(r, c),
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Which parameter of a layer a gradient or filter refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    DenseWeight,
    DenseBias,
    NormGamma,
    NormBeta,
}

/// Address of a parameter within a layer stack, used by backward filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSite {
    pub layer: usize,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Normalize each feature over the batch dimension.
    Batch,
    /// Normalize each sample over the feature dimension.
    Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<T> {
    pub kind: NormKind,
    /// Per-feature scale, `1 x features`.
    pub gamma: Param<T>,
    /// Per-feature shift, `1 x features`.
    pub beta: Param<T>,
    /// Statistics captured at source-training completion; never updated
    /// during adaptation.
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
    pub eps: T,
}

impl<T: Scalar> NormLayer<T> {
    pub fn features(&self) -> usize {
        self.gamma.value.cols()
    }
}

/// Default epsilon inside normalization denominators.
pub fn default_eps<T: Scalar>() -> T {
    cast(1e-5)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense {
        /// `in x out`.
        weight: Param<T>,
        /// `1 x out`.
        bias: Param<T>,
    },
    Relu,
    Norm(NormLayer<T>),
}

impl<T: Scalar> Layer<T> {
    /// Dense layer with He-style normal init, weights `in x out`.
    pub fn dense_init<R: Rng>(in_w: usize, out_w: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_w as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let mut w = Matrix::zeros(in_w, out_w);
        for v in w.data_mut() {
            *v = cast(dist.sample(rng));
        }
        Layer::Dense {
            weight: Param::new(w, true),
            bias: Param::new(Matrix::zeros(1, out_w), true),
        }
    }

    pub fn dense_from(weight: Matrix<T>, bias: Matrix<T>) -> Self {
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), weight.cols());
        Layer::Dense {
            weight: Param::new(weight, true),
            bias: Param::new(bias, true),
        }
    }

    /// Fresh normalization layer: gamma = 1, beta = 0, unit running variance.
    pub fn norm(kind: NormKind, features: usize) -> Self {
        Layer::Norm(NormLayer {
            kind,
            gamma: Param::new(Matrix::filled(1, features, T::one()), true),
            beta: Param::new(Matrix::zeros(1, features), true),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, T::one()),
            eps: default_eps(),
        })
    }

    /// Output width given the input width, or `None` on mismatch.
    pub fn out_width(&self, in_w: usize) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => {
                (weight.value.rows() == in_w).then(|| weight.value.cols())
            }
            Layer::Relu => Some(in_w),
            Layer::Norm(n) => (n.features() == in_w).then(|| in_w),
        }
    }

    pub fn params(&self) -> Vec<(ParamKind, &Param<T>)> {
        match self {
            Layer::Dense { weight, bias } => vec![
                (ParamKind::DenseWeight, weight),
                (ParamKind::DenseBias, bias),
            ],
            Layer::Relu => vec![],
            Layer::Norm(n) => vec![(ParamKind::NormGamma, &n.gamma), (ParamKind::NormBeta, &n.beta)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Param<T>)> {
        match self {
            Layer::Dense { weight, bias } => vec![
                (ParamKind::DenseWeight, weight),
                (ParamKind::DenseBias, bias),
            ],
            Layer::Relu => vec![],
            Layer::Norm(n) => vec![
                (ParamKind::NormGamma, &mut n.gamma),
                (ParamKind::NormBeta, &mut n.beta),
            ],
        }
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Param<T>> {
        self.params().into_iter().find(|(k, _)| *k == kind).map(|(_, p)| p)
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Param<T>> {
        self.params_mut()
            .into_iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, p)| p)
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, Layer::Norm(_))
    }
}

/// Marks every parameter in the slice with the given trainable flag.
pub fn set_trainable<T: Scalar>(layers: &mut [Layer<T>], trainable: bool) {
    for layer in layers {
        for (_, p) in layer.params_mut() {
            p.trainable = trainable;
        }
    }
}

/// Freezes everything except normalization gamma/beta, which become
/// trainable. This is the adaptation-time parameter set.
pub fn set_norm_affine_trainable_only<T: Scalar>(layers: &mut [Layer<T>]) {
    for layer in layers {
        let is_norm = layer.is_norm();
        for (_, p) in layer.params_mut() {
            p.trainable = is_norm;
        }
    }
}

/// True if any layer in the slice is a normalization layer.
pub fn has_norm_layer<T: Scalar>(layers: &[Layer<T>]) -> bool {
    layers.iter().any(Layer::is_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_affine_only_marking() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut layers: Vec<Layer<f64>> = vec![
            Layer::dense_init(3, 4, &mut rng),
            Layer::norm(NormKind::Batch, 4),
            Layer::Relu,
        ];
        set_norm_affine_trainable_only(&mut layers);
        assert!(!layers[0].param(ParamKind::DenseWeight).unwrap().trainable);
        assert!(!layers[0].param(ParamKind::DenseBias).unwrap().trainable);
        assert!(layers[1].param(ParamKind::NormGamma).unwrap().trainable);
        assert!(layers[1].param(ParamKind::NormBeta).unwrap().trainable);
    }

    #[test]
    fn width_chain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let dense: Layer<f64> = Layer::dense_init(3, 4, &mut rng);
        assert_eq!(dense.out_width(3), Some(4));
        assert_eq!(dense.out_width(2), None);
        let norm: Layer<f64> = Layer::norm(NormKind::Layer, 4);
        assert_eq!(norm.out_width(4), Some(4));
        assert_eq!(norm.out_width(5), None);
    }
}
