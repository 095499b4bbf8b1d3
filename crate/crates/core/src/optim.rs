//! SGD with momentum over a layer slice.

use crate::layer::Layer;
use crate::scalar::Scalar;

/// One optimizer step over every trainable parameter in the slice:
/// `buf <- momentum * buf + grad; value <- value - lr * buf`, after which the
/// gradients of the stepped parameters are zeroed. Parameters with
/// `trainable = false` are left bitwise untouched, gradients included.
pub fn sgd_step<T: Scalar>(layers: &mut [Layer<T>], lr: T, momentum: T) {
    assert!(lr >= T::zero(), "learning rate must be non-negative");
    assert!(
        momentum >= T::zero() && momentum < T::one(),
        "momentum must be in [0, 1)"
    );
    for layer in layers {
        for (_, p) in layer.params_mut() {
            if !p.trainable {
                continue;
            }
            for k in 0..p.value.data().len() {
                let buf = momentum * p.momentum_buf.data()[k] + p.grad.data()[k];
                p.momentum_buf.data_mut()[k] = buf;
                p.value.data_mut()[k] = p.value.data()[k] - lr * buf;
            }
            p.zero_grad();
        }
    }
}

/// Zeroes every gradient buffer in the slice (trainable or not).
pub fn zero_grads<T: Scalar>(layers: &mut [Layer<T>]) {
    for layer in layers {
        for (_, p) in layer.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn one_param_layer(grad: f64, trainable: bool) -> Layer<f64> {
        let mut l = Layer::dense_from(Matrix::filled(1, 1, 1.0), Matrix::zeros(1, 1));
        if let Layer::Dense { weight, bias } = &mut l {
            weight.grad = Matrix::filled(1, 1, grad);
            weight.trainable = trainable;
            bias.trainable = false;
        }
        l
    }

    fn weight_of(l: &Layer<f64>) -> (f64, f64, f64) {
        if let Layer::Dense { weight, .. } = l {
            (
                weight.value.get(0, 0),
                weight.momentum_buf.get(0, 0),
                weight.grad.get(0, 0),
            )
        } else {
            unreachable!()
        }
    }

    #[test]
    fn zero_lr_updates_buffer_only() {
        let mut layers = vec![one_param_layer(2.0, true)];
        sgd_step(&mut layers, 0.0, 0.9);
        let (v, buf, g) = weight_of(&layers[0]);
        assert_eq!(v, 1.0);
        assert_eq!(buf, 2.0);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn plain_sgd_no_momentum() {
        let mut layers = vec![one_param_layer(1.0, true)];
        sgd_step(&mut layers, 0.1, 0.0);
        let (v, _, _) = weight_of(&layers[0]);
        assert!((v - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_deltas() {
        // grad = 1 twice with momentum 0.9: deltas 0.1 then 0.19.
        let mut layers = vec![one_param_layer(1.0, true)];
        sgd_step(&mut layers, 0.1, 0.9);
        let (v1, buf1, _) = weight_of(&layers[0]);
        assert!((v1 - 0.9).abs() < 1e-15);
        assert!((buf1 - 1.0).abs() < 1e-15);
        if let Layer::Dense { weight, .. } = &mut layers[0] {
            weight.grad = Matrix::filled(1, 1, 1.0);
        }
        sgd_step(&mut layers, 0.1, 0.9);
        let (v2, buf2, _) = weight_of(&layers[0]);
        assert!((buf2 - 1.9).abs() < 1e-15);
        assert!((v2 - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn frozen_param_bitwise_unchanged() {
        let mut layers = vec![one_param_layer(5.0, false)];
        let before = layers.clone();
        sgd_step(&mut layers, 0.1, 0.9);
        assert_eq!(layers, before);
    }
}
