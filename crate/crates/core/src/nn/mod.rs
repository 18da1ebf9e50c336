//! Forward/backward kernels and the SGD optimizer the networks are built from.
//!
//! Every kernel is a free function over [`Tensor`]s. Backward functions
//! accumulate parameter gradients into caller-owned buffers so a mini-batch
//! can be summed sample by sample.

mod conv;
mod dense;
mod optim;
mod pool;
mod softmax;

pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvCache};
pub use dense::{dense, dense_backward};
pub use optim::{OptimizerState, SgdConfig};
pub use pool::{max_unpool, max_unpool_backward, maxpool3x3s2, maxpool_backward, PoolRecord};
pub use softmax::{softmax2, softmax2_xent, softmax2_xent_scaled, XentOutput};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights (or kernels) plus one bias per output channel or neuron.
///
/// Convolution kernels are stored `[out, k, k, in]`; dense weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let out = *weight
            .shape()
            .first()
            .ok_or_else(|| Error::shape("weight tensor has rank 0"))?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(LayerParams { weight, bias })
    }

    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(input.shape(), data).expect("shape preserved")
}

/// Gradient of [`relu`] given the layer's forward input.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu gradient {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 2.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let neg = Tensor::from_vec(&[4], vec![-0.1, -1.0, -2.0, -1e9]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_backward_masks_nonpositive_inputs() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 7.0]);
    }

    #[test]
    fn layer_params_rejects_bias_mismatch() {
        let w = Tensor::<f64>::zeros(&[4, 3]);
        assert!(LayerParams::new(w.clone(), Tensor::zeros(&[4])).is_ok());
        assert!(LayerParams::new(w, Tensor::zeros(&[3])).is_err());
    }
}
