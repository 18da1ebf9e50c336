use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn dims<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<(usize, usize)> {
    let (m, n) = match params.weight.shape()[..] {
        [m, n] => (m, n),
        _ => {
            return Err(Error::shape(format!(
                "dense weights must be [out, in], got {:?}",
                params.weight.shape()
            )))
        }
    };
    if input.len() != n {
        return Err(Error::shape(format!(
            "dense layer expects {n} inputs, got {}",
            input.len()
        )));
    }
    Ok((m, n))
}

/// Affine map `W·x + b` over a flattened input.
pub fn dense<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (m, n) = dims(input, params)?;
    let mut out = params.bias.data().to_vec();
    T::gemm(
        m,
        n,
        1,
        T::one(),
        params.weight.data(),
        (n, 1),
        input.data(),
        (1, 1),
        T::one(),
        &mut out,
        (1, 1),
    );
    Tensor::from_vec(&[m], out)
}

/// Accumulates `dW += g·xᵀ`, `db += g`; returns `Wᵀ·g`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    let (m, n) = dims(input, params)?;
    if grad_out.len() != m {
        return Err(Error::shape(format!(
            "dense output gradient has {} values, expected {m}",
            grad_out.len()
        )));
    }
    let g = grad_out.data();
    T::gemm(
        m,
        1,
        n,
        T::one(),
        g,
        (1, 1),
        input.data(),
        (1, 1),
        T::one(),
        grads.weight.data_mut(),
        (n, 1),
    );
    for (b, &gi) in grads.bias.data_mut().iter_mut().zip(g) {
        *b = *b + gi;
    }
    let mut dx = vec![T::zero(); n];
    T::gemm(
        1,
        m,
        n,
        T::one(),
        g,
        (m, 1),
        params.weight.data(),
        (n, 1),
        T::zero(),
        &mut dx,
        (n, 1),
    );
    Tensor::from_vec(input.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(m: usize, n: usize, w: Vec<f64>, b: Vec<f64>) -> LayerParams<f64> {
        LayerParams::new(
            Tensor::from_vec(&[m, n], w).unwrap(),
            Tensor::from_vec(&[m], b).unwrap(),
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_zero_weights() {
        let x = v(&[0.5, -2.0, 3.0]);
        let eye = p(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3]);
        assert_eq!(dense(&x, &eye).unwrap(), x);
        let zero = p(2, 3, vec![0.0; 6], vec![1.5, -1.0]);
        assert_eq!(dense(&x, &zero).unwrap().data(), &[1.5, -1.0]);
    }

    #[test]
    fn two_by_two_arithmetic() {
        let params = p(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0]);
        assert_eq!(dense(&v(&[1.0, 1.0]), &params).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let params = p(2, 2, vec![1.0; 4], vec![0.0; 2]);
        assert!(matches!(dense(&v(&[1.0; 3]), &params), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_outer_product() {
        let params = p(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0]);
        let mut grads = params.zeros_like();
        let dx = dense_backward(&v(&[1.0, -1.0]), &params, &v(&[0.5, 2.0]), &mut grads).unwrap();
        assert_eq!(grads.weight.data(), &[0.5, -0.5, 2.0, -2.0]);
        assert_eq!(grads.bias.data(), &[0.5, 2.0]);
        assert_eq!(dx.data(), &[6.5, 9.0]);
    }
}
