use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Forward state kept for the backward pass: the unfolded input patches.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
    in_channels: usize,
    kernel: usize,
}

fn kernel_dims<T: Real>(params: &LayerParams<T>) -> Result<(usize, usize, usize)> {
    match params.weight.shape()[..] {
        [cout, k, k2, cin] if k == k2 && k % 2 == 1 => Ok((cout, k, cin)),
        _ => Err(Error::shape(format!(
            "convolution kernels must be [out, k, k, in] with odd k, got {:?}",
            params.weight.shape()
        ))),
    }
}

/// Unfolds every k×k same-padded neighborhood into a row of `(ky, kx, c)` values.
fn im2col<T: Real>(input: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    if k == 1 {
        return input.to_vec();
    }
    let r = (k / 2) as isize;
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); h * w * row_len];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * row_len..][..row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    row[(ky * k + kx) * c..][..c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    if k == 1 {
        return cols.to_vec();
    }
    let r = (k / 2) as isize;
    let row_len = k * k * c;
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * row_len..][..row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    for (o, &v) in out[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded (zero fill), stride-1 convolution of an `H×W×Cin` map.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(input, params).map(|(out, _)| out)
}

pub fn conv2d_forward<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (h, w, cin) = input.hwc()?;
    let (cout, k, kcin) = kernel_dims(params)?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "input has {cin} channels but kernels expect {kcin}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("convolution input has an empty spatial extent"));
    }
    let cols = im2col(input.data(), h, w, cin, k);
    let row_len = k * k * cin;
    let mut out = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        out.extend_from_slice(params.bias.data());
    }
    // out^T[Cout x HW] += W[Cout x kkC] * cols^T; the long pixel axis as the
    // GEMM column dimension is markedly faster for narrow layers.
    T::gemm(
        cout,
        row_len,
        h * w,
        T::one(),
        params.weight.data(),
        (row_len, 1),
        &cols,
        (1, row_len),
        T::one(),
        &mut out,
        (1, cout),
    );
    let cache = ConvCache {
        cols,
        height: h,
        width: w,
        in_channels: cin,
        kernel: k,
    };
    Ok((Tensor::from_vec(&[h, w, cout], out)?, cache))
}

/// Accumulates kernel and bias gradients into `grads`; returns the input
/// gradient when `need_input_grad` is set.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut LayerParams<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (cout, k, cin) = kernel_dims(params)?;
    let (h, w) = (cache.height, cache.width);
    if k != cache.kernel || cin != cache.in_channels {
        return Err(Error::MissingTrace);
    }
    if grad_out.shape() != [h, w, cout] {
        return Err(Error::shape(format!(
            "convolution output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [h, w, cout]
        )));
    }
    if grads.weight.shape() != params.weight.shape() || grads.bias.shape() != params.bias.shape() {
        return Err(Error::shape("gradient buffers do not match parameters"));
    }
    let row_len = k * k * cin;
    let hw = h * w;
    let dy = grad_out.data();

    // dW[Cout x kkC] += dY^T * cols
    T::gemm(
        cout,
        hw,
        row_len,
        T::one(),
        dy,
        (1, cout),
        &cache.cols,
        (row_len, 1),
        T::one(),
        grads.weight.data_mut(),
        (row_len, 1),
    );
    let db = grads.bias.data_mut();
    for px in dy.chunks_exact(cout) {
        for (b, &g) in db.iter_mut().zip(px) {
            *b = *b + g;
        }
    }

    if !need_input_grad {
        return Ok(None);
    }
    let mut dcols = vec![T::zero(); hw * row_len];
    T::gemm(
        hw,
        cout,
        row_len,
        T::one(),
        dy,
        (cout, 1),
        params.weight.data(),
        (row_len, 1),
        T::zero(),
        &mut dcols,
        (row_len, 1),
    );
    let dx = col2im(&dcols, h, w, cin, k);
    Ok(Some(Tensor::from_vec(&[h, w, cin], dx)?))
}
