use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const WINDOW: usize = 3;
const STRIDE: usize = 2;

/// Output of a 3×3 stride-2 max pool, with what unpooling needs to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord<T> {
    pub pooled: Tensor<T>,
    /// For each pooled value (row-major over `[h, w, c]`), the flat spatial
    /// index `y * width + x` of its maximum in the pre-pool grid.
    pub argmax: Vec<usize>,
    /// `(height, width)` of the pre-pool map.
    pub pre_pool_shape: (usize, usize),
}

fn pooled_len(n: usize) -> usize {
    (n - WINDOW) / STRIDE + 1
}

/// 3×3 max pooling, stride 2, no padding. Ties go to the first element in
/// row-major window order.
pub fn maxpool3x3s2<T: Real>(input: &Tensor<T>) -> Result<PoolRecord<T>> {
    let (h, w, c) = input.hwc()?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::shape(format!(
            "{h}x{w} input is smaller than the 3x3 pooling window"
        )));
    }
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let x = input.data();
    let mut pooled = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let (y0, x0) = (oy * STRIDE, ox * STRIDE);
                let mut best = y0 * w + x0;
                let mut best_v = x[best * c + ch];
                for dy in 0..WINDOW {
                    for dx in 0..WINDOW {
                        let idx = (y0 + dy) * w + x0 + dx;
                        let v = x[idx * c + ch];
                        if v > best_v {
                            best_v = v;
                            best = idx;
                        }
                    }
                }
                pooled.push(best_v);
                argmax.push(best);
            }
        }
    }
    Ok(PoolRecord {
        pooled: Tensor::from_vec(&[oh, ow, c], pooled)?,
        argmax,
        pre_pool_shape: (h, w),
    })
}

/// Routes pooled-output gradients back to the argmax cells (summing where
/// overlapping windows share one).
pub fn maxpool_backward<T: Real>(record: &PoolRecord<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check_pooled(record, grad_out)?;
    let (h, w) = record.pre_pool_shape;
    let c = record.pooled.shape()[2];
    let mut dx = vec![T::zero(); h * w * c];
    for (i, (&g, &loc)) in grad_out.data().iter().zip(&record.argmax).enumerate() {
        let slot = loc * c + i % c;
        dx[slot] = dx[slot] + g;
    }
    Tensor::from_vec(&[h, w, c], dx)
}

fn check_pooled<T: Real>(record: &PoolRecord<T>, t: &Tensor<T>) -> Result<()> {
    if t.shape() != record.pooled.shape() {
        return Err(Error::shape(format!(
            "tensor {:?} does not match pool record {:?}",
            t.shape(),
            record.pooled.shape()
        )));
    }
    Ok(())
}

/// Scatters `pooled` into a zero map of the recorded pre-pool size, each
/// value at its recorded argmax. When windows share an argmax the later
/// writer in row-major order wins.
pub fn max_unpool<T: Real>(pooled: &Tensor<T>, record: &PoolRecord<T>) -> Result<Tensor<T>> {
    check_pooled(record, pooled)?;
    let (h, w) = record.pre_pool_shape;
    let c = pooled.shape()[2];
    let mut out = vec![T::zero(); h * w * c];
    for (i, (&v, &loc)) in pooled.data().iter().zip(&record.argmax).enumerate() {
        out[loc * c + i % c] = v;
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Gradient of [`max_unpool`]: gathers at each argmax. Values overwritten by a
/// later writer did not reach the output and receive zero.
pub fn max_unpool_backward<T: Real>(record: &PoolRecord<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = record.pre_pool_shape;
    let c = record.pooled.shape()[2];
    if grad_out.shape() != [h, w, c] {
        return Err(Error::shape(format!(
            "unpool gradient {:?}, expected {:?}",
            grad_out.shape(),
            [h, w, c]
        )));
    }
    let mut writer = vec![usize::MAX; h * w * c];
    for (i, &loc) in record.argmax.iter().enumerate() {
        writer[loc * c + i % c] = i;
    }
    let g = grad_out.data();
    let data = record
        .argmax
        .iter()
        .enumerate()
        .map(|(i, &loc)| {
            let slot = loc * c + i % c;
            if writer[slot] == i {
                g[slot]
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(record.pooled.shape(), data)
}
