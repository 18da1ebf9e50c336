//! Central finite-difference checks of every kernel's backward pass.
//!
//! Each check projects the kernel output onto a fixed random tensor `r`,
//! so the scalar objective is `Σ r·f(x)` and the output gradient is `r`.
//! Errors are `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`;
//! the floor keeps exactly-zero gradients (dead ReLUs, pool losers) from
//! dividing by zero.

#![allow(dead_code)]

use pvmap::nn::{self, LayerParams};
use pvmap::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max error between `analytic` and central differences of `f` at `x`.
pub fn compare(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Input, kernel and bias gradients of a 3×3 and a 1×1 convolution.
pub fn conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, cin, cout) in [(3, 2, 3), (1, 3, 2)] {
        let x = random(&[7, 6, cin], &mut rng);
        let p = LayerParams::new(random(&[cout, k, k, cin], &mut rng), random(&[cout], &mut rng)).unwrap();
        let r = random(&[7, 6, cout], &mut rng);
        let (_, cache) = nn::conv2d_forward(&x, &p).unwrap();
        let mut g = p.zeros_like();
        let dx = nn::conv2d_backward(&cache, &p, &r, &mut g, true).unwrap().unwrap();
        worst = worst.max(compare(&x, &dx, |x| dot(&nn::conv2d(x, &p).unwrap(), &r)));
        worst = worst.max(compare(&p.weight, &g.weight, |w| {
            let q = LayerParams::new(w.clone(), p.bias.clone()).unwrap();
            dot(&nn::conv2d(&x, &q).unwrap(), &r)
        }));
        worst = worst.max(compare(&p.bias, &g.bias, |b| {
            let q = LayerParams::new(p.weight.clone(), b.clone()).unwrap();
            dot(&nn::conv2d(&x, &q).unwrap(), &r)
        }));
    }
    worst
}

pub fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep inputs away from the kink so the step never crosses it
    let x = random(&[5, 5, 2], &mut rng);
    let x = Tensor::from_vec(
        x.shape(),
        x.data()
            .iter()
            .map(|&v| if v.abs() < 1e-3 { v + 0.01 } else { v })
            .collect(),
    )
    .unwrap();
    let r = random(&[5, 5, 2], &mut rng);
    let dx = nn::relu_backward(&x, &r).unwrap();
    compare(&x, &dx, |x| dot(&nn::relu(x), &r))
}

/// Input gradient of the 3×3 stride-2 pool on odd and even sizes.
pub fn maxpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (h, w) in [(9, 9), (8, 7)] {
        let x = random(&[h, w, 2], &mut rng);
        let rec = nn::maxpool3x3s2(&x).unwrap();
        let r = random(rec.pooled.shape(), &mut rng);
        let dx = nn::maxpool_backward(&rec, &r).unwrap();
        worst = worst.max(compare(&x, &dx, |x| dot(&nn::maxpool3x3s2(x).unwrap().pooled, &r)));
    }
    worst
}

/// Gradient of unpooling with respect to the pooled values, with the
/// indices held fixed (they are recorded data, not a function of the input).
pub fn max_unpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[9, 9, 3], &mut rng);
    let rec = nn::maxpool3x3s2(&x).unwrap();
    let y = random(rec.pooled.shape(), &mut rng);
    let r = random(&[9, 9, 3], &mut rng);
    let dy = nn::max_unpool_backward(&rec, &r).unwrap();
    compare(&y, &dy, |y| dot(&nn::max_unpool(y, &rec).unwrap(), &r))
}

pub fn dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[12], &mut rng);
    let p = LayerParams::new(random(&[5, 12], &mut rng), random(&[5], &mut rng)).unwrap();
    let r = random(&[5], &mut rng);
    let mut g = p.zeros_like();
    let dx = nn::dense_backward(&x, &p, &r, &mut g).unwrap();
    let mut worst = compare(&x, &dx, |x| dot(&nn::dense(x, &p).unwrap(), &r));
    worst = worst.max(compare(&p.weight, &g.weight, |w| {
        let q = LayerParams::new(w.clone(), p.bias.clone()).unwrap();
        dot(&nn::dense(&x, &q).unwrap(), &r)
    }));
    worst.max(compare(&p.bias, &g.bias, |b| {
        let q = LayerParams::new(p.weight.clone(), b.clone()).unwrap();
        dot(&nn::dense(&x, &q).unwrap(), &r)
    }))
}

/// Mean cross-entropy over a 4×4 map of logit pairs.
pub fn softmax2_xent(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::from_vec(&[4, 4, 2], (0..32).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..2)).collect();
    let out = nn::softmax2_xent(&z, &labels).unwrap();
    compare(&z, &out.grad, |z| nn::softmax2_xent(z, &labels).unwrap().loss)
}

pub fn all(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d(seed)),
        ("relu", relu(seed)),
        ("maxpool3x3s2", maxpool(seed)),
        ("max_unpool", max_unpool(seed)),
        ("dense", dense(seed)),
        ("softmax2_xent", softmax2_xent(seed)),
    ]
}
