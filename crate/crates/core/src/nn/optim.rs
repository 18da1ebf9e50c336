use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum SGD with coupled L2 decay:
/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`.
///
/// Decay applies only to tensors flagged in `decay` (weights, not biases).
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: SgdConfig, shapes: &[&[usize]]) -> Result<Self> {
        if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if config.weight_decay.is_nan() || config.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        Ok(OptimizerState {
            config,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], decay: &[bool]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape(
                "optimizer step: parameter, gradient and state counts differ",
            ));
        }
        let mu = T::lit(self.config.momentum);
        let lr = T::lit(self.config.learning_rate);
        let wd = T::lit(self.config.weight_decay);
        for (((w, g), v), &d) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(decay) {
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "optimizer step: parameter {:?} vs gradient {:?}",
                    w.shape(),
                    g.shape()
                )));
            }
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let reg = if d { gi + wd * *wi } else { gi };
                *vi = mu * *vi - lr * reg;
                *wi = *wi + *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn run(cfg: SgdConfig, w0: f64, g: f64, steps: usize, decay: bool) -> (f64, f64) {
        let mut state = OptimizerState::<f64>::new(cfg, &[&[1]]).unwrap();
        let mut w = scalar(w0);
        let g = scalar(g);
        for _ in 0..steps {
            state.step(&mut [&mut w], &[&g], &[decay]).unwrap();
        }
        (w.data()[0], state.velocity()[0].data()[0])
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let cfg = SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert_eq!(run(cfg, 0.37, 0.0, 3, true), (0.37, 0.0));
    }

    #[test]
    fn one_step_of_decay() {
        let cfg = SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        };
        let (w, v) = run(cfg, 1.0, 0.0, 1, true);
        assert!((v - -1e-7).abs() < 1e-20);
        assert!((w - 0.9999999).abs() < 1e-15);
        // biases are not decayed
        assert_eq!(run(cfg, 1.0, 0.0, 1, false), (1.0, 0.0));
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let cfg = SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (w, v) = run(cfg, 2.0, 1.0, 2, true);
        assert!((w - (2.0 - 0.001 - 0.0019)).abs() < 1e-15);
        assert!((v - -0.0019).abs() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let bad = SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(OptimizerState::<f32>::new(bad, &[]).is_err());
        let bad = SgdConfig {
            learning_rate: 0.1,
            momentum: 1.0,
            weight_decay: 0.0,
        };
        assert!(OptimizerState::<f32>::new(bad, &[]).is_err());
    }
}
