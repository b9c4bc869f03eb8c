//! SGD with momentum, L2 weight decay and the poly learning-rate policy.
//!
//! Per parameter: `v <- mu * v - lr * (g + lambda * w)`, then `w <- w + v`.
//! Decay only touches tensors flagged as weights (never biases). The
//! iteration counter counts epochs.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR0: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr0: DEFAULT_LR0, momentum: DEFAULT_MOMENTUM, weight_decay: 0.0, power: DEFAULT_POWER, max_iter: 1 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || self.power.is_nan() || self.power < 0.0 {
            return Err(Error::invalid("lr0 and power must be non-negative"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub velocities: Vec<Tensor<T>>,
    pub iteration: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: OptimConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        Ok(OptimState { config, velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(), iteration: 0 })
    }

    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.iteration, &self.config)
    }
}

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, config: &OptimConfig) -> Result<f64> {
    if iter > config.max_iter {
        return Err(Error::invalid(format!("iteration {iter} beyond max_iter {}", config.max_iter)));
    }
    Ok(config.lr0 * (1.0 - iter as f64 / config.max_iter as f64).powf(config.power))
}

/// One update at the learning rate of the current iteration. `decay[i]`
/// enables weight decay for tensor `i`. Nothing is modified when a gradient
/// is non-finite.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], decay: &[bool], state: &mut OptimState<T>) -> Result<()> {
    sgd_step_with_lr(params, grads, decay, state, state.lr()?)
}

pub fn sgd_step_with_lr<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() || params.len() != decay.len() {
        return Err(Error::invalid("parameter, gradient and velocity lists differ in length"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape { layer: format!("parameter {i}"), detail: format!("{:?} vs gradient {:?}", p.shape(), g.shape()) });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let mu = T::of(state.config.momentum);
    let lr = T::of(lr);
    let lambda = T::of(state.config.weight_decay);
    for (((p, g), v), &dec) in params.iter_mut().zip(grads).zip(&mut state.velocities).zip(decay) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = if dec { gi + lambda * *w } else { gi };
            *vi = mu * *vi - lr * step;
            *w = *w + *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f64, weight_decay: f64) -> OptimConfig {
        OptimConfig { lr0: 1e-3, momentum, weight_decay, power: 0.9, max_iter: 10 }
    }

    #[test]
    fn poly_values() {
        let c = OptimConfig { max_iter: 100, ..cfg(0.9, 0.0) };
        assert_eq!(poly_lr(0, &c).unwrap(), 1e-3);
        assert_eq!(poly_lr(100, &c).unwrap(), 0.0);
        assert!((poly_lr(50, &c).unwrap() - 5.35887e-4).abs() < 1e-9);
        assert!((poly_lr(50, &c).unwrap() - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(101, &c).is_err());
    }

    #[test]
    fn vanilla_sgd_and_fixed_point() {
        let mut p = vec![Tensor::vector(vec![1.0f64, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, 0.25])];
        let mut s = OptimState::new(cfg(0.0, 0.0), &p).unwrap();
        sgd_step(&mut p, &g, &[true], &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 1e-3 * 0.5, -2.0 - 1e-3 * 0.25]);

        let mut p = vec![Tensor::vector(vec![1.0f64, -2.0])];
        let mut s = OptimState::new(cfg(0.9, 0.0), &p).unwrap();
        sgd_step(&mut p, &[Tensor::zeros(&[2])], &[true], &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = vec![Tensor::vector(vec![1.0f64]), Tensor::vector(vec![1.0])];
        let g = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut s = OptimState::new(cfg(0.0, 0.1), &p).unwrap();
        sgd_step(&mut p, &g, &[true, false], &mut s).unwrap();
        assert!((p[0].data()[0] - 0.9999).abs() < 1e-15);
        assert_eq!(p[1].data()[0], 1.0);
    }

    #[test]
    fn decay_adds_lambda_w_to_gradient() {
        let w0 = vec![0.5f64, -1.5, 2.0];
        let g = [Tensor::vector(vec![0.1, 0.2, -0.3])];
        let run = |lambda: f64, grad: &Tensor<f64>| {
            let mut p = vec![Tensor::vector(w0.clone())];
            let mut s = OptimState::new(cfg(0.9, lambda), &p).unwrap();
            sgd_step(&mut p, std::slice::from_ref(grad), &[true], &mut s).unwrap();
            p[0].data().to_vec()
        };
        let decayed = run(0.01, &g[0]);
        let shifted: Vec<f64> = g[0].data().iter().zip(&w0).map(|(g, w)| g + 0.01 * w).collect();
        let manual = run(0.0, &Tensor::vector(shifted));
        for (a, b) in decayed.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::vector(vec![1.0f64])];
        let mut s = OptimState::new(cfg(0.9, 0.0), &p).unwrap();
        let err = sgd_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &[true], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p[0].data(), &[1.0]);
        assert!(OptimState::<f64>::new(cfg(1.0, 0.0), &p).is_err());
    }
}
