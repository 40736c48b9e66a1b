//! SGD with momentum and an inverse-time learning-rate decay.

use crate::error::{Error, Result};
use crate::model::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::TrainConfig;

/// `lr0 / (1 + decay * epoch)`, epochs counted from 0.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate / (1.0 + cfg.decay * epoch as f64)
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Velocity buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        SgdMomentum {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v <- momentum * v - lr_e * grad`, `p <- p + v`.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>], cfg: &TrainConfig, epoch: usize) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!(
                    "{} params, {} grads, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("{}: param {:?}, grad {:?}, velocity {:?}", p.name, p.value.shape(), g.shape(), v.shape()),
                ));
            }
        }
        let lr = T::lit(learning_rate(cfg, epoch));
        let mu = T::lit(cfg.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv - lr * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "x".into(),
            value: Tensor::scalar(v),
        }]
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = vec![Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_descent() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut p = param(3.0);
        let mut opt = SgdMomentum::new(&p);
        opt.step(&mut p, &[Tensor::scalar(0.75)], &cfg, 0).unwrap();
        assert_eq!(p[0].value.data(), &[2.25]);
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.01);
        assert_eq!(learning_rate(&cfg, 10), 0.01 / (1.0 + 1e-5));
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = learning_rate(&cfg, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn momentum_on_quadratic_matches_recurrence() {
        // f(x) = 0.5 * k * x^2, grad = k x.
        let (k, lr, mu, x0) = (2.0, 0.1, 0.9, 1.0);
        let cfg = TrainConfig {
            learning_rate: lr,
            momentum: mu,
            decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = param(x0);
        let mut opt = SgdMomentum::new(&p);
        for _ in 0..2 {
            let g = Tensor::scalar(k * p[0].value.data()[0]);
            opt.step(&mut p, &[g], &cfg, 0).unwrap();
        }
        // v1 = -0.2, x1 = 0.8; v2 = 0.9 * -0.2 - 0.1 * 1.6 = -0.34, x2 = 0.46
        assert!((p[0].value.data()[0] - 0.46).abs() < 1e-15);
        assert!((opt.velocity()[0].data()[0] + 0.34).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = TrainConfig::default();
        let mut p = param(1.0);
        let mut opt = SgdMomentum::new(&p);
        assert!(opt.step(&mut p, &[Tensor::zeros(vec![2])], &cfg, 0).is_err());
        assert!(opt.step(&mut p, &[], &cfg, 0).is_err());
    }
}
