//! Plain SGD and Adam with bias correction.

use super::Matrix;
use crate::error::{Error, Result};

pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        check_blocks(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= self.lr * gv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(cfg: AdamConfig, params: &[&Matrix]) -> Self {
        Self::new(cfg, &params.iter().map(|p| p.shape()).collect::<Vec<_>>())
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        check_blocks(params, grads)?;
        assert_eq!(params.len(), self.m.len(), "optimizer built for different block count");
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let m_hat = *mv / b1t;
                let v_hat = *vv / b2t;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

fn check_blocks(params: &[&mut Matrix], grads: &[&Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter blocks vs {} gradient blocks",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {}x{} vs gradient {}x{}",
                p.rows(),
                p.cols(),
                g.rows(),
                g.cols()
            )));
        }
        if !g.is_finite() {
            return Err(Error::GradientOverflow);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_step() {
        let mut p = Matrix::scalar(1.0);
        let g = Matrix::scalar(2.0);
        Sgd::new(0.1).step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.scalar_value() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_contracts_quadratic() {
        // f(x) = x^2, grad = 2x, lr = 0.1 -> x_{k+1} = 0.8 x_k
        let mut x = Matrix::scalar(1.0);
        for _ in 0..100 {
            let g = Matrix::scalar(2.0 * x.scalar_value());
            Sgd::new(0.1).step(&mut [&mut x], &[&g]).unwrap();
        }
        let expected = 0.8f64.powi(100);
        assert!((x.scalar_value() - expected).abs() < 1e-18);
        assert!(x.scalar_value().abs() < 1e-4);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // bias-corrected first step moves by ~lr against the gradient sign
        let mut p = Matrix::scalar(0.0);
        let g = Matrix::scalar(3.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[(1, 1)]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert!(p.scalar_value() < 0.0);
        assert!((p.scalar_value().abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_gradient_is_overflow_error() {
        let mut p = Matrix::scalar(0.0);
        let g = Matrix::scalar(f64::NAN);
        let err = Sgd::new(0.1).step(&mut [&mut p], &[&g]).unwrap_err();
        assert_eq!(err.to_string(), "gradient overflow");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        assert!(matches!(
            Sgd::new(0.1).step(&mut [&mut p], &[&g]),
            Err(Error::Shape(_))
        ));
    }
}
