use serde::{Deserialize, Serialize};

use crate::error::{LorsError, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// First/second-moment method with bias correction.
    Adaptive,
}

impl std::str::FromStr for Optimizer {
    type Err = LorsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adaptive" | "adam" => Ok(Optimizer::Adaptive),
            other => Err(LorsError::arg(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: Optimizer::Sgd, lr, ..Self::adaptive(lr) }
    }

    pub fn adaptive(lr: f64) -> Self {
        Self { kind: Optimizer::Adaptive, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(LorsError::arg(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers for an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    config: OptimConfig,
    step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[DenseMatrix], &[DenseMatrix]) {
        (&self.first, &self.second)
    }

    /// One update of `params` in place. The parameter list must keep the same
    /// order and shapes across calls.
    pub fn update(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(LorsError::arg(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(LorsError::shape("optimizer gradient", g.shape(), p.shape()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(LorsError::arg("parameter list changed between optimizer steps"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let pd = p.data_mut();
            for (i, (&gi, pi)) in g.data().iter().zip(pd.iter_mut()).enumerate() {
                let gi = gi + c.weight_decay * *pi;
                match c.kind {
                    Optimizer::Sgd => *pi -= c.lr * gi,
                    Optimizer::Adaptive => {
                        let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                        let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        *pi -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_minus_lr_gradient() {
        let mut p = DenseMatrix::from_rows(&[&[1.0, 2.0]]);
        let g = DenseMatrix::from_rows(&[&[0.5, -1.0]]);
        let mut opt = OptimState::new(OptimConfig::sgd(0.1)).unwrap();
        opt.update(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn first_adaptive_step_moves_by_lr_times_sign() {
        let mut p = DenseMatrix::from_rows(&[&[0.0, 0.0]]);
        let g = DenseMatrix::from_rows(&[&[3.0, -0.25]]);
        let mut opt = OptimState::new(OptimConfig::adaptive(0.01)).unwrap();
        opt.update(&mut [&mut p], &[g]).unwrap();
        assert!((p.get(0, 0) + 0.01).abs() < 1e-9);
        assert!((p.get(0, 1) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn moment_buffers_follow_parameter_shapes() {
        let mut a = DenseMatrix::zeros(2, 3);
        let mut b = DenseMatrix::zeros(4, 1);
        let mut opt = OptimState::new(OptimConfig::adaptive(0.1)).unwrap();
        opt.update(&mut [&mut a, &mut b], &[DenseMatrix::ones(2, 3), DenseMatrix::ones(4, 1)]).unwrap();
        let (m, v) = opt.moments();
        assert_eq!(m[0].shape(), (2, 3));
        assert_eq!(v[1].shape(), (4, 1));
        let mut c = DenseMatrix::zeros(5, 5);
        assert!(opt.update(&mut [&mut c], &[DenseMatrix::ones(5, 5)]).is_err());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = DenseMatrix::from_rows(&[&[1.5, -2.0]]);
        let before = p.clone();
        for kind in [OptimConfig::sgd(0.0), OptimConfig::adaptive(0.0)] {
            let mut opt = OptimState::new(kind).unwrap();
            opt.update(&mut [&mut p], &[DenseMatrix::ones(1, 2)]).unwrap();
            assert!(p.bitwise_eq(&before));
        }
    }
}
