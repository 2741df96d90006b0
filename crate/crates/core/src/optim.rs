use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order update rule with its running moments. Weight decay is the
/// coupled L2 form (added to the gradient).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "learning rate {lr} and weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(Self {
            kind,
            lr,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("optimizer got mismatched parameter and gradient lists"));
        }
        if self.lr == 0.0 {
            return Ok(());
        }
        if self.m.is_empty() && self.kind == Optimizer::Adam {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (bc1, bc2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::contract("gradient shape differs from parameter shape"));
            }
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let grad = gj.f64() + self.weight_decay * w.f64();
                let delta = match self.kind {
                    Optimizer::Sgd => self.lr * grad,
                    Optimizer::Adam => {
                        let m = &mut self.m[k][j];
                        let v = &mut self.v[k][j];
                        *m = BETA1 * *m + (1.0 - BETA1) * grad;
                        *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
                        self.lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS)
                    }
                };
                *w = S::from_f64_lossy(w.f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let g = Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let mut o = OptimizerState::new(Optimizer::Sgd, 0.1, 0.0).unwrap();
        o.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let g = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let mut o = OptimizerState::new(Optimizer::Adam, 0.01, 0.0).unwrap();
        o.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_rate_leaves_bits_alone() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[-0.0, 1.0]).unwrap();
        let before = p.clone();
        let g = Tensor::from_f64(&[2], &[-1.0, 1.0]).unwrap();
        OptimizerState::new(Optimizer::Sgd, 0.0, 0.0)
            .unwrap()
            .step(&mut [&mut p], &[g])
            .unwrap();
        assert!(p.bitwise_eq(&before));
    }
}
