//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        steps: u64,
        first: Vec<f64>,
        second: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                steps: 0,
                first: vec![0.0; n_params],
                second: vec![0.0; n_params],
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::numerical("gradient length does not match parameters"));
        }
        match self {
            Optimizer::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *learning_rate * g;
                }
            }
            Optimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
                steps,
                first,
                second,
            } => {
                if first.len() != params.len() {
                    return Err(Error::numerical("optimizer state does not match parameters"));
                }
                *steps += 1;
                let c1 = 1.0 - beta1.powi(*steps as i32);
                let c2 = 1.0 - beta2.powi(*steps as i32);
                for i in 0..params.len() {
                    first[i] = *beta1 * first[i] + (1.0 - *beta1) * grad[i];
                    second[i] = *beta2 * second[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let m = first[i] / c1;
                    let v = second[i] / c2;
                    params[i] -= *learning_rate * m / (v.sqrt() + *epsilon);
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
    fn sgd_step() {
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        let mut p = vec![1.0, -1.0];
        o.step(&mut p, &[2.0, 0.5]).unwrap();
        assert_eq!(p, vec![0.8, -1.05]);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.01, 2);
        let mut p = vec![0.0, 0.0];
        o.step(&mut p, &[3.0, -0.2]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.05, 1);
        let mut p = vec![4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            o.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
