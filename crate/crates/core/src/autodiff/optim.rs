use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad().is_none()) {
            return Err(Error::Numerical(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            self.m = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (pi, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let grad = tensor.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
                    for (k, (p, g)) in tensor.data_mut().iter_mut().zip(&grad).enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
