//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Optimizer state: step count plus first/second moments per parameter.
/// Parameters are identified by their position in the slice passed to
/// [`AdamState::step`], which must stay stable across steps.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's grad slot; grads are
    /// cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "adam: parameter count changed ({} vs {})",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let n = p.data().len();
            if self.m[k].len() != n {
                return Err(Error::Dim {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: (1, self.m[k].len()),
                });
            }
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("adam: non-finite gradient".into()));
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let decay = c.lr * c.weight_decay;
            let data = p.data_mut();
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps) + decay * data[i];
            }
            p.clear_grad();
        }
        Ok(())
    }
}
