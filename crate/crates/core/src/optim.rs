//! Adam optimizer over named parameter stores.

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators keyed by parameter path.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: GradMap,
    v: GradMap,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: GradMap::new(),
            v: GradMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update: p -= lr * mhat / (sqrt(vhat) + eps) with bias-corrected
    /// moments. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (path, g) in grads {
            let p = params
                .get_mut(path)
                .ok_or_else(|| Error::UnknownParam(path.clone()))?;
            if p.data.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: (p.rows, p.cols),
                    rhs: (1, g.len()),
                });
            }
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
