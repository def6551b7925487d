use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient buffer are
    /// treated as having zero gradient. Gradients are left in place.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::DimensionMismatch("parameter set changed between Adam steps".into()));
        }
        for (k, p) in params.iter().enumerate() {
            if let Some(g) = &p.grad {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {k} at entry {j} is {}", g[j])));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else {
                // zero gradient still decays the moments
                for (m, v) in self.m[k].iter_mut().zip(self.v[k].iter_mut()) {
                    *m *= self.beta1;
                    *v *= self.beta2;
                }
                self.apply(k, p);
                continue;
            };
            for ((m, v), gi) in self.m[k].iter_mut().zip(self.v[k].iter_mut()).zip(&g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            }
            self.apply_corrected(k, p, c1, c2);
            p.grad = Some(g);
        }
        Ok(())
    }

    fn apply(&self, k: usize, p: &mut Tensor) {
        let t = self.step as i32;
        self.apply_corrected(k, p, 1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
    }

    fn apply_corrected(&self, k: usize, p: &mut Tensor, c1: f64, c2: f64) {
        for ((x, m), v) in p.data.iter_mut().zip(&self.m[k]).zip(&self.v[k]) {
            *x -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
    }
}
