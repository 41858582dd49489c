//! Adaptive-moment (Adam) updates over lists of flat tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Indices of tensors whose gradient was non-finite; they were left untouched.
    pub skipped: Vec<usize>,
    pub skipped_names: Vec<String>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<S>> = sizes.into_iter().map(|n| vec![S::zero(); n]).collect();
        Adam {
            v: m.clone(),
            m,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(
        &mut self,
        params: Vec<&mut [S]>,
        grads: &[&[S]],
        config: &AdamConfig,
    ) -> Result<StepReport> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer tensors",
                self.m.len(),
                (params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    format!("optimizer tensor {i}"),
                    self.m[i].len(),
                    (p.len(), g.len()),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = S::lit(config.beta1);
        let b2 = S::lit(config.beta2);
        let one = S::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = S::lit(config.lr);
        let eps = S::lit(config.eps);

        let mut report = StepReport::default();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                report.skipped.push(i);
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(report)
    }
}

/// Scales the gradient set so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: Vec<&mut [S]>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = S::lit(max_norm / norm);
        for g in grads {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}
