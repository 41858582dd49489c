use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::LifConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub timesteps: usize,
    pub hidden_sizes: Vec<usize>,
    /// Weight of this stage's loss in the combined objective.
    pub lambda: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            timesteps: 1,
            hidden_sizes: vec![64],
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub pop_in: usize,
    pub pop_out: usize,
    pub stages: Vec<StageConfig>,
    pub lif: LifConfig,
    /// Encoding range per observation dimension.
    pub obs_low: Vec<f64>,
    pub obs_high: Vec<f64>,
    pub init_log_std: f64,
    /// Let the shrink gradient flow through the population mean.
    pub shrink_through_mean: bool,
    pub seed: u64,
}

impl Default for NetworkSpec {
    /// Three stages `T = (3, 2, 1)`, one hidden layer of 64 per stage, sized
    /// for the point-mass tracking observation.
    fn default() -> Self {
        let stage = |timesteps, lambda| StageConfig {
            timesteps,
            hidden_sizes: vec![64],
            lambda,
        };
        NetworkSpec {
            obs_dim: 6,
            act_dim: 2,
            pop_in: 10,
            pop_out: 10,
            stages: vec![stage(3, 0.2), stage(2, 0.2), stage(1, 0.6)],
            lif: LifConfig::default(),
            obs_low: vec![-2.0, -2.0, -1.0, -1.0, -3.0, -3.0],
            obs_high: vec![2.0, 2.0, 1.0, 1.0, 3.0, 3.0],
            init_log_std: -0.5,
            shrink_through_mean: true,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    /// Collects every violated constraint into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.obs_dim == 0 {
            problems.push("obs_dim must be >= 1".to_string());
        }
        if self.act_dim == 0 {
            problems.push("act_dim must be >= 1".to_string());
        }
        if self.pop_in == 0 || self.pop_out == 0 {
            problems.push("pop_in and pop_out must be >= 1".to_string());
        }
        if self.obs_low.len() != self.obs_dim || self.obs_high.len() != self.obs_dim {
            problems.push(format!(
                "obs_low/obs_high must have obs_dim = {} entries (got {}/{})",
                self.obs_dim,
                self.obs_low.len(),
                self.obs_high.len()
            ));
        } else {
            for (i, (lo, hi)) in self.obs_low.iter().zip(&self.obs_high).enumerate() {
                if !(lo < hi) {
                    problems.push(format!("obs range {i}: low {lo} must be < high {hi}"));
                }
            }
        }
        if self.stages.is_empty() {
            problems.push("at least one stage is required".to_string());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.timesteps == 0 {
                problems.push(format!("stage {} has T = 0", i + 1));
            }
            if stage.hidden_sizes.is_empty() || stage.hidden_sizes.contains(&0) {
                problems.push(format!("stage {} needs non-empty, non-zero hidden_sizes", i + 1));
            }
            if !(0.0..=1.0).contains(&stage.lambda) {
                problems.push(format!("stage {} lambda {} outside [0, 1]", i + 1, stage.lambda));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].timesteps >= w[0].timesteps {
                problems.push(format!(
                    "stage timesteps must strictly decrease ({} then {})",
                    w[0].timesteps, w[1].timesteps
                ));
            }
        }
        let total: f64 = self.stages.iter().map(|s| s.lambda).sum();
        if !self.stages.is_empty() && (total - 1.0).abs() > 1e-9 {
            problems.push(format!("stage lambdas must sum to 1, got {total}"));
        }
        if !self.init_log_std.is_finite() {
            problems.push("init_log_std must be finite".to_string());
        }
        if let Err(e) = self.lif.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn input_neurons(&self) -> usize {
        self.obs_dim * self.pop_in
    }

    pub fn output_neurons(&self) -> usize {
        self.act_dim * self.pop_out
    }

    pub fn aux_heads(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.lambda).collect()
    }

    /// `(n_in, n_out)` of every main-path LIF layer in order, output layer last.
    pub fn main_layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut width = self.input_neurons();
        for stage in &self.stages {
            for &h in &stage.hidden_sizes {
                shapes.push((width, h));
                width = h;
            }
        }
        shapes.push((width, self.output_neurons()));
        shapes
    }

    /// Number of trainable scalars, computed without building the network.
    pub fn param_count(&self) -> usize {
        let out = self.output_neurons();
        let encoder = 2 * self.input_neurons();
        let layers: usize = self
            .main_layer_shapes()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        let shrinks: usize = self
            .stages
            .windows(2)
            .map(|w| w[0].timesteps * w[1].timesteps)
            .sum();
        let decoder = out + self.act_dim;
        let aux: usize = self.stages[..self.aux_heads()]
            .iter()
            .map(|s| {
                let h = *s.hidden_sizes.last().unwrap_or(&0);
                h * out + out + decoder
            })
            .sum();
        encoder + layers + shrinks + decoder + aux + self.act_dim
    }

    /// Same architecture with stage timesteps `(t + I − 1, …, t + 1, t)`.
    pub fn with_final_timesteps(&self, t_final: usize) -> Self {
        let mut spec = self.clone();
        let n = spec.stages.len();
        for (i, stage) in spec.stages.iter_mut().enumerate() {
            stage.timesteps = t_final + (n - 1 - i);
        }
        spec
    }

    /// Tiny architecture used by gradient checks.
    pub fn tiny() -> Self {
        NetworkSpec {
            obs_dim: 1,
            act_dim: 1,
            pop_in: 2,
            pop_out: 2,
            stages: vec![
                StageConfig {
                    timesteps: 2,
                    hidden_sizes: vec![3],
                    lambda: 0.4,
                },
                StageConfig {
                    timesteps: 1,
                    hidden_sizes: vec![3],
                    lambda: 0.6,
                },
            ],
            lif: LifConfig::default(),
            obs_low: vec![-1.0],
            obs_high: vec![1.0],
            init_log_std: -0.5,
            shrink_through_mean: true,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        NetworkSpec::default().validate().unwrap();
        NetworkSpec::tiny().validate().unwrap();
    }

    #[test]
    fn validation_reports_every_problem() {
        let mut spec = NetworkSpec::default();
        spec.stages[1].timesteps = 3;
        spec.stages[2].lambda = 0.9;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("strictly decrease"));
        assert!(msg.contains("sum to 1"));
    }

    #[test]
    fn final_timestep_sweep_decreases_by_one_per_stage() {
        let spec = NetworkSpec::default().with_final_timesteps(2);
        let t: Vec<usize> = spec.stages.iter().map(|s| s.timesteps).collect();
        assert_eq!(t, vec![4, 3, 2]);
    }
}
