//! A common face for the spiking actor and the dense baseline so the PPO
//! harness can train either. The harness works in `f64`; actors convert.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{DenseActor, Mlp, MlpCache};
use crate::network::{ActorTrace, Dynamics, Mode, PopSan, PopSanParams};
use crate::optim::{clip_global_norm, Adam, AdamConfig, StepReport};
use crate::rng::from_noise_seed;
use crate::scalar::Scalar;

/// Gaussian means produced by one actor evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    /// One mean per auxiliary head; empty when heads were not run.
    pub aux_means: Vec<Vec<f64>>,
}

pub trait Policy: Clone + Send + Sync {
    type Trace: Send;
    type Grads: Clone + Send;
    type Optimizer: Send + Sync;

    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Number of auxiliary heads (zero for single-head actors).
    fn aux_heads(&self) -> usize;
    /// Stage loss weights, auxiliary heads first, final head last.
    fn stage_weights(&self) -> Vec<f64>;
    /// Number of spiking layers reported by [`Policy::layer_spike_rates`].
    fn spiking_layers(&self) -> usize;

    /// Means for `obs`. All randomness inside the actor is drawn from
    /// `noise_seed`, so the same seed replays the same internal noise.
    fn forward(&self, obs: &[f64], with_aux: bool, noise_seed: u64) -> Result<(PolicyOutput, Self::Trace)>;

    fn log_std(&self) -> Vec<f64>;

    fn zero_grads(&self) -> Self::Grads;

    /// Adds the gradient of `Σ weights[i]·L_i` to `grads`, given per-head
    /// mean gradients (unweighted) and a gradient for the shared log-std.
    fn accumulate_grads(
        &self,
        trace: &Self::Trace,
        d_mean: &[f64],
        d_aux: &[Vec<f64>],
        weights: &[f64],
        d_log_std: &[f64],
        grads: &mut Self::Grads,
    ) -> Result<()>;

    fn merge_grads(into: &mut Self::Grads, other: &Self::Grads);
    fn scale_grads(grads: &mut Self::Grads, factor: f64);
    /// Rescales to at most `max_norm`; returns the norm before clipping.
    fn clip_grads(grads: &mut Self::Grads, max_norm: f64) -> f64;

    fn new_optimizer(&self) -> Self::Optimizer;
    fn apply_update(&mut self, grads: &Self::Grads, opt: &mut Self::Optimizer, cfg: &AdamConfig)
        -> Result<StepReport>;

    /// Mean firing rate per spiking layer; empty for dense actors.
    fn layer_spike_rates(trace: &Self::Trace) -> Vec<f64>;

    fn save_checkpoint(&self, path: &Path) -> Result<()>;
}

fn to_s<S: Scalar>(x: &[f64]) -> Vec<S> {
    x.iter().map(|&v| S::lit(v)).collect()
}

fn to_f64<S: Scalar>(x: &[S]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

impl<S: Scalar> Policy for PopSan<S> {
    type Trace = ActorTrace<S>;
    type Grads = PopSanParams<S>;
    type Optimizer = Adam<S>;

    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.spec.act_dim
    }

    fn aux_heads(&self) -> usize {
        self.spec.aux_heads()
    }

    fn stage_weights(&self) -> Vec<f64> {
        self.spec.lambdas()
    }

    fn spiking_layers(&self) -> usize {
        self.spec.main_layer_shapes().len()
    }

    fn forward(&self, obs: &[f64], with_aux: bool, noise_seed: u64) -> Result<(PolicyOutput, ActorTrace<S>)> {
        let mode = if with_aux { Mode::Train } else { Mode::Eval };
        let mut rng = from_noise_seed(noise_seed);
        let (out, trace) = PopSan::forward(self, &to_s(obs), mode, Dynamics::Spiking, &mut rng)?;
        Ok((
            PolicyOutput {
                mean: to_f64(&out.action),
                aux_means: out.aux_actions.iter().map(|a| to_f64(a)).collect(),
            },
            trace,
        ))
    }

    fn log_std(&self) -> Vec<f64> {
        to_f64(&self.params.log_std)
    }

    fn zero_grads(&self) -> PopSanParams<S> {
        self.params.zeros_like()
    }

    fn accumulate_grads(
        &self,
        trace: &ActorTrace<S>,
        d_mean: &[f64],
        d_aux: &[Vec<f64>],
        weights: &[f64],
        d_log_std: &[f64],
        grads: &mut PopSanParams<S>,
    ) -> Result<()> {
        let d_aux: Vec<Vec<S>> = d_aux.iter().map(|g| to_s(g)).collect();
        let g = self.backward_weighted(trace, &to_s(d_mean), &d_aux, weights)?;
        grads.accumulate(&g);
        if d_log_std.len() != grads.log_std.len() {
            return Err(Error::shape("log-std gradient", grads.log_std.len(), d_log_std.len()));
        }
        for (a, &b) in grads.log_std.iter_mut().zip(d_log_std) {
            *a += S::lit(b);
        }
        Ok(())
    }

    fn merge_grads(into: &mut PopSanParams<S>, other: &PopSanParams<S>) {
        into.accumulate(other);
    }

    fn scale_grads(grads: &mut PopSanParams<S>, factor: f64) {
        grads.scale(S::lit(factor));
    }

    fn clip_grads(grads: &mut PopSanParams<S>, max_norm: f64) -> f64 {
        clip_global_norm(grads.tensors_mut(), max_norm)
    }

    fn new_optimizer(&self) -> Adam<S> {
        PopSan::new_optimizer(self)
    }

    fn apply_update(&mut self, grads: &PopSanParams<S>, opt: &mut Adam<S>, cfg: &AdamConfig) -> Result<StepReport> {
        PopSan::apply_update(self, grads, opt, cfg)
    }

    fn layer_spike_rates(trace: &ActorTrace<S>) -> Vec<f64> {
        PopSan::layer_spike_rates(trace)
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        PopSan::save_checkpoint(self, path)
    }
}

/// Gradient set of a [`DenseActor`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<S> {
    pub net: Mlp<S>,
    pub log_std: Vec<S>,
}

impl<S: Scalar> DenseGrads<S> {
    fn slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.net.tensors_mut();
        v.push(&mut self.log_std);
        v
    }
}

impl<S: Scalar> Policy for DenseActor<S> {
    type Trace = MlpCache<S>;
    type Grads = DenseGrads<S>;
    type Optimizer = Adam<S>;

    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.spec.act_dim
    }

    fn aux_heads(&self) -> usize {
        0
    }

    fn stage_weights(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn spiking_layers(&self) -> usize {
        0
    }

    fn forward(&self, obs: &[f64], _with_aux: bool, _noise_seed: u64) -> Result<(PolicyOutput, MlpCache<S>)> {
        let (mean, cache) = self.net.forward(&to_s(obs))?;
        Ok((
            PolicyOutput {
                mean: to_f64(&mean),
                aux_means: Vec::new(),
            },
            cache,
        ))
    }

    fn log_std(&self) -> Vec<f64> {
        to_f64(&self.log_std)
    }

    fn zero_grads(&self) -> DenseGrads<S> {
        DenseGrads {
            net: self.net.zeros_like(),
            log_std: vec![S::zero(); self.log_std.len()],
        }
    }

    fn accumulate_grads(
        &self,
        trace: &MlpCache<S>,
        d_mean: &[f64],
        _d_aux: &[Vec<f64>],
        weights: &[f64],
        d_log_std: &[f64],
        grads: &mut DenseGrads<S>,
    ) -> Result<()> {
        let w = *weights.last().ok_or_else(|| Error::shape("stage loss weights", 1, 0))?;
        let d: Vec<S> = d_mean.iter().map(|&g| S::lit(g * w)).collect();
        self.net.backward(trace, &d, &mut grads.net)?;
        if d_log_std.len() != grads.log_std.len() {
            return Err(Error::shape("log-std gradient", grads.log_std.len(), d_log_std.len()));
        }
        for (a, &b) in grads.log_std.iter_mut().zip(d_log_std) {
            *a += S::lit(b);
        }
        Ok(())
    }

    fn merge_grads(into: &mut DenseGrads<S>, other: &DenseGrads<S>) {
        into.net.accumulate(&other.net);
        for (a, &b) in into.log_std.iter_mut().zip(&other.log_std) {
            *a += b;
        }
    }

    fn scale_grads(grads: &mut DenseGrads<S>, factor: f64) {
        let f = S::lit(factor);
        for t in grads.slices_mut() {
            t.iter_mut().for_each(|x| *x *= f);
        }
    }

    fn clip_grads(grads: &mut DenseGrads<S>, max_norm: f64) -> f64 {
        clip_global_norm(grads.slices_mut(), max_norm)
    }

    fn new_optimizer(&self) -> Adam<S> {
        let mut sizes: Vec<usize> = self.net.tensors().iter().map(|t| t.2.len()).collect();
        sizes.push(self.log_std.len());
        Adam::new(sizes)
    }

    fn apply_update(&mut self, grads: &DenseGrads<S>, opt: &mut Adam<S>, cfg: &AdamConfig) -> Result<StepReport> {
        let mut g: Vec<&[S]> = grads.net.tensors().into_iter().map(|t| t.2).collect();
        g.push(&grads.log_std);
        let mut params = self.net.tensors_mut();
        params.push(&mut self.log_std);
        opt.step(params, &g, cfg)
    }

    fn layer_spike_rates(_trace: &MlpCache<S>) -> Vec<f64> {
        Vec::new()
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        DenseActor::save_checkpoint(self, path)
    }
}
