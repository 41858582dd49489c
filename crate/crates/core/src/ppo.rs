//! PPO with a dense critic and per-stage auxiliary losses.

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, PointMass, OBS_DIM};
use crate::error::{Error, Result};
use crate::mlp::{Critic, Mlp};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::policy::Policy;
use crate::rng::{stream, streams, StreamRng};

/// Samples per gradient work unit. Fixed so reductions never depend on the
/// number of threads.
const GRAD_CHUNK: usize = 32;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    /// Global gradient-norm cap per network; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Train auxiliary heads with their stage weights. When false only the
    /// final head's loss is used, with weight 1.
    pub auxiliary: bool,
    pub critic_hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 0.005,
            num_envs: 16,
            rollout_steps: 64,
            max_grad_norm: 0.5,
            auxiliary: true,
            critic_hidden: vec![64, 64],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            p.push(format!("ppo.gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            p.push(format!("ppo.gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            p.push(format!("ppo.clip_eps must be > 0, got {}", self.clip_eps));
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("ppo.{name} must be > 0, got {v}"));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            p.push(format!("ppo.entropy_coef must be >= 0, got {}", self.entropy_coef));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            p.push(format!("ppo.max_grad_norm must be >= 0, got {}", self.max_grad_norm));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("num_envs", self.num_envs),
            ("rollout_steps", self.rollout_steps),
        ] {
            if v == 0 {
                p.push(format!("ppo.{name} must be >= 1"));
            }
        }
        if self.critic_hidden.contains(&0) {
            p.push("ppo.critic_hidden widths must be >= 1".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Log-density of `action` under a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|&ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: [f64; OBS_DIM],
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
    pub log_prob: f64,
    /// Log-probability of `action` under each auxiliary head's mean.
    pub aux_log_probs: Vec<f64>,
    /// Seed of the actor's internal noise for this step.
    pub noise_seed: u64,
}

/// Rollout storage, environment-major: the steps of env `e` occupy
/// `records[e·steps .. (e+1)·steps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub records: Vec<StepRecord>,
    /// Critic value of each env's observation after the last step.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub completed_returns: Vec<f64>,
    pub completed_lengths: Vec<usize>,
    /// Mean firing rate per spiking layer over all rollout steps.
    pub spike_rates: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn reward_mean(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.len().max(1) as f64
    }

    /// Fills advantages and returns by generalized advantage estimation.
    /// `done` ends the recursion (the time limit is treated as terminal).
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let mut adv = Vec::with_capacity(self.len());
        let mut ret = Vec::with_capacity(self.len());
        for (e, chunk) in self.records.chunks(self.steps).enumerate() {
            let rewards: Vec<f64> = chunk.iter().map(|r| r.reward).collect();
            let values: Vec<f64> = chunk.iter().map(|r| r.value).collect();
            let dones: Vec<bool> = chunk.iter().map(|r| r.done).collect();
            let (a, r) = gae(&rewards, &values, &dones, self.last_values[e], gamma, lambda);
            adv.extend(a);
            ret.extend(r);
        }
        self.advantages = adv;
        self.returns = ret;
    }
}

/// GAE over one contiguous sequence. Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

struct EnvSlot {
    env: PointMass,
    rng: StreamRng,
    obs: [f64; OBS_DIM],
    episode_return: f64,
    episode_len: usize,
}

/// A set of point-mass environments, each with its own seeded stream.
pub struct EnvPool {
    slots: Vec<EnvSlot>,
}

impl EnvPool {
    pub fn new(config: &EnvConfig, num_envs: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let slots = (0..num_envs)
            .map(|i| {
                let mut rng = stream(seed, streams::ENV_BASE + i as u64);
                let mut env = PointMass::new(i, config.clone());
                let obs = env.reset(&mut rng);
                EnvSlot {
                    env,
                    rng,
                    obs,
                    episode_return: 0.0,
                    episode_len: 0,
                }
            })
            .collect();
        Ok(EnvPool { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

struct EnvRollout {
    records: Vec<StepRecord>,
    last_value: f64,
    returns: Vec<f64>,
    lengths: Vec<usize>,
    spike_sums: Vec<f64>,
}

/// Steps every environment `steps` times, sampling actions from the Gaussian
/// policy around the actor's mean.
pub fn collect_rollout<P: Policy>(
    pool: &mut EnvPool,
    actor: &P,
    critic: &Critic<f64>,
    steps: usize,
    with_aux: bool,
) -> Result<TrajectoryBatch> {
    if steps == 0 || pool.is_empty() {
        return Err(Error::EmptyBatch(format!(
            "rollout of {steps} steps over {} environments",
            pool.len()
        )));
    }
    let log_std = actor.log_std();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let layers = actor.spiking_layers();
    let per_env = pool
        .slots
        .par_iter_mut()
        .map(|slot| -> Result<EnvRollout> {
            let mut out = EnvRollout {
                records: Vec::with_capacity(steps),
                last_value: 0.0,
                returns: Vec::new(),
                lengths: Vec::new(),
                spike_sums: vec![0.0; layers],
            };
            for _ in 0..steps {
                let noise_seed = slot.rng.next_u64();
                let (pred, trace) = actor.forward(&slot.obs, with_aux, noise_seed)?;
                for (s, r) in out.spike_sums.iter_mut().zip(P::layer_spike_rates(&trace)) {
                    *s += r;
                }
                let action: Vec<f64> = pred
                    .mean
                    .iter()
                    .zip(&std)
                    .map(|(&m, &s)| {
                        let z: f64 = StandardNormal.sample(&mut slot.rng);
                        m + s * z
                    })
                    .collect();
                let value = critic.value(&slot.obs)?;
                let tr = slot.env.step(&action)?;
                slot.episode_return += tr.reward;
                slot.episode_len += 1;
                out.records.push(StepRecord {
                    obs: slot.obs,
                    log_prob: gaussian_log_prob(&action, &pred.mean, &log_std),
                    aux_log_probs: pred
                        .aux_means
                        .iter()
                        .map(|m| gaussian_log_prob(&action, m, &log_std))
                        .collect(),
                    action,
                    reward: tr.reward,
                    done: tr.done,
                    value,
                    noise_seed,
                });
                if tr.done {
                    out.returns.push(slot.episode_return);
                    out.lengths.push(slot.episode_len);
                    slot.episode_return = 0.0;
                    slot.episode_len = 0;
                    slot.obs = slot.env.reset(&mut slot.rng);
                } else {
                    slot.obs = tr.obs;
                }
            }
            out.last_value = critic.value(&slot.obs)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let total = (steps * pool.len()) as f64;
    let mut batch = TrajectoryBatch {
        num_envs: pool.len(),
        steps,
        records: Vec::with_capacity(steps * pool.len()),
        last_values: Vec::with_capacity(pool.len()),
        advantages: Vec::new(),
        returns: Vec::new(),
        completed_returns: Vec::new(),
        completed_lengths: Vec::new(),
        spike_rates: vec![0.0; layers],
    };
    for env in per_env {
        batch.records.extend(env.records);
        batch.last_values.push(env.last_value);
        batch.completed_returns.extend(env.returns);
        batch.completed_lengths.extend(env.lengths);
        for (a, s) in batch.spike_rates.iter_mut().zip(env.spike_sums) {
            *a += s;
        }
    }
    batch.spike_rates.iter_mut().for_each(|s| *s /= total);
    Ok(batch)
}

/// Statistics of one [`PpoLearner::update`]. Losses are averaged over every
/// minibatch step taken.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    /// Per-stage actor loss, auxiliary heads first, final stage last. Heads
    /// with zero weight are not evaluated and report 0.
    pub stage_losses: Vec<f64>,
    pub value_loss: f64,
    /// Mean `(r - 1) - ln r` of the final head, measured before each step.
    pub kl: f64,
    /// Fraction of samples whose final-head ratio left the clip range.
    pub clip_frac: f64,
    pub entropy: f64,
    /// Mean actor gradient norm before clipping.
    pub grad_norm: f64,
    pub minibatches: usize,
    /// Set when a non-finite loss stopped the update early.
    pub aborted: bool,
    pub skipped_tensors: Vec<String>,
}

/// Actor, critic and their optimizer states.
pub struct PpoLearner<P: Policy> {
    pub actor: P,
    pub critic: Critic<f64>,
    pub config: PpoConfig,
    actor_opt: P::Optimizer,
    critic_opt: Adam<f64>,
    shuffle: StreamRng,
}

struct ChunkResult<G> {
    actor: G,
    critic: Mlp<f64>,
    head_loss: Vec<f64>,
    value_loss: f64,
    kl: f64,
    clipped: usize,
}

impl<P: Policy> PpoLearner<P> {
    pub fn new(actor: P, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let critic = Critic::new(actor.obs_dim(), &config.critic_hidden, seed)?;
        Ok(PpoLearner {
            actor_opt: actor.new_optimizer(),
            critic_opt: critic.net.new_optimizer(),
            shuffle: stream(seed, streams::SHUFFLE),
            actor,
            critic,
            config,
        })
    }

    /// Loss weight per head, auxiliary heads first.
    pub fn head_weights(&self) -> Vec<f64> {
        let heads = self.actor.aux_heads() + 1;
        if self.config.auxiliary {
            self.actor.stage_weights()
        } else {
            let mut w = vec![0.0; heads];
            w[heads - 1] = 1.0;
            w
        }
    }

    /// Whether auxiliary heads need to run at all.
    pub fn uses_aux(&self) -> bool {
        let w = self.head_weights();
        w[..w.len() - 1].iter().any(|&x| x != 0.0)
    }

    pub fn collect(&self, pool: &mut EnvPool) -> Result<TrajectoryBatch> {
        collect_rollout(pool, &self.actor, &self.critic, self.config.rollout_steps, self.uses_aux())
    }

    /// Runs the configured epochs of minibatch updates on `batch`, whose
    /// advantages must already be computed.
    pub fn update(&mut self, batch: &TrajectoryBatch) -> Result<UpdateStats> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::EmptyBatch("ppo update on an empty batch".into()));
        }
        if batch.advantages.len() != n || batch.returns.len() != n {
            return Err(Error::shape("advantages", n, batch.advantages.len()));
        }
        let mut adv = batch.advantages.clone();
        normalize_advantages(&mut adv);
        let weights = self.head_weights();
        let heads = weights.len();
        let with_aux = self.uses_aux();
        let actor_cfg = AdamConfig::with_lr(self.config.actor_lr);
        let critic_cfg = AdamConfig::with_lr(self.config.critic_lr);

        let mut stats = UpdateStats {
            stage_losses: vec![0.0; heads],
            value_loss: 0.0,
            kl: 0.0,
            clip_frac: 0.0,
            entropy: gaussian_entropy(&self.actor.log_std()),
            grad_norm: 0.0,
            minibatches: 0,
            aborted: false,
            skipped_tensors: Vec::new(),
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut samples = 0usize;
        let mut clipped = 0usize;
        'epochs: for _ in 0..self.config.epochs {
            order.shuffle(&mut self.shuffle);
            for mb in order.chunks(self.config.minibatch_size) {
                let r = self.minibatch_grads(batch, &adv, mb, &weights, with_aux)?;
                let (mut g_actor, mut g_critic, head_loss, value_loss, kl, mb_clipped) = r;
                if head_loss.iter().any(|l| !l.is_finite()) || !value_loss.is_finite() {
                    stats.aborted = true;
                    break 'epochs;
                }
                for (s, l) in stats.stage_losses.iter_mut().zip(&head_loss) {
                    *s += l;
                }
                stats.value_loss += value_loss;
                stats.kl += kl;
                clipped += mb_clipped;
                samples += mb.len();
                stats.minibatches += 1;

                let norm = if self.config.max_grad_norm > 0.0 {
                    P::clip_grads(&mut g_actor, self.config.max_grad_norm)
                } else {
                    P::clip_grads(&mut g_actor, f64::INFINITY)
                };
                stats.grad_norm += norm;
                if self.config.max_grad_norm > 0.0 {
                    clip_global_norm(g_critic.tensors_mut(), self.config.max_grad_norm);
                }
                let rep = self.actor.apply_update(&g_actor, &mut self.actor_opt, &actor_cfg)?;
                stats.skipped_tensors.extend(rep.skipped_names);
                self.critic
                    .net
                    .apply_update(&g_critic, &mut self.critic_opt, &critic_cfg)?;
            }
        }
        let m = stats.minibatches.max(1) as f64;
        stats.stage_losses.iter_mut().for_each(|l| *l /= m);
        stats.value_loss /= m;
        stats.kl /= m;
        stats.grad_norm /= m;
        stats.clip_frac = clipped as f64 / samples.max(1) as f64;
        Ok(stats)
    }

    /// Mean-reduced gradients of one minibatch with its loss terms:
    /// `(actor grads, critic grads, per-head loss, value loss, kl, clipped)`.
    #[allow(clippy::type_complexity)]
    fn minibatch_grads(
        &self,
        batch: &TrajectoryBatch,
        adv: &[f64],
        idx: &[usize],
        weights: &[f64],
        with_aux: bool,
    ) -> Result<(P::Grads, Mlp<f64>, Vec<f64>, f64, f64, usize)> {
        let inv_n = 1.0 / idx.len() as f64;
        let heads = weights.len();
        let log_std = self.actor.log_std();
        let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
        let eps = self.config.clip_eps;
        let ent_coef = self.config.entropy_coef;

        let chunks: Vec<ChunkResult<P::Grads>> = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<ChunkResult<P::Grads>> {
                let mut out = ChunkResult {
                    actor: self.actor.zero_grads(),
                    critic: self.critic.net.zeros_like(),
                    head_loss: vec![0.0; heads],
                    value_loss: 0.0,
                    kl: 0.0,
                    clipped: 0,
                };
                for &i in chunk {
                    let rec = &batch.records[i];
                    let a = adv[i];
                    let (pred, trace) = self.actor.forward(&rec.obs, with_aux, rec.noise_seed)?;
                    let mut d_log_std = vec![0.0; log_std.len()];
                    let mut d_heads: Vec<Vec<f64>> = Vec::with_capacity(heads);
                    for h in 0..heads {
                        let final_head = h + 1 == heads;
                        if weights[h] == 0.0 {
                            d_heads.push(vec![0.0; log_std.len()]);
                            continue;
                        }
                        let (mean, old) = if final_head {
                            (&pred.mean, rec.log_prob)
                        } else {
                            (&pred.aux_means[h], rec.aux_log_probs[h])
                        };
                        let logp = gaussian_log_prob(&rec.action, mean, &log_std);
                        let ratio = (logp - old).exp();
                        let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                        let surr = (ratio * a).min(clipped_ratio * a);
                        out.head_loss[h] -= surr * inv_n;
                        if final_head {
                            out.head_loss[h] -= ent_coef * gaussian_entropy(&log_std) * inv_n;
                            out.kl += ((ratio - 1.0) - (logp - old)) * inv_n;
                            if (ratio - 1.0).abs() > eps {
                                out.clipped += 1;
                            }
                        }
                        let active = if a >= 0.0 { ratio <= 1.0 + eps } else { ratio >= 1.0 - eps };
                        // d(-surr)/d logp
                        let g = if active { -a * ratio * inv_n } else { 0.0 };
                        let mut d_mean = vec![0.0; log_std.len()];
                        for j in 0..log_std.len() {
                            let diff = rec.action[j] - mean[j];
                            d_mean[j] = g * diff * inv_var[j];
                            let mut d_ls = g * (diff * diff * inv_var[j] - 1.0);
                            if final_head {
                                d_ls -= ent_coef * inv_n;
                            }
                            d_log_std[j] += weights[h] * d_ls;
                        }
                        d_heads.push(d_mean);
                    }
                    let d_final = d_heads.pop().expect("at least one head");
                    self.actor
                        .accumulate_grads(&trace, &d_final, &d_heads, weights, &d_log_std, &mut out.actor)?;

                    let (v, cache) = self.critic.net.forward(&rec.obs)?;
                    let err = v[0] - batch.returns[i];
                    out.value_loss += err * err * inv_n;
                    self.critic
                        .net
                        .backward(&cache, &[2.0 * err * inv_n], &mut out.critic)?;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut it = chunks.into_iter();
        let first = it.next().expect("non-empty minibatch");
        let (mut ga, mut gc) = (first.actor, first.critic);
        let (mut hl, mut vl, mut kl, mut clipped) = (first.head_loss, first.value_loss, first.kl, first.clipped);
        for c in it {
            P::merge_grads(&mut ga, &c.actor);
            gc.accumulate(&c.critic);
            hl.iter_mut().zip(&c.head_loss).for_each(|(a, b)| *a += b);
            vl += c.value_loss;
            kl += c.kl;
            clipped += c.clipped;
        }
        Ok((ga, gc, hl, vl, kl, clipped))
    }
}
