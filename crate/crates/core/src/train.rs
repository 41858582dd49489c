//! The training loop: rollouts, PPO updates, metrics log and checkpoints.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::mlp::Critic;
use crate::policy::Policy;
use crate::ppo::{EnvPool, PpoConfig, PpoLearner, UpdateStats};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Write `ckpt_<iteration>.bin` every this many iterations (0: only the
    /// initial and final checkpoints).
    pub checkpoint_every: usize,
    /// Fill the `wall_ms` column. Off by default so logs are reproducible
    /// byte for byte.
    pub log_wall_clock: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            checkpoint_every: 100,
            log_wall_clock: false,
            seed: 0,
        }
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.bin"))
}

pub fn metrics_header(stages: usize, spiking_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["iteration", "reward_mean", "ep_len_mean"].map(String::from).to_vec();
    h.extend((1..=stages).map(|i| format!("loss_stage_{i}")));
    h.push("kl".into());
    h.push("clip_frac".into());
    h.extend((1..=spiking_layers).map(|i| format!("spike_rate_layer_{i}")));
    h.push("wall_ms".into());
    h
}

pub struct TrainOutcome<P: Policy> {
    pub actor: P,
    pub critic: Critic<f64>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Update statistics of every iteration, in order.
    pub history: Vec<UpdateStats>,
}

/// Trains `actor` and writes `metrics.csv` plus checkpoints into `out_dir`.
/// Every metrics row is flushed as soon as it is written, so a failed run
/// leaves the log of the iterations that completed.
pub fn train<P: Policy>(
    actor: P,
    env: &EnvConfig,
    ppo: &PpoConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<P>> {
    env.validate()?;
    ppo.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    let stages = actor.aux_heads() + 1;
    log.write_record(metrics_header(stages, actor.spiking_layers()))?;
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let mut learner = PpoLearner::new(actor, ppo.clone(), cfg.seed)?;
    let mut pool = EnvPool::new(env, ppo.num_envs, cfg.seed)?;
    let first = checkpoint_path(out_dir, 0);
    learner.actor.save_checkpoint(&first)?;
    let mut final_checkpoint = first;
    // Most recent completed-episode length; empty until an episode ends.
    let mut ep_len_mean = String::new();
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 1..=cfg.iterations {
        let start = Instant::now();
        let mut batch = learner.collect(&mut pool)?;
        batch.compute_gae(ppo.gamma, ppo.gae_lambda);
        let stats = learner.update(&batch)?;
        if !batch.completed_lengths.is_empty() {
            ep_len_mean = (batch.completed_lengths.iter().sum::<usize>() as f64
                / batch.completed_lengths.len() as f64)
                .to_string();
        }
        let mut row = vec![
            it.to_string(),
            batch.reward_mean().to_string(),
            ep_len_mean.clone(),
        ];
        row.extend(stats.stage_losses.iter().map(f64::to_string));
        row.push(stats.kl.to_string());
        row.push(stats.clip_frac.to_string());
        row.extend(batch.spike_rates.iter().map(f64::to_string));
        row.push(if cfg.log_wall_clock {
            start.elapsed().as_millis().to_string()
        } else {
            String::new()
        });
        log.write_record(&row)?;
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let aborted = stats.aborted;
        history.push(stats);
        if aborted {
            return Err(Error::NonFinite(format!("PPO loss at iteration {it}")));
        }

        if it == cfg.iterations || (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
            let path = checkpoint_path(out_dir, it);
            learner.actor.save_checkpoint(&path)?;
            final_checkpoint = path;
        }
    }
    Ok(TrainOutcome {
        actor: learner.actor,
        critic: learner.critic,
        metrics_path,
        final_checkpoint,
        history,
    })
}
