//! Point-mass velocity tracking and the command-noise wrapper.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, streams, StreamRng};

pub const OBS_DIM: usize = 6;
pub const ACT_DIM: usize = 2;
/// Observation channels holding the command.
pub const COMMAND_CHANNELS: [usize; 2] = [2, 3];
/// Observation channels holding `velocity − command`.
pub const ERROR_CHANNELS: [usize; 2] = [4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    /// Acceleration per unit action.
    pub accel_gain: f64,
    pub max_speed: f64,
    pub episode_steps: usize,
    /// Commands are drawn uniformly from `[-command_range, command_range]²`.
    pub command_range: f64,
    /// Width of the tracking reward, `exp(-‖v - c‖² / reward_width)`.
    pub reward_width: f64,
    pub action_cost: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.02,
            accel_gain: 5.0,
            max_speed: 2.0,
            episode_steps: 200,
            command_range: 1.0,
            reward_width: 0.25,
            action_cost: 0.01,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("dt", self.dt),
            ("accel_gain", self.accel_gain),
            ("max_speed", self.max_speed),
            ("command_range", self.command_range),
            ("reward_width", self.reward_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("env.{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.action_cost.is_finite() && self.action_cost >= 0.0) {
            problems.push(format!("env.action_cost must be >= 0, got {}", self.action_cost));
        }
        if self.episode_steps == 0 {
            problems.push("env.episode_steps must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub command: [f64; 2],
    pub step_count: usize,
}

impl PointMassState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let [vx, vy] = self.velocity;
        let [cx, cy] = self.command;
        [vx, vy, cx, cy, vx - cx, vy - cy]
    }

    pub fn tracking_error(&self) -> [f64; 2] {
        [
            self.velocity[0] - self.command[0],
            self.velocity[1] - self.command[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct PointMass {
    pub id: usize,
    pub config: EnvConfig,
    pub state: PointMassState,
}

impl PointMass {
    pub fn new(id: usize, config: EnvConfig) -> Self {
        PointMass {
            id,
            config,
            state: PointMassState::default(),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; OBS_DIM] {
        let r = self.config.command_range;
        let dist = Uniform::new_inclusive(-r, r).expect("positive command range");
        self.state = PointMassState {
            command: [dist.sample(rng), dist.sample(rng)],
            ..PointMassState::default()
        };
        self.state.observation()
    }

    pub fn reward(&self, action: [f64; 2]) -> f64 {
        let [ex, ey] = self.state.tracking_error();
        (-(ex * ex + ey * ey) / self.config.reward_width).exp()
            - self.config.action_cost * (action[0] * action[0] + action[1] * action[1])
    }

    /// Advances one Euler step. Actions are clamped to `[-1, 1]²`; the speed
    /// is clamped to `max_speed` by rescaling the velocity vector.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if action.len() != ACT_DIM {
            return Err(Error::shape("point-mass action", ACT_DIM, action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env {
                env: self.id,
                reason: format!("non-finite action {action:?}"),
            });
        }
        let c = &self.config;
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let s = &mut self.state;
        for k in 0..2 {
            s.velocity[k] += a[k] * c.dt * c.accel_gain;
        }
        let speed = s.velocity[0].hypot(s.velocity[1]);
        if speed > c.max_speed {
            let f = c.max_speed / speed;
            s.velocity.iter_mut().for_each(|v| *v *= f);
        }
        for k in 0..2 {
            s.position[k] += s.velocity[k] * c.dt;
        }
        s.step_count += 1;
        let done = s.step_count >= c.episode_steps;
        Ok(Transition {
            obs: s.observation(),
            reward: self.reward(a),
            done,
        })
    }
}

/// Gaussian noise on the command channels. The error channels are shifted
/// consistently so they still equal `velocity − noisy command`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// Returns the perturbed observation.
pub fn inject_noise<R: Rng + ?Sized>(obs: &[f64; OBS_DIM], sigma: f64, rng: &mut R) -> [f64; OBS_DIM] {
    let mut out = *obs;
    for (&c, &e) in COMMAND_CHANNELS.iter().zip(&ERROR_CHANNELS) {
        let z: f64 = StandardNormal.sample(rng);
        let n = sigma * z;
        out[c] += n;
        out[e] -= n;
    }
    out
}

/// Per-sigma tracking statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingRow {
    pub sigma: f64,
    pub mean_abs_err_x: f64,
    pub mean_abs_err_y: f64,
    /// Standard deviation across episodes of the per-episode mean `‖v − c‖`.
    pub std_err: f64,
    pub episodes: usize,
    pub diverged: usize,
    #[serde(skip)]
    pub mean_abs_cmd_x: f64,
    #[serde(skip)]
    pub mean_abs_cmd_y: f64,
}

impl TrackingRow {
    /// Summed per-axis error relative to the summed per-axis command magnitude.
    pub fn relative_error(&self) -> f64 {
        (self.mean_abs_err_x + self.mean_abs_err_y) / (self.mean_abs_cmd_x + self.mean_abs_cmd_y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub rows: Vec<TrackingRow>,
}

impl TrackingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One CSV holding several labelled reports, e.g. a spiking actor and its
/// dense baseline evaluated on paired seeds.
pub fn write_comparison_csv(path: &Path, reports: &[(&str, &TrackingReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "network",
        "sigma",
        "mean_abs_err_x",
        "mean_abs_err_y",
        "std_err",
        "episodes",
        "diverged",
        "relative_error",
    ])?;
    for (label, report) in reports {
        for r in &report.rows {
            w.write_record([
                label.to_string(),
                r.sigma.to_string(),
                r.mean_abs_err_x.to_string(),
                r.mean_abs_err_y.to_string(),
                r.std_err.to_string(),
                r.episodes.to_string(),
                r.diverged.to_string(),
                r.relative_error().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Steps at the start of each episode excluded from the statistics.
    pub settle_steps: usize,
    /// An episode whose post-settle mean `‖v − c‖` exceeds this counts as diverged.
    pub divergence_error: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            settle_steps: 50,
            divergence_error: 1.0,
            seed: 0,
        }
    }
}

struct EpisodeStats {
    abs_err: [f64; 2],
    abs_cmd: [f64; 2],
    mean_norm: f64,
    diverged: bool,
}

/// Runs the deterministic controller `act(obs, noise_seed)` for
/// `cfg.episodes` episodes per sigma. Every sigma sees the same commands, the
/// same standard-normal draws (scaled by sigma) and the same actor noise
/// seeds, so rows are paired.
pub fn evaluate_tracking<F>(act: F, env: &EnvConfig, sigmas: &[f64], cfg: &EvalConfig) -> Result<TrackingReport>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>> + Sync,
{
    env.validate()?;
    if cfg.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if cfg.settle_steps >= env.episode_steps {
        return Err(Error::Config(format!(
            "settle_steps {} leaves no steps of a {}-step episode",
            cfg.settle_steps, env.episode_steps
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {s}")));
    }
    let mut seeds = stream(cfg.seed, streams::EVAL);
    let episode_seeds: Vec<[u64; 3]> = (0..cfg.episodes)
        .map(|_| [seeds.next_u64(), seeds.next_u64(), seeds.next_u64()])
        .collect();

    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let stats = episode_seeds
            .par_iter()
            .enumerate()
            .map(|(e, s)| run_episode(&act, env, cfg, sigma, e, s))
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<&EpisodeStats> = stats.iter().filter(|s| s.mean_norm.is_finite()).collect();
        let n = ok.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeStats) -> f64| ok.iter().map(|s| f(s)).sum::<f64>() / n;
        let norm_mean = mean(&|s| s.mean_norm);
        let var = ok.iter().map(|s| (s.mean_norm - norm_mean).powi(2)).sum::<f64>() / n;
        let all_diverged = ok.is_empty();
        rows.push(TrackingRow {
            sigma,
            mean_abs_err_x: if all_diverged { f64::NAN } else { mean(&|s| s.abs_err[0]) },
            mean_abs_err_y: if all_diverged { f64::NAN } else { mean(&|s| s.abs_err[1]) },
            std_err: if all_diverged { f64::NAN } else { var.sqrt() },
            episodes: cfg.episodes,
            diverged: stats.iter().filter(|s| s.diverged).count(),
            mean_abs_cmd_x: mean(&|s| s.abs_cmd[0]),
            mean_abs_cmd_y: mean(&|s| s.abs_cmd[1]),
        });
    }
    Ok(TrackingReport { rows })
}

fn run_episode<F>(act: &F, env: &EnvConfig, cfg: &EvalConfig, sigma: f64, id: usize, seeds: &[u64; 3]) -> Result<EpisodeStats>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>>,
{
    let mut reset_rng = stream(seeds[0], streams::ENV_BASE);
    let mut noise_rng = stream(seeds[1], streams::NOISE);
    let mut actor_rng: StreamRng = stream(seeds[2], streams::EVAL);
    let mut pm = PointMass::new(id, env.clone());
    let mut obs = pm.reset(&mut reset_rng);
    let mut sum_err = [0.0; 2];
    let mut sum_cmd = [0.0; 2];
    let mut sum_norm = 0.0;
    let mut counted = 0usize;
    for t in 0..env.episode_steps {
        let noisy = inject_noise(&obs, sigma, &mut noise_rng);
        let action = act(&noisy, actor_rng.next_u64())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Ok(EpisodeStats {
                abs_err: [f64::NAN; 2],
                abs_cmd: pm.state.command.map(f64::abs),
                mean_norm: f64::NAN,
                diverged: true,
            });
        }
        obs = pm.step(&action)?.obs;
        if t >= cfg.settle_steps {
            let [ex, ey] = pm.state.tracking_error();
            sum_err[0] += ex.abs();
            sum_err[1] += ey.abs();
            sum_cmd[0] += pm.state.command[0].abs();
            sum_cmd[1] += pm.state.command[1].abs();
            sum_norm += ex.hypot(ey);
            counted += 1;
        }
    }
    let n = counted as f64;
    let mean_norm = sum_norm / n;
    Ok(EpisodeStats {
        abs_err: sum_err.map(|x| x / n),
        abs_cmd: sum_cmd.map(|x| x / n),
        mean_norm,
        diverged: mean_norm > cfg.divergence_error,
    })
}

/// Observations seen by the controller over `episodes` noise-free episodes.
pub fn visited_observations<F>(act: F, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<[f64; OBS_DIM]>>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>>,
{
    env.validate()?;
    let mut rng = stream(seed, streams::ENERGY);
    let mut out = Vec::with_capacity(episodes * env.episode_steps);
    for e in 0..episodes {
        let mut pm = PointMass::new(e, env.clone());
        let mut obs = pm.reset(&mut rng);
        loop {
            out.push(obs);
            let action = act(&obs, rng.next_u64())?;
            let tr = pm.step(&action)?;
            if tr.done {
                break;
            }
            obs = tr.obs;
        }
    }
    Ok(out)
}
