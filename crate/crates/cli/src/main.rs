//! `popsan`: train, evaluate and profile spiking actors on the point-mass
//! tracking task.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 artifact mismatch.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use popsan::energy::{count_ops, energy_stats, ActivityProfile, SavingsReport};
use popsan::envs::{evaluate_tracking, visited_observations, write_comparison_csv, TrackingReport};
use popsan::gradcheck::{idle_tensor, run_all};
use popsan::mlp::DenseActor;
use popsan::network::checkpoint::{self, ActorSpec};
use popsan::policy::Policy;
use popsan::rng::{stream, streams};
use popsan::train::train;
use popsan::PopSan64;

use config::{ActorKind, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "popsan",
    version,
    about = "Population-coded spiking actors trained with PPO",
    after_help = "Any config field can be overridden with --section.key value, e.g. --ppo.actor_lr 1e-4."
)]
struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    actor: Option<ActorKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an actor, writing metrics.csv and checkpoints to the output directory.
    Train,
    /// Evaluate a checkpoint without observation noise.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate checkpoints under command noise at each sigma.
    NoiseSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A second checkpoint evaluated on the same seeds, e.g. the dense baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Count operations on visited states and compare energy with the dense equivalent.
    Energy {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every gradient path.
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn check(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }

    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            error: error.into(),
        }
    }

    fn artifact(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 3,
            error: error.into(),
        }
    }
}

impl From<popsan::Error> for Failure {
    fn from(e: popsan::Error) -> Self {
        use popsan::Error as E;
        let code = match e {
            E::Config(_) => 2,
            E::Version { .. } | E::Corrupt { .. } | E::TensorMismatch { .. } | E::Mismatch(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

type Outcome = Result<(), Failure>;
type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` and `--a.b=value` out of argv; everything else goes to clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => return Err(Failure::config(anyhow!("override --{key} needs a value"))),
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

enum Actor {
    Popsan(Box<PopSan64>),
    Dense(DenseActor<f64>),
}

impl Actor {
    fn load(path: &Path) -> Result<Self, Failure> {
        let ckpt = checkpoint::read(path).map_err(|e| match e {
            popsan::Error::Io { .. } => Failure::artifact(e),
            other => other.into(),
        })?;
        let actor = match ckpt.actor {
            ActorSpec::Popsan { .. } => Actor::Popsan(Box::new(PopSan64::from_checkpoint(&ckpt)?)),
            ActorSpec::Dense { .. } => Actor::Dense(DenseActor::from_checkpoint(&ckpt)?),
        };
        let (obs, act) = match &actor {
            Actor::Popsan(a) => (a.obs_dim(), a.act_dim()),
            Actor::Dense(a) => (a.obs_dim(), a.act_dim()),
        };
        if obs != popsan::envs::OBS_DIM || act != popsan::envs::ACT_DIM {
            return Err(Failure::artifact(anyhow!(
                "checkpoint {} has obs/act dims {obs}/{act}, the tracking task needs {}/{}",
                path.display(),
                popsan::envs::OBS_DIM,
                popsan::envs::ACT_DIM
            )));
        }
        Ok(actor)
    }

    fn label(&self) -> &'static str {
        match self {
            Actor::Popsan(_) => "popsan",
            Actor::Dense(_) => "dense",
        }
    }

    fn act(&self, obs: &[f64], noise_seed: u64) -> popsan::Result<Vec<f64>> {
        Ok(match self {
            Actor::Popsan(a) => Policy::forward(a.as_ref(), obs, false, noise_seed)?.0.mean,
            Actor::Dense(a) => Policy::forward(a, obs, false, noise_seed)?.0.mean,
        })
    }
}

fn create_out_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::check)
}

fn print_report(label: &str, report: &TrackingReport) {
    for r in &report.rows {
        println!(
            "{label:>8} sigma {:.2}: |err| x {:.4} y {:.4}, relative {:.1}%, std {:.4}, diverged {}/{}",
            r.sigma,
            r.mean_abs_err_x,
            r.mean_abs_err_y,
            100.0 * r.relative_error(),
            r.std_err,
            r.diverged,
            r.episodes
        );
    }
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let out = &cfg.out_dir;
    let (path, rows) = match cfg.actor {
        ActorKind::Popsan => {
            let actor = PopSan64::new(cfg.network.clone())?;
            let r = train(actor, &cfg.env, &cfg.ppo, &cfg.train, out)?;
            (r.final_checkpoint, r.history.len())
        }
        ActorKind::Dense => {
            let actor = DenseActor::<f64>::new(cfg.dense.clone())?;
            let r = train(actor, &cfg.env, &cfg.ppo, &cfg.train, out)?;
            (r.final_checkpoint, r.history.len())
        }
    };
    println!("trained {rows} iterations; final checkpoint {}", path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, episodes: Option<usize>) -> Outcome {
    if episodes == Some(0) {
        return Err(Failure::config(anyhow!("--episodes must be >= 1")));
    }
    let actor = Actor::load(checkpoint)?;
    let report = evaluate_tracking(|o, s| actor.act(o, s), &cfg.env, &[0.0], &cfg.eval_config(episodes))?;
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.csv");
    report.write_csv(&path)?;
    print_report(actor.label(), &report);
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_noise_sweep(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    sigmas: Option<&[f64]>,
    episodes: Option<usize>,
) -> Outcome {
    let sigmas = sigmas.unwrap_or(&cfg.noise.sigmas);
    if sigmas.is_empty() {
        return Err(Failure::config(anyhow!("the sigma list is empty")));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Failure::config(anyhow!("sigma must be finite and >= 0, got {s}")));
    }
    if episodes == Some(0) {
        return Err(Failure::config(anyhow!("--episodes must be >= 1")));
    }
    let mut actors = vec![Actor::load(checkpoint)?];
    if let Some(b) = baseline {
        actors.push(Actor::load(b)?);
    }
    let eval = cfg.eval_config(episodes);
    let mut reports = Vec::new();
    for (i, a) in actors.iter().enumerate() {
        let mut label = a.label().to_string();
        if i > 0 && label == actors[0].label() {
            label.push_str("_baseline");
        }
        let report = evaluate_tracking(|o, s| a.act(o, s), &cfg.env, sigmas, &eval)?;
        print_report(&label, &report);
        reports.push((label, report));
    }
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("noise_sweep.csv");
    let labelled: Vec<(&str, &TrackingReport)> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
    write_comparison_csv(&path, &labelled)?;
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_energy(cfg: &RunConfig, checkpoint: &Path) -> Outcome {
    let net = match Actor::load(checkpoint)? {
        Actor::Popsan(n) => *n,
        Actor::Dense(_) => {
            return Err(Failure::artifact(anyhow!(
                "{} holds a dense actor; energy profiling needs a spiking checkpoint",
                checkpoint.display()
            )))
        }
    };
    let model = cfg.energy_model();
    let act = |o: &[f64], s: u64| Ok(Policy::forward(&net, o, false, s)?.0.mean);
    let obs: Vec<Vec<f64>> = visited_observations(act, &cfg.env, cfg.energy.episodes, cfg.seed)?
        .iter()
        .map(|o| o.to_vec())
        .collect();
    let (counts, traces): (Vec<_>, Vec<_>) = count_ops(&net, &obs, &mut stream(cfg.seed, streams::ENERGY))?
        .into_iter()
        .unzip();
    let stats = energy_stats(&counts, &model)?;
    let profile = ActivityProfile::measure(&traces)?;
    let report = SavingsReport::sweep(&net.spec, &profile, &cfg.energy.t_finals, &model)?;
    println!(
        "measured over {} inferences: {:.1} +- {:.1} pJ per action ({:.0} MAC, {:.0} AC, of which shrink {:.1} AC)",
        stats.inferences, stats.mean_pj, stats.std_pj, stats.mean_mac_ops, stats.mean_ac_ops, stats.mean_shrink_ac_ops
    );
    for r in &report.rows {
        println!(
            "T_final {}: ANN {:.1} pJ, SNN {:.1} pJ, savings {:.2}%",
            r.t_final, r.ann_pj, r.snn_pj, r.savings_pct
        );
    }
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("energy.csv");
    report.write_csv(&path)?;
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, tolerance: Option<f64>) -> Outcome {
    let tol = tolerance.unwrap_or(cfg.gradcheck.tolerance);
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Failure::config(anyhow!("tolerance must be finite and >= 0, got {tol}")));
    }
    let spec = &cfg.gradcheck.spec;
    let report = run_all(spec, &cfg.gradcheck_config())?;
    let mut untested = Vec::new();
    for s in &report.suites {
        println!(
            "{:>10}: {} parameters checked, max relative error {:.3e}",
            s.name,
            s.checked,
            s.max_rel_error()
        );
        untested.extend(s.zero_tensors.iter().filter(|t| !idle_tensor(spec, t)).cloned());
    }
    if let Some((suite, w)) = report.worst() {
        println!(
            "worst: {} {}[{}] analytic {:.6e} numeric {:.6e} relative error {:.3e}",
            suite.name, w.tensor, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    if !untested.is_empty() {
        return Err(Failure::check(anyhow!("gradients never exercised for {untested:?}")));
    }
    if !report.passes(tol, tol) {
        return Err(Failure::check(anyhow!("gradient check failed at tolerance {tol:e}")));
    }
    println!("gradient check passed at tolerance {tol:e}");
    Ok(())
}

fn run(args: Vec<String>) -> Outcome {
    let (args, mut overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 2 } else { 0 };
            std::process::exit(code);
        }
    };
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(n) = cli.iterations {
        overrides.push(("train.iterations".into(), n.to_string()));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push(("out_dir".into(), toml::Value::String(d.display().to_string()).to_string()));
    }
    if let Some(a) = cli.actor {
        let name = match a {
            ActorKind::Popsan => "popsan",
            ActorKind::Dense => "dense",
        };
        overrides.push(("actor".into(), name.into()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, episodes } => cmd_eval(&cfg, checkpoint, *episodes),
        Command::NoiseSweep {
            checkpoint,
            baseline,
            sigmas,
            episodes,
        } => cmd_noise_sweep(&cfg, checkpoint, baseline.as_deref(), sigmas.as_deref(), *episodes),
        Command::Energy { checkpoint } => cmd_energy(&cfg, checkpoint),
        Command::Gradcheck { tolerance } => cmd_gradcheck(&cfg, *tolerance),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
