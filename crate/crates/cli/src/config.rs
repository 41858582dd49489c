//! Run configuration: one TOML file, every field defaulted, plus
//! `--section.key value` overrides applied before deserialisation.

use std::path::{Path, PathBuf};

use popsan::energy::EnergyModel;
use popsan::envs::{EnvConfig, EvalConfig};
use popsan::gradcheck::GradCheckConfig;
use popsan::mlp::DenseSpec;
use popsan::ppo::PpoConfig;
use popsan::train::TrainConfig;
use popsan::NetworkSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Popsan,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub settle_steps: usize,
    pub divergence_error: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        EvalSection {
            episodes: d.episodes,
            settle_steps: d.settle_steps,
            divergence_error: d.divergence_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sigmas: vec![0.0, 0.1, 0.2, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    /// Episodes whose visited observations are replayed for counting.
    pub episodes: usize,
    pub t_finals: Vec<usize>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        let m = EnergyModel::default();
        EnergySection {
            episodes: 1,
            t_finals: vec![1, 2, 3],
            e_mac_pj: m.e_mac,
            e_ac_pj: m.e_ac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub spec: NetworkSpec,
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
    pub max_params: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        GradcheckSection {
            spec: NetworkSpec::tiny(),
            tolerance: 1e-3,
            step: d.step,
            floor: d.floor,
            max_params: d.max_params,
        }
    }
}

/// The top-level `seed` is authoritative: it replaces the `seed` field of
/// every section when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub actor: ActorKind,
    pub network: NetworkSpec,
    pub dense: DenseSpec,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub noise: NoiseSection,
    pub energy: EnergySection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            actor: ActorKind::Popsan,
            network: NetworkSpec::default(),
            dense: DenseSpec::default(),
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            noise: NoiseSection::default(),
            energy: EnergySection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("override --{key}: {message}")]
    Override { key: String, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override {
        key: key.to_string(),
        message,
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment".into()));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for s in sections {
        let entry = table
            .entry(s.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| err(format!("`{s}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies overrides in order,
    /// resolves seeds and validates every section.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<Table>(&text).map_err(|e| ConfigError::Parse {
                    path: p.display().to_string(),
                    message: e.message().to_string(),
                })?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut root, k, v)?;
        }
        let source = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        let mut cfg: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: source,
            message: e.message().to_string(),
        })?;
        cfg.resolve_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_seed(&mut self) {
        self.network.seed = self.seed;
        self.dense.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.spec.seed = self.seed;
    }

    /// Every problem across all sections, reported together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut section = |name: &str, r: popsan::Result<()>| {
            match r {
                Ok(()) => {}
                Err(popsan::Error::Config(msg)) => {
                    for m in msg.split("; ") {
                        if m.starts_with(&format!("{name}.")) {
                            problems.push(m.to_string());
                        } else {
                            problems.push(format!("{name}: {m}"));
                        }
                    }
                }
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        };
        section("network", self.network.validate());
        section("dense", self.dense.validate());
        section("ppo", self.ppo.validate());
        section("env", self.env.validate());
        section("gradcheck.spec", self.gradcheck.spec.validate());
        if self.network.obs_dim != popsan::envs::OBS_DIM || self.network.act_dim != popsan::envs::ACT_DIM {
            problems.push(format!(
                "network: obs_dim/act_dim must be {}/{} for the tracking task",
                popsan::envs::OBS_DIM,
                popsan::envs::ACT_DIM
            ));
        }
        if self.dense.obs_dim != popsan::envs::OBS_DIM || self.dense.act_dim != popsan::envs::ACT_DIM {
            problems.push(format!(
                "dense: obs_dim/act_dim must be {}/{} for the tracking task",
                popsan::envs::OBS_DIM,
                popsan::envs::ACT_DIM
            ));
        }
        if self.eval.episodes == 0 {
            problems.push("eval.episodes must be >= 1".into());
        }
        if self.eval.settle_steps >= self.env.episode_steps {
            problems.push(format!(
                "eval.settle_steps ({}) must be below env.episode_steps ({})",
                self.eval.settle_steps, self.env.episode_steps
            ));
        }
        if self.eval.divergence_error.is_nan() || self.eval.divergence_error <= 0.0 {
            problems.push("eval.divergence_error must be > 0".into());
        }
        if self.noise.sigmas.is_empty() {
            problems.push("noise.sigmas must list at least one sigma".into());
        }
        if let Some(s) = self.noise.sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            problems.push(format!("noise.sigmas must be finite and >= 0, got {s}"));
        }
        if self.energy.episodes == 0 {
            problems.push("energy.episodes must be >= 1".into());
        }
        if self.energy.t_finals.is_empty() || self.energy.t_finals.contains(&0) {
            problems.push("energy.t_finals must be a non-empty list of counts >= 1".into());
        }
        for (name, v) in [("e_mac_pj", self.energy.e_mac_pj), ("e_ac_pj", self.energy.e_ac_pj)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("energy.{name} must be finite and >= 0, got {v}"));
            }
        }
        let g = &self.gradcheck;
        if !(g.tolerance.is_finite() && g.tolerance >= 0.0) {
            problems.push(format!("gradcheck.tolerance must be finite and >= 0, got {}", g.tolerance));
        }
        if !(g.step > 0.0 && g.step.is_finite()) {
            problems.push(format!("gradcheck.step must be > 0, got {}", g.step));
        }
        if !(g.floor > 0.0 && g.floor.is_finite()) {
            problems.push(format!("gradcheck.floor must be > 0, got {}", g.floor));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn eval_config(&self, episodes: Option<usize>) -> EvalConfig {
        EvalConfig {
            episodes: episodes.unwrap_or(self.eval.episodes),
            settle_steps: self.eval.settle_steps,
            divergence_error: self.eval.divergence_error,
            seed: self.seed,
        }
    }

    pub fn energy_model(&self) -> EnergyModel {
        EnergyModel {
            e_mac: self.energy.e_mac_pj,
            e_ac: self.energy.e_ac_pj,
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            step: self.gradcheck.step,
            floor: self.gradcheck.floor,
            max_params: self.gradcheck.max_params,
            seed: self.seed,
        }
    }
}
