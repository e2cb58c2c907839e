//! Run configuration: one TOML file (or a named preset) fully determines a run.
//!
//! ```toml
//! preset = "lqr-paper"        # optional, fills [env]
//! output_dir = "runs/lqr"
//!
//! [agent]                     # any subset of AgentConfig
//! episodes = 300
//!
//! [eval]
//! n_episodes = 10
//! horizon = 5000
//! seeds = [0, 1, 2, 3]
//! ```
//!
//! Exactly one of `preset` and `[env]` must be given.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::env::EnvParams;
use crate::reference::ReferenceSearch;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Built-in environment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LqrPaper,
    BandPaper,
    MaxposPaper,
    LqrPaperNoisy,
    BandPaperNoisy,
    MaxposPaperNoisy,
    /// Maxpos with the tanh barrier switched off (hard clipping only).
    MaxposNoBarrier,
}

/// Return-noise level of the noisy presets for the quadratic-risk kinds.
pub const NOISY_SIGMA_QUADRATIC: f64 = 10.0;
/// Return-noise level of the noisy maxpos preset.
pub const NOISY_SIGMA_MAXPOS: f64 = 4.0;

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::LqrPaper,
        Preset::BandPaper,
        Preset::MaxposPaper,
        Preset::LqrPaperNoisy,
        Preset::BandPaperNoisy,
        Preset::MaxposPaperNoisy,
        Preset::MaxposNoBarrier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LqrPaper => "lqr-paper",
            Preset::BandPaper => "band-paper",
            Preset::MaxposPaper => "maxpos-paper",
            Preset::LqrPaperNoisy => "lqr-paper-noisy",
            Preset::BandPaperNoisy => "band-paper-noisy",
            Preset::MaxposPaperNoisy => "maxpos-paper-noisy",
            Preset::MaxposNoBarrier => "maxpos-no-barrier",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn env(self) -> EnvParams {
        match self {
            Preset::LqrPaper => EnvParams::lqr_paper(),
            Preset::BandPaper => EnvParams::band_paper(),
            Preset::MaxposPaper => EnvParams::maxpos_paper(),
            Preset::LqrPaperNoisy => EnvParams::lqr_paper().with_noise(NOISY_SIGMA_QUADRATIC),
            Preset::BandPaperNoisy => EnvParams::band_paper().with_noise(NOISY_SIGMA_QUADRATIC),
            Preset::MaxposPaperNoisy => EnvParams::maxpos_paper().with_noise(NOISY_SIGMA_MAXPOS),
            Preset::MaxposNoBarrier => EnvParams::maxpos(4.0, 2.0, 0.9, None),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Out-of-sample evaluation budget and the list of training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    /// Base seed of the evaluation environments (shared by every policy).
    pub seed: u64,
    /// Training seeds.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 10,
            horizon: 5000,
            seed: 0x0E7A_15EED,
            seeds: vec![0, 1, 2, 3],
        }
    }
}

/// Resolution of the policy-visualisation exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub slice_positions: Vec<f64>,
    pub slice_p_range: (f64, f64),
    pub slice_points: usize,
    pub grid_pi_range: (f64, f64),
    pub grid_p_range: (f64, f64),
    pub grid_resolution: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            slice_positions: crate::harness::DEFAULT_SLICE_POSITIONS.to_vec(),
            slice_p_range: (-4.0, 4.0),
            slice_points: 201,
            grid_pi_range: (-3.0, 3.0),
            grid_p_range: (-3.0, 3.0),
            grid_resolution: 121,
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvParams,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub reference: ReferenceSearch,
    pub export: ExportConfig,
    pub output_dir: PathBuf,
}

/// On-disk form: `env` may be replaced by a preset name.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    preset: Option<Preset>,
    env: Option<EnvParams>,
    #[serde(default)]
    agent: AgentConfig,
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    reference: ReferenceSearch,
    #[serde(default)]
    export: ExportConfig,
    output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// A preset with default agent, evaluation and export settings.
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            env: preset.env(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            reference: ReferenceSearch::default(),
            export: ExportConfig::default(),
            output_dir: PathBuf::from("runs").join(preset.name()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawRunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_owned()))?;
        let (env, default_dir) = match (raw.preset, raw.env) {
            (Some(p), None) => (p.env(), PathBuf::from("runs").join(p.name())),
            (None, Some(env)) => {
                let dir = PathBuf::from("runs").join(env_label(&env));
                (env, dir)
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("give either `preset` or [env], not both".into()))
            }
            (None, None) => {
                return Err(ConfigError::Invalid("one of `preset` or [env] is required".into()))
            }
        };
        let cfg = Self {
            env,
            agent: raw.agent,
            eval: raw.eval,
            reference: raw.reference,
            export: raw.export,
            output_dir: raw.output_dir.unwrap_or(default_dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `source` as a file if it exists, otherwise as a preset name.
    pub fn load(source: &str) -> Result<Self, ConfigError> {
        let path = Path::new(source);
        if !path.exists() {
            if let Some(p) = Preset::from_name(source) {
                return Ok(Self::from_preset(p));
            }
            if path.extension().is_none() && path.components().count() == 1 {
                let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                return Err(ConfigError::Invalid(format!(
                    "`{source}` is neither a file nor a preset (presets: {})",
                    known.join(", ")
                )));
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_owned(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.env.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.agent.validate() {
            return invalid(e.to_string());
        }
        let ev = &self.eval;
        if ev.n_episodes == 0 || ev.horizon == 0 {
            return invalid("eval.n_episodes and eval.horizon must be > 0".into());
        }
        if ev.seeds.is_empty() {
            return invalid("eval.seeds must not be empty".into());
        }
        let mut sorted = ev.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ev.seeds.len() {
            return invalid("eval.seeds contains duplicates".into());
        }
        let r = &self.reference;
        if r.episodes == 0 || r.horizon == 0 {
            return invalid("reference.episodes and reference.horizon must be > 0".into());
        }
        for g in [r.band_grid, r.threshold_grid] {
            if let Err(e) = g.validate() {
                return invalid(e.to_string());
            }
        }
        let x = &self.export;
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !range_ok(x.slice_p_range) || !range_ok(x.grid_pi_range) || !range_ok(x.grid_p_range) {
            return invalid("export ranges must be finite with lo < hi".into());
        }
        if x.slice_points < 2 || x.grid_resolution < 2 {
            return invalid("export.slice_points and export.grid_resolution must be >= 2".into());
        }
        if x.slice_positions.is_empty() || x.slice_positions.iter().any(|v| !v.is_finite()) {
            return invalid("export.slice_positions must be non-empty and finite".into());
        }
        Ok(())
    }
}

fn env_label(env: &EnvParams) -> String {
    let noise = if env.noisy_rewards { "-noisy" } else { "" };
    format!("{}{noise}", env.kind.short_name())
}
