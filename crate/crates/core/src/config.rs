//! Run configuration: a TOML document with flat sections.
//!
//! ```toml
//! [run]
//! modes = ["ne"]          # ne | random | static | reset
//! seeds = [0, 1, 2]
//! total_steps = 100000
//!
//! [env]
//! name = "pendulum_swing_up"
//!
//! [growth]
//! interval = 5000
//! omega = 0.4
//! ```
//!
//! Unknown keys are rejected. Every omitted key takes its default, and the
//! resolved document (defaults filled in) is what gets echoed next to a run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{ContinualSchedule, EnvName};
use crate::topology::GrowthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Gradient growth, dormant pruning and experience review.
    Ne,
    /// Uniform growth only.
    Random,
    /// Fixed topology (sparse or dense per `static_density`).
    Static,
    /// Dense network with periodic re-initialization of the last two layers.
    Reset,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ne => "ne",
            Mode::Random => "random",
            Mode::Static => "static",
            Mode::Reset => "reset",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ne" => Ok(Mode::Ne),
            "random" => Ok(Mode::Random),
            "static" => Ok(Mode::Static),
            "reset" => Ok(Mode::Reset),
            other => Err(format!("unknown mode `{other}` (expected ne, random, static or reset)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticDensity {
    /// Erdos-Renyi mask at `growth.initial_sparsity`, never changed.
    Sparse,
    Dense,
}

/// Floating-point type of the networks. Environments always run in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub warmup_steps: u64,
    pub static_density: StaticDensity,
    /// Defaults to `total_steps / 5`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reset_interval: Option<u64>,
    pub ne_actor: bool,
    pub ne_critic: bool,
    pub experience_review: bool,
    pub precision: Precision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Ne],
            seeds: vec![0],
            total_steps: 100_000,
            eval_interval: 5_000,
            eval_episodes: 5,
            warmup_steps: 1_000,
            static_density: StaticDensity::Sparse,
            reset_interval: None,
            ne_actor: true,
            ne_critic: true,
            experience_review: true,
            precision: Precision::F64,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: EnvName,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            name: EnvName::PendulumSwingUp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub gamma: f64,
    /// Polyak rate `rho` of the target networks.
    pub polyak: f64,
    pub policy_delay: u64,
    /// Exploration noise std, in units of the action bound.
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            polyak: 0.005,
            policy_delay: 2,
            exploration_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            batch_size: 128,
            buffer_capacity: 100_000,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewConfig {
    /// Trailing window of the slope signal, counted in evaluations.
    pub window: usize,
    pub lower_bound: f64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            window: 20,
            lower_bound: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continual: Option<ContinualSchedule>,
    pub growth: GrowthConfig,
    pub td3: Td3Config,
    pub review: ReviewConfig,
}

pub const DEFAULT_OUT_DIR: &str = "runs";
pub const OUT_ENV_VAR: &str = "NE_OUT";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parses, fills defaults and validates.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string().trim().to_string(),
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills run-length dependent defaults. Continual runs take `total_steps`
    /// from their schedule.
    pub fn resolved(mut self) -> Self {
        if let Some(c) = &self.continual {
            // A continual run lasts exactly as long as its schedule.
            self.run.total_steps = c.total_steps();
        }
        if self.growth.end_step.is_none() {
            self.growth.end_step = Some(self.run.total_steps);
        }
        if self.run.reset_interval.is_none() {
            self.run.reset_interval = Some((self.run.total_steps / 5).max(1));
        }
        self
    }

    pub fn with_out_dir(mut self, dir: Option<PathBuf>) -> Self {
        if let Some(d) = dir {
            self.run.out_dir = Some(d);
        }
        if self.run.out_dir.is_none() {
            let root = std::env::var_os(OUT_ENV_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
            self.run.out_dir = Some(root);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let r = &self.run;
        if r.modes.is_empty() {
            return bad("run.modes must not be empty".into());
        }
        if r.seeds.is_empty() {
            return bad("run.seeds must not be empty".into());
        }
        if r.total_steps == 0 {
            return bad("run.total_steps must be >= 1".into());
        }
        if r.eval_interval == 0 {
            return bad("run.eval_interval must be >= 1".into());
        }
        if r.eval_episodes == 0 {
            return bad("run.eval_episodes must be >= 1".into());
        }
        if r.reset_interval == Some(0) {
            return bad("run.reset_interval must be >= 1".into());
        }
        self.growth.validate().map_err(ConfigError::Invalid)?;
        let t = &self.td3;
        if !(0.0..1.0).contains(&t.gamma) {
            return bad(format!("td3.gamma must be in [0, 1), got {}", t.gamma));
        }
        if !(t.polyak > 0.0 && t.polyak <= 1.0) {
            return bad(format!("td3.polyak must be in (0, 1], got {}", t.polyak));
        }
        if t.policy_delay == 0 {
            return bad("td3.policy_delay must be >= 1".into());
        }
        for (key, v) in [
            ("td3.exploration_noise", t.exploration_noise),
            ("td3.target_noise", t.target_noise),
            ("td3.noise_clip", t.noise_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{key} must be >= 0, got {v}"));
            }
        }
        for (key, v) in [("td3.actor_lr", t.actor_lr), ("td3.critic_lr", t.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{key} must be > 0, got {v}"));
            }
        }
        if t.batch_size == 0 {
            return bad("td3.batch_size must be >= 1".into());
        }
        if t.buffer_capacity < t.batch_size {
            return bad(format!(
                "td3.buffer_capacity ({}) must be >= td3.batch_size ({})",
                t.buffer_capacity, t.batch_size
            ));
        }
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return bad("td3.hidden must list at least one non-zero width".into());
        }
        if !(0.0..=1.0).contains(&self.review.lower_bound) {
            return bad(format!("review.lower_bound must be in [0, 1], got {}", self.review.lower_bound));
        }
        if self.review.window == 0 {
            return bad("review.window must be >= 1".into());
        }
        if let Some(c) = &self.continual {
            if c.tasks.is_empty() {
                return bad("continual.tasks must not be empty".into());
            }
            if c.episodes_per_task == 0 {
                return bad("continual.episodes_per_task must be >= 1".into());
            }
            if c.cycles == 0 {
                return bad("continual.cycles must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Config for one (mode, seed) pair.
    pub fn single(&self, mode: Mode, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.run.modes = vec![mode];
        c.run.seeds = vec![seed];
        c
    }

    pub fn mode(&self) -> Mode {
        self.run.modes[0]
    }

    pub fn seed(&self) -> u64 {
        self.run.seeds[0]
    }

    /// Report group: the mode, with static runs split by density.
    pub fn label(&self) -> String {
        match self.mode() {
            Mode::Static => match self.run.static_density {
                StaticDensity::Sparse => "static-sparse".into(),
                StaticDensity::Dense => "static-dense".into(),
            },
            m => m.as_str().into(),
        }
    }
}
