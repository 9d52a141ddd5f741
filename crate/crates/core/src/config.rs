//! Declarative experiment configuration.
//!
//! A config is a TOML file with one section per stage. Every field has a default, so a
//! file only lists what differs:
//!
//! ```toml
//! seed = 1000
//! [instance]
//! dim_d = 3
//! head_scale = 20.0
//! [online]
//! horizon = 50000
//! ```

use serde::{Deserialize, Serialize};

use crate::diversity::{CovDivisor, DEFAULT_HARD_FRACTION, DEFAULT_RANK_TOL};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::instance::InstanceConfig;
use crate::io::SCHEMA_VERSION;
use crate::offline::OfflineConfig;
use crate::online::OnlineConfig;

/// Environment variable that replaces the top-level `seed`.
pub const SEED_ENV: &str = "PERSALIGN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub hard_fraction: f64,
    pub rank_tol: f64,
    pub cov_divisor: CovDivisor,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            hard_fraction: DEFAULT_HARD_FRACTION,
            rank_tol: DEFAULT_RANK_TOL,
            cov_divisor: CovDivisor::Population,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// First seed of the instance search.
    pub seed: u64,
    pub instance: InstanceConfig,
    pub fit: FitConfig,
    pub online: OnlineConfig,
    pub offline: OfflineConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1000,
            instance: InstanceConfig::default(),
            fit: FitConfig::default(),
            online: OnlineConfig::default(),
            offline: OfflineConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved config, every default written out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.instance.validate()?;
        self.fit.validate()?;
        self.online.validate()?;
        self.offline.validate()?;
        let d = &self.diagnostics;
        if !(d.hard_fraction > 0.0 && d.hard_fraction <= 1.0) {
            return Err(Error::InvalidConfig("diagnostics.hard_fraction must be in (0, 1]".into()));
        }
        if !(d.rank_tol > 0.0 && d.rank_tol < 1.0) {
            return Err(Error::InvalidConfig("diagnostics.rank_tol must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Replaces `seed` with the value of `PERSALIGN_SEED` when it is set.
    pub fn apply_seed_override(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(raw) => {
                let seed = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
                self.seed = seed;
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "full-online",
    "full-offline-u10",
    "desk-online",
    "desk-degenerate",
    "desk-offline",
];

const FULL_ONLINE: &str = r#"seed = 1000
[instance]
dim_d = 5
dim_j = 10
num_users = 10
raw_gap_target = 0.01
head_scale = 100.0
[online]
horizon = 400000
eta = 1.0
refit_divisor = 5000
"#;

const FULL_OFFLINE_U10: &str = r#"seed = 1000
[instance]
dim_d = 5
dim_j = 10
num_users = 10
raw_gap_target = 0.01
head_scale = 20.0
[offline]
n_total = 100000
n_checkpoints = 100
seeds = [0, 1, 2, 3, 4]
"#;

const DESK_ONLINE: &str = r#"seed = 1000
[instance]
dim_d = 3
dim_j = 4
num_users = 6
n_ctx = 20
n_act = 20
raw_gap_target = 0.05
head_scale = 20.0
[online]
horizon = 50000
refit_divisor = 100
eval_cadence = 0
"#;

const DESK_DEGENERATE: &str = r#"seed = 1000
[instance]
dim_d = 3
dim_j = 4
num_users = 6
n_ctx = 20
n_act = 20
raw_gap_target = 0.05
head_scale = 20.0
head_rank = 2
max_retries = 20000
[online]
horizon = 50000
refit_divisor = 100
eval_cadence = 0
"#;

const DESK_OFFLINE: &str = r#"seed = 1000
[instance]
dim_d = 3
dim_j = 4
num_users = 10
n_ctx = 20
n_act = 20
raw_gap_target = 0.05
head_scale = 20.0
[offline]
n_total = 20000
n_checkpoints = 40
seeds = [0, 1, 2, 3, 4]
"#;

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "full-online" => FULL_ONLINE,
        "full-offline-u10" => FULL_OFFLINE_U10,
        "desk-online" => DESK_ONLINE,
        "desk-degenerate" => DESK_DEGENERATE,
        "desk-offline" => DESK_OFFLINE,
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name).ok_or_else(|| {
        Error::Config(format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", ")))
    })?;
    ExperimentConfig::from_toml_str(text)
}
