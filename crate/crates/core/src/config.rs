//! The JSON configuration shared by all `fou` subcommands.
//!
//! Model keys sit at the top level; each subcommand reads its own section.
//! Unknown keys anywhere are errors. `key=value` overrides are applied to
//! the parsed JSON before it is typed, so an override behaves exactly like
//! editing the file.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::estimator::{EstimateOptions, EstimatorMode, TraceCorrection};
use crate::experiments::McConfig;
use crate::fgn::HurstExponent;
use crate::model::{BasisSet, FouModel, ModelError, StartMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key=value")]
    Override(String),
    #[error("inadmissible configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub hurst: HurstExponent,
    pub alpha: f64,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub basis: BasisSet,
    #[serde(default)]
    pub xi0: f64,
    /// Grid step is `1 / step_denominator`.
    pub step_denominator: usize,
    pub n_periods: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stationary_start: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in_periods: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clt: Option<CltSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    #[serde(default = "default_mode")]
    pub mode: EstimatorMode,
    /// Solve for the correction rate instead of using `alpha`.
    #[serde(default)]
    pub plug_in: bool,
    #[serde(default)]
    pub correction: TraceCorrection,
}

fn default_mode() -> EstimatorMode {
    EstimatorMode::OracleDivergence
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            plug_in: false,
            correction: TraceCorrection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySection {
    pub n_list: Vec<usize>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    pub n: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    /// Start of the second path; the first starts at `xi0`.
    pub other_start: f64,
    /// Number of whole periods observed.
    pub horizon: usize,
}

/// Sets `key` (dotted for nested sections) to `value`, read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let map = match node {
            Value::Object(map) => map,
            _ => return Err(ConfigError::Override(assignment.to_string())),
        };
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl Config {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let config: Config = serde_json::from_value(root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hurst.value() <= 0.5 {
            return Err(ConfigError::Invalid(format!(
                "H must lie in (1/2, 1), got {}",
                self.hurst
            )));
        }
        if self.step_denominator == 0 || self.n_periods == 0 || self.workers == 0 {
            return Err(ConfigError::Invalid(
                "step_denominator, n_periods and workers must be positive".into(),
            ));
        }
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<FouModel, ModelError> {
        FouModel::new(
            self.hurst,
            self.alpha,
            self.mu.clone(),
            self.sigma,
            self.basis.clone(),
            self.xi0,
        )
    }

    pub fn step(&self) -> f64 {
        1.0 / self.step_denominator as f64
    }

    pub fn start(&self) -> StartMode {
        if self.stationary_start {
            StartMode::Stationary {
                burn_in_periods: self.burn_in_periods,
            }
        } else {
            StartMode::FromInitial
        }
    }

    /// Grid increments consumed before `t = 0`.
    pub fn history_steps(&self) -> usize {
        self.start().burn_in_periods(self.alpha) * self.step_denominator
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        let e = self.estimate;
        EstimateOptions {
            mode: e.mode,
            sigma: self.sigma,
            alpha_for_correction: (e.mode == EstimatorMode::OracleDivergence && !e.plug_in).then_some(self.alpha),
            correction: e.correction,
        }
    }

    fn mc(&self, n_list: Vec<usize>, replicates: usize) -> Result<McConfig, ConfigError> {
        Ok(McConfig {
            model: self.model()?,
            n_list,
            replicates,
            step: self.step(),
            mode: self.estimate.mode,
            master_seed: self.seed,
            workers: self.workers,
            start: self.start(),
            plug_in: self.estimate.plug_in,
        })
    }

    pub fn consistency_config(&self) -> Result<McConfig, ConfigError> {
        let s = self
            .consistency
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing \"consistency\" section".into()))?;
        self.mc(s.n_list.clone(), s.replicates)
    }

    pub fn clt_config(&self) -> Result<McConfig, ConfigError> {
        let s = self
            .clt
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing \"clt\" section".into()))?;
        self.mc(vec![s.n], s.replicates)
    }
}
