//! Experiment configuration files (JSON).
//!
//! Every field has a default, so `{}` is a valid config. The top-level `seed`
//! is authoritative: it overwrites the generators' `rng_seed` fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssunmix::assimilate::{Mode, SolverSettings};
use ssunmix::learndyn::{NetworkConfig, TrainConfig};
use ssunmix::simulate::{ScenarioAConfig, ScenarioBConfig};

use crate::error::{CliError, Result};

/// Band count and epoch budget applied by `--desk-scale` when the config
/// leaves them unset.
pub const DESK_BANDS: usize = 50;
pub const DESK_EPOCHS: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scenario {
    #[default]
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Iterative,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityInit {
    #[default]
    Zero,
    /// Difference of the aligned VCA endmembers of the first two frames.
    FiniteDifference,
}

/// Where the assimilation takes abundances and fixed endmembers from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbundanceSource {
    /// VCA and FCLS on the first frame.
    #[default]
    Vca,
    /// The dataset's ground truth (oracle runs).
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda: f64,
    pub mode: Mode,
    pub method: Method,
    pub velocity_init: VelocityInit,
    pub abundances: AbundanceSource,
    pub settings: SolverSettings,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mode: Mode::Strong,
            method: Method::Iterative,
            velocity_init: VelocityInit::Zero,
            abundances: AbundanceSource::Vca,
            settings: SolverSettings::default(),
        }
    }
}

/// Network shapes. `h = null` uses the dataset's frame interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOptions {
    pub hidden: Vec<usize>,
    pub h: Option<f64>,
    pub lstm_dense: usize,
    pub lstm_units: usize,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            hidden: d.hidden,
            h: None,
            lstm_dense: d.lstm_dense,
            lstm_units: d.lstm_units,
        }
    }
}

impl NetworkOptions {
    pub fn resolve(&self, frame_interval: f64) -> NetworkConfig {
        NetworkConfig {
            hidden: self.hidden.clone(),
            h: self.h.unwrap_or(frame_interval),
            lstm_dense: self.lstm_dense,
            lstm_units: self.lstm_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnOptions {
    /// Run per-frame VCA on the mixed test images as an extra baseline.
    pub vca_baseline: bool,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self { vca_baseline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub scenario_a: ScenarioAConfig,
    pub scenario_b: ScenarioBConfig,
    /// Optional albedo CSV for scenario B: one row per band, one column per
    /// endmember, header row with material names.
    pub albedo_csv: Option<PathBuf>,
    pub solver: SolverConfig,
    pub network: NetworkOptions,
    pub train: TrainConfig,
    pub learn: LearnOptions,
}

impl ExperimentConfig {
    /// Parses `text`, applying desk-scale defaults to fields it leaves unset
    /// and the seed override.
    pub fn parse(text: &str, desk_scale: bool, seed: Option<u64>) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if !value.is_object() {
            return Err(CliError::Config("top level must be a JSON object".into()));
        }
        if desk_scale {
            for (section, key, v) in [
                ("scenario_a", "bands", DESK_BANDS),
                ("scenario_b", "bands", DESK_BANDS),
                ("train", "epochs", DESK_EPOCHS),
            ] {
                let obj = value
                    .as_object_mut()
                    .unwrap()
                    .entry(section)
                    .or_insert_with(|| serde_json::json!({}));
                match obj.as_object_mut() {
                    Some(map) => {
                        map.entry(key).or_insert(v.into());
                    }
                    None => return Err(CliError::Config(format!("`{section}` must be an object"))),
                }
            }
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.scenario_a.rng_seed = cfg.seed;
        cfg.scenario_b.rng_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, desk_scale: bool, seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => "{}".to_string(),
        };
        Self::parse(&text, desk_scale, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: ssunmix::Error| CliError::Config(format!("{name}: {e}"));
        self.scenario_a.validate().map_err(|e| field("scenario_a", e))?;
        self.scenario_b.validate().map_err(|e| field("scenario_b", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        if self.train.epochs == 0 {
            return Err(CliError::Config("train.epochs: must be >= 1".into()));
        }
        if !(self.solver.lambda >= 0.0) || !self.solver.lambda.is_finite() {
            return Err(CliError::Config(format!("solver.lambda: must be >= 0, got {}", self.solver.lambda)));
        }
        let s = &self.solver.settings;
        if s.max_iter == 0 || !(s.rel_tol >= 0.0) || !(s.grad_tol >= 0.0) || !(s.armijo_c > 0.0 && s.armijo_c < 1.0) {
            return Err(CliError::Config(format!("solver.settings: invalid values {s:?}")));
        }
        if self.solver.method == Method::ClosedForm && self.solver.mode == Mode::Weak {
            return Err(CliError::Config("solver.method: closed_form requires mode = strong".into()));
        }
        let n = &self.network;
        if n.hidden.contains(&0) || n.lstm_dense == 0 || n.lstm_units == 0 {
            return Err(CliError::Config("network: layer sizes must be positive".into()));
        }
        if let Some(h) = n.h {
            if !(h >= 0.0) || !h.is_finite() {
                return Err(CliError::Config(format!("network.h: must be >= 0, got {h}")));
            }
        }
        Ok(())
    }

    /// Canonical JSON: field order is fixed by the struct definitions.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serialises").as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = ExperimentConfig::parse("{}", false, None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.scenario_a.frames, 20);
        assert_eq!(cfg.scenario_a.bands, 224);
    }

    #[test]
    fn desk_scale_fills_only_unset_fields() {
        let cfg = ExperimentConfig::parse(r#"{"scenario_b": {"bands": 30}}"#, true, None).unwrap();
        assert_eq!(cfg.scenario_b.bands, 30);
        assert_eq!(cfg.scenario_a.bands, DESK_BANDS);
        assert_eq!(cfg.train.epochs, DESK_EPOCHS);
    }

    #[test]
    fn seed_overrides_generators() {
        let cfg = ExperimentConfig::parse(r#"{"seed": 4, "scenario_a": {"rng_seed": 9}}"#, false, Some(7)).unwrap();
        assert_eq!((cfg.seed, cfg.scenario_a.rng_seed, cfg.scenario_b.rng_seed), (7, 7, 7));
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = ExperimentConfig::parse(r#"{"scenario_b": {"train_frames": 40}}"#, false, None).unwrap_err();
        assert!(err.to_string().contains("scenario_b"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::parse(r#"{"solver": {"lamda": 1}}"#, false, None).unwrap_err();
        assert!(err.to_string().contains("lamda"));
        let err = ExperimentConfig::parse(r#"{"solver": {"lambda": -1}}"#, false, None).unwrap_err();
        assert!(err.to_string().contains("solver.lambda"));
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::parse(r#"{"scenario": "B", "seed": 3, "network": {"h": 0.5}}"#, true, None).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_json(), false, None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sha256(), cfg.sha256());
    }
}
