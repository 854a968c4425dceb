//! Experiment configuration: JSON on disk, validated and default-filled on
//! load. Unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use descriptor_mhe::model::SystemFile;
use descriptor_mhe::{ConstraintSet, DescriptorSystem, Error, Prior, Result};
use serde::{Deserialize, Serialize};

use crate::actuator;

/// Where the system matrices come from: the built-in actuator or a JSON
/// file (see [`SystemFile`] for the schema).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SystemSource {
    /// `"actuator"` selects the built-in benchmark system.
    Named(String),
    /// `{"path": "..."}` loads matrices from a file.
    File { path: PathBuf },
}

/// Piecewise-constant profile for the free (disturbance) channel: at each
/// step the latest `[step, value]` entry at or before it applies, realized
/// exactly on the configured state component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceProfile {
    /// `[step, value]` pairs, strictly increasing in step.
    pub schedule: Vec<(usize, f64)>,
    /// State component the scheduled value is realized on.
    pub component: usize,
}

impl DisturbanceProfile {
    /// Scheduled value at `step`; 0 before the first entry.
    pub fn value_at(&self, step: usize) -> f64 {
        let mut v = 0.0;
        for &(s, val) in &self.schedule {
            if s <= step {
                v = val;
            } else {
                break;
            }
        }
        v
    }
}

fn default_horizons() -> Vec<usize> {
    vec![5, 10, 15, 20, 30]
}

const fn default_mw_horizon() -> usize {
    1
}

const fn default_process_var() -> f64 {
    1.0
}

const fn default_meas_var() -> f64 {
    0.1
}

const fn default_repeats() -> usize {
    5
}

const fn default_workers() -> usize {
    1
}

fn default_eviction() -> String {
    "text".into()
}

const fn default_eps_activity() -> f64 {
    descriptor_mhe::estimators::EPS_ACTIVITY
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_methods() -> Vec<String> {
    vec!["fie".into(), "mhe".into(), "mwmhe".into()]
}

/// One experiment: system, data generation, estimator grid, run controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    pub t_final: usize,
    /// Sliding-horizon grid for the moving-horizon rows.
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    /// Sliding-horizon length of the multiple-window rows.
    #[serde(default = "default_mw_horizon")]
    pub mw_horizon: usize,
    /// Window lag per grid row; paired elementwise with `horizons`. Default
    /// is `N - mw_horizon`, matching each row's effective lookback.
    #[serde(default)]
    pub nfc: Option<Vec<usize>>,
    /// Pick one lag for all rows from the steady-state coupling norm
    /// instead; ignored when `nfc` is given.
    #[serde(default)]
    pub coupling_bound: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_process_var")]
    pub process_noise_var: f64,
    #[serde(default = "default_meas_var")]
    pub measurement_noise_var: f64,
    #[serde(default)]
    pub disturbance: Option<DisturbanceProfile>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Timing repeats per grid cell (median reported); 0 disables timing
    /// for byte-stable reports.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// `"text"` (keep a window N + N_FC + 1 steps past its last stage) or
    /// `"flowchart"` (N_FC + 1 steps).
    #[serde(default = "default_eviction")]
    pub eviction_rule: String,
    #[serde(default = "default_eps_activity")]
    pub eps_activity: f64,
    /// Re-check dropped constraints on the recovered trajectory at the end
    /// of each multiple-window run.
    #[serde(default)]
    pub posthoc_check: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
}

impl ExperimentConfig {
    /// Parse and validate; `base` resolves relative system paths.
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        if let (SystemSource::File { path }, Some(dir)) = (&mut cfg.system, base) {
            if path.is_relative() {
                *path = dir.join(&path);
            }
        }
        Ok(cfg)
    }

    fn validate(&mut self) -> Result<()> {
        if let SystemSource::Named(name) = &self.system {
            if name != "actuator" {
                return Err(Error::InvalidInput(format!(
                    "unknown built-in system {name:?}; use \"actuator\" or {{\"path\": ...}}"
                )));
            }
        }
        if self.horizons.is_empty() {
            return Err(Error::InvalidInput("horizon list is empty".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::InvalidInput("horizon 0 is not allowed".into()));
        }
        let before = self.horizons.len();
        let mut seen = std::collections::BTreeSet::new();
        self.horizons.retain(|&n| seen.insert(n));
        if self.horizons.len() != before {
            eprintln!("warning: duplicate horizons removed; using {:?}", self.horizons);
        }
        if self.mw_horizon == 0 {
            return Err(Error::InvalidInput("mw_horizon must be at least 1".into()));
        }
        if let Some(nfc) = &self.nfc {
            if nfc.len() != self.horizons.len() {
                return Err(Error::InvalidInput(format!(
                    "nfc has {} entries for {} horizons",
                    nfc.len(),
                    self.horizons.len()
                )));
            }
        }
        let max_n = *self.horizons.iter().max().expect("non-empty");
        if self.t_final <= max_n.max(self.mw_horizon) {
            return Err(Error::InvalidInput(format!(
                "t_final {} must exceed the largest horizon {}",
                self.t_final,
                max_n.max(self.mw_horizon)
            )));
        }
        if self.process_noise_var < 0.0 || self.measurement_noise_var < 0.0 {
            return Err(Error::InvalidInput("noise variances must be >= 0".into()));
        }
        if let Some(b) = self.coupling_bound {
            if b <= 0.0 {
                return Err(Error::InvalidInput("coupling_bound must be positive".into()));
            }
        }
        if !matches!(self.eviction_rule.as_str(), "text" | "flowchart") {
            return Err(Error::InvalidInput(format!(
                "eviction_rule must be \"text\" or \"flowchart\", got {:?}",
                self.eviction_rule
            )));
        }
        if self.eps_activity <= 0.0 {
            return Err(Error::InvalidInput("eps_activity must be positive".into()));
        }
        for m in &self.methods {
            if !matches!(m.as_str(), "fie" | "mhe" | "mwmhe") {
                return Err(Error::InvalidInput(format!(
                    "unknown method {m:?}; expected fie, mhe, or mwmhe"
                )));
            }
        }
        if let Some(d) = &self.disturbance {
            for pair in d.schedule.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::InvalidInput(format!(
                        "disturbance schedule steps must increase: {} then {}",
                        pair[0].0, pair[1].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Materialize the system this config refers to. The built-in system
    /// derives its noise weights from the configured variances, so those
    /// must be positive for it.
    pub fn system_parts(&self) -> Result<(DescriptorSystem, ConstraintSet, Prior)> {
        match &self.system {
            SystemSource::Named(_) => actuator::synthetic_actuator(
                self.process_noise_var,
                self.measurement_noise_var,
            ),
            SystemSource::File { path } => SystemFile::from_path(path)?.into_parts(),
        }
    }

    /// Effective disturbance profile: the configured one, or the default
    /// actuator profile when the built-in system is selected.
    pub fn disturbance_profile(&self) -> Option<DisturbanceProfile> {
        if let Some(d) = &self.disturbance {
            return Some(d.clone());
        }
        match &self.system {
            SystemSource::Named(_) => Some(DisturbanceProfile {
                schedule: actuator::default_schedule(),
                component: 3,
            }),
            SystemSource::File { .. } => None,
        }
    }

    /// Eviction rule as the library enum.
    pub fn eviction(&self) -> descriptor_mhe::estimators::EvictionRule {
        match self.eviction_rule.as_str() {
            "flowchart" => descriptor_mhe::estimators::EvictionRule::StageLag,
            _ => descriptor_mhe::estimators::EvictionRule::ExitLag,
        }
    }

    /// Estimator options implied by this config.
    pub fn estimator_options(&self) -> descriptor_mhe::estimators::EstimatorOptions {
        descriptor_mhe::estimators::EstimatorOptions {
            eps_activity: self.eps_activity,
            eviction: self.eviction(),
            posthoc: self.posthoc_check,
            ..Default::default()
        }
    }

    /// Lag per grid row, resolving the default pairing and the coupling
    /// bound rule.
    pub fn lags(&self, sys: &DescriptorSystem, prior: &Prior) -> Result<Vec<usize>> {
        if let Some(nfc) = &self.nfc {
            return Ok(nfc.clone());
        }
        if let Some(bound) = self.coupling_bound {
            let steady = descriptor_mhe::dkf::riccati_steady_state(sys, &prior.p0, 1e-11, 50_000)?;
            let (q, _) = descriptor_mhe::dkf::select_horizon(&steady, bound, 10_000)?;
            return Ok(vec![q; self.horizons.len()]);
        }
        Ok(self
            .horizons
            .iter()
            .map(|&n| n.saturating_sub(self.mw_horizon))
            .collect())
    }
}

/// Load a config file, resolving relative system paths against its parent
/// directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse_str(&text, path.parent())
}
