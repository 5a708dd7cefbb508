//! Configuration schema for experiments: plant description, disturbance,
//! controller settings, and campaign parameters, all serializable as JSON.
//!
//! `CampaignConfig::paper_preset()` carries the reference experiment:
//! constant kernel `k0 = 0.06`, flow rate `alpha = 0.5`, unit feed
//! concentration with 10% Gaussian fluctuation, targets `S = 0.2`,
//! `P = 1.2`, variance weight 100, probability level 0.85, drug-second
//! band `[0, 0.06]`, horizon 3, sampling period 1, and 100 runs to
//! `T = 15`.

use crate::controller::{
    ControlConfig, ControllerError, CostHorizon, NoiseSpec, ReformulationMode,
};
use crate::moments::{FeedSpec, KernelSpec, MomentState, INVARIANT_SLACK};
use crate::pce::TruncationScheme;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown preset '{0}' (available: paper)")]
    UnknownPreset(String),
    #[error("invalid campaign config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// The plant: kernel, nominal feed, initial state, and integrator step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub kernel: KernelSpec,
    pub feed: FeedSpec,
    pub x0: MomentState,
    pub integrator_dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Smpc,
    Nmpc,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Smpc => write!(f, "smpc"),
            ControllerKind::Nmpc => write!(f, "nmpc"),
        }
    }
}

/// A complete closed-loop Monte Carlo experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub plant: PlantConfig,
    pub noise: NoiseSpec,
    pub control: ControlConfig,
    pub controller: ControllerKind,
    pub runs: usize,
    pub total_time: f64,
    pub master_seed: u64,
    /// Default output directory; a CLI `--out` flag takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.plant
            .kernel
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plant
            .feed
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plant
            .x0
            .check_ordering(INVARIANT_SLACK)
            .map_err(ConfigError::Invalid)?;
        if !(self.plant.integrator_dt > 0.0) {
            return Err(ConfigError::Invalid("integrator_dt must be > 0".into()));
        }
        self.control.validate()?;
        self.noise.validate()?;
        if self.runs == 0 {
            return Err(ConfigError::Invalid("run count must be >= 1".into()));
        }
        let dt = self.control.dt_sample;
        let steps = (self.total_time / dt).round();
        if self.total_time < 0.0 || (steps * dt - self.total_time).abs() > 1e-9 * dt.max(1.0) {
            return Err(ConfigError::Invalid(format!(
                "total time {} is not a multiple of the sampling period {}",
                self.total_time, dt
            )));
        }
        // The closed-loop plant is the controller's own model; keeping the
        // steps identical makes zero-noise predictions exact.
        if (self.plant.integrator_dt - self.control.integrator_dt).abs() > 1e-15 {
            return Err(ConfigError::Invalid(format!(
                "plant integrator step {} differs from the controller's {}",
                self.plant.integrator_dt, self.control.integrator_dt
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.total_time / self.control.dt_sample).round() as usize
    }

    /// Reference closed-loop experiment configuration.
    pub fn paper_preset() -> CampaignConfig {
        CampaignConfig {
            plant: PlantConfig {
                kernel: KernelSpec::constant(0.06),
                feed: FeedSpec {
                    alpha: 0.5,
                    c_f: 1.0,
                    p_f: 1.0,
                    s_f: 0.1,
                },
                x0: MomentState([1.9, 2.0, 0.2, 0.2, 2.3, 0.02, 0.03, 0.3, 0.05]),
                // Half the generic module default: at this state scale the
                // RK4 error is ~1e-14 relative either way, and campaigns
                // integrate this system hundreds of millions of times.
                integrator_dt: 0.02,
            },
            noise: NoiseSpec {
                std: 0.1,
                output_noise_std: 0.0,
            },
            control: ControlConfig {
                target_drug: 0.2,
                target_mass: 1.2,
                variance_weight: 100.0,
                epsilon: 0.85,
                p1_star: 0.0,
                p2_star: 0.06,
                horizon: 3,
                dt_sample: 1.0,
                control_lo: 0.0,
                control_hi: 1.0,
                mode: ReformulationMode::PaperLiteral,
                cost_horizon: CostHorizon::SumStages,
                integrator_dt: 0.02,
                pce_nodes: 6,
                pce_scheme: TruncationScheme::Tensor { degree: 2 },
            },
            controller: ControllerKind::Smpc,
            runs: 100,
            total_time: 15.0,
            master_seed: 20240,
            out_dir: None,
        }
    }

    pub fn preset(name: &str) -> Result<CampaignConfig, ConfigError> {
        match name {
            "paper" => Ok(Self::paper_preset()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_path(path: &Path) -> Result<CampaignConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: CampaignConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }
}

/// Settings for the surrogate-versus-Monte-Carlo validation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub plant: PlantConfig,
    pub noise_std: f64,
    /// Fixed feed drug content over the whole window.
    pub s_f: f64,
    pub dt_sample: f64,
    pub steps: usize,
    pub pce_nodes: usize,
    pub pce_scheme: TruncationScheme,
    pub mc_samples: usize,
    pub seed: u64,
}

impl ValidationConfig {
    /// Reference validation setup: three quarter-period steps from the
    /// reference initial state with 10% feed noise and fixed `s_f = 0.1`.
    pub fn paper_preset() -> ValidationConfig {
        let campaign = CampaignConfig::paper_preset();
        ValidationConfig {
            plant: PlantConfig {
                // The quarter-period sampling window needs a step that
                // divides it.
                integrator_dt: 0.01,
                ..campaign.plant
            },
            noise_std: 0.1,
            s_f: 0.1,
            dt_sample: 0.25,
            steps: 3,
            pce_nodes: 6,
            pce_scheme: TruncationScheme::Tensor { degree: 2 },
            mc_samples: 10_000,
            seed: 818,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(ConfigError::Invalid("validation needs >= 1 step".into()));
        }
        if self.mc_samples < 2 {
            return Err(ConfigError::Invalid(
                "validation needs >= 2 Monte Carlo samples".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(ConfigError::Invalid("noise std must be >= 0".into()));
        }
        if !(self.dt_sample > 0.0) {
            return Err(ConfigError::Invalid("sampling period must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<ValidationConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: ValidationConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }
}
