//! Run configuration: one JSON document drives simulation, training, and
//! evaluation, with explicit defaults and a content hash for reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Aabb, GridGeometry};
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub const ALLOWED_HISTORY_HORIZONS: [f64; 3] = [0.0, 1.0, 3.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub base_size: f64,
    pub origin: [f64; 3],
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            base_size: 0.5,
            origin: [0.0; 3],
            extent_min: [-12.0, -16.0, -0.5],
            extent_max: [352.0, 16.0, 6.0],
        }
    }
}

impl GridParams {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            base_size: self.base_size,
            origin: self.origin,
            extent: Aabb::new(self.extent_min, self.extent_max),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    /// Stage-1 (depth) learning rate.
    pub depth_learning_rate: f64,
    /// Stage-2 (self-supervision) learning rate.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Stage-1 (depth) optimization steps.
    pub depth_steps: usize,
    /// Stage-2 (self-supervision) optimization steps.
    pub ssl_steps: usize,
    /// Refinement iterations per scale, coarse to fine, during stage 1.
    pub depth_iters: [usize; 4],
    /// Cheaper refinement schedule while the full pipeline trains.
    pub ssl_depth_iters: [usize; 4],
    /// Per-scale depth loss weights, coarse to fine.
    pub scale_loss_weights: [f64; 4],
    /// Ground-truth depths beyond this range are excluded from losses and
    /// metrics (grazing ground pixels reach kilometers).
    pub depth_valid_max: f64,
    /// Supervision rays sampled per frame and horizon.
    pub rays_per_frame: usize,
    pub free_samples_per_ray: usize,
    /// Relative supervision times, seconds.
    pub supervision_horizons: Vec<f64>,
    pub horizon_weights: Vec<f64>,
    pub lambda_vel: f64,
    pub velocity_loss: bool,
    /// Stop gradients at history-frame encodings.
    pub detach_history: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            depth_learning_rate: 5e-4,
            learning_rate: 2e-3,
            momentum: 0.9,
            depth_steps: 250,
            ssl_steps: 600,
            depth_iters: [4, 4, 4, 4],
            ssl_depth_iters: [1, 1, 1, 1],
            scale_loss_weights: [0.1, 0.1, 0.2, 0.6],
            depth_valid_max: 350.0,
            rays_per_frame: 96,
            free_samples_per_ray: 2,
            supervision_horizons: vec![-1.0, 0.0, 1.0, 3.0],
            horizon_weights: vec![0.5, 1.0, 1.0, 0.5],
            lambda_vel: 0.2,
            velocity_loss: true,
            detach_history: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastParams {
    /// Occupancy threshold for ray-marching.
    pub threshold: f64,
    /// March step as a fraction of the base voxel size.
    pub step_fraction: f64,
    /// Input history horizons to evaluate, seconds.
    pub input_horizons: Vec<f64>,
    /// Future horizons to evaluate, seconds.
    pub output_horizons: Vec<f64>,
    /// Number of anchor frames averaged per pair.
    pub eval_frames: usize,
    pub max_range: f64,
}

impl Default for ForecastParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            step_fraction: 0.5,
            input_horizons: vec![1.0],
            output_horizons: vec![1.0],
            eval_frames: 3,
            max_range: 100.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub grid: GridParams,
    /// Frames per generated sequence.
    pub n_frames: usize,
    /// History horizon fed to temporal fusion, seconds; one of {0, 1, 3}.
    pub history_horizon: f64,
    /// Spacing between chained history frames, seconds.
    pub history_stride: f64,
    /// Attention window half-extent in cells.
    pub window_radius: i32,
    pub train: TrainParams,
    pub forecast: ForecastParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            grid: GridParams::default(),
            n_frames: 52,
            history_horizon: 1.0,
            history_stride: 1.0,
            window_radius: 1,
            train: TrainParams::default(),
            forecast: ForecastParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !ALLOWED_HISTORY_HORIZONS
            .iter()
            .any(|&h| (h - self.history_horizon).abs() < 1e-9)
        {
            return Err(ConfigError::Invalid(format!(
                "history_horizon {} not in {ALLOWED_HISTORY_HORIZONS:?}",
                self.history_horizon
            )));
        }
        if self.grid.base_size <= 0.0 {
            return Err(ConfigError::Invalid("base_size must be positive".into()));
        }
        if self.window_radius < 0 {
            return Err(ConfigError::Invalid("window_radius must be >= 0".into()));
        }
        if self.n_frames == 0 {
            return Err(ConfigError::Invalid("n_frames must be >= 1".into()));
        }
        if self.train.supervision_horizons.len() != self.train.horizon_weights.len() {
            return Err(ConfigError::Invalid(
                "supervision_horizons and horizon_weights lengths differ".into(),
            ));
        }
        if self.sim.frame_rate <= 0.0 {
            return Err(ConfigError::Invalid("frame_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash over the canonical serialization.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.hash());
        assert_eq!(config.hash().len(), 16);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let config: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.n_frames, RunConfig::default().n_frames);
        assert_ne!(config.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_horizon_rejected() {
        let config = RunConfig {
            history_horizon: 2.0,
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }
}
