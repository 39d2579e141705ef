//! LiDAR forecasting benchmark and evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamfer::{chamfer_distance, ChamferError, CD_DEFINITION};
use crate::config::RunConfig;
use crate::decoder::forecast_cloud;
use crate::fuse::TapeGrid;
use crate::geom::{vec3_norm, vec3_sub, Vec3};
use crate::grid::SparseVoxelGrid;
use crate::nn::{ParamSet, Tape};
use crate::sim::ray_directions;
use crate::train::{self, PreparedFrames, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("horizon {horizon}s unavailable: dataset spans {span:.1}s")]
    HorizonUnavailable { horizon: f64, span: f64 },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Chamfer(#[from] ChamferError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Crate version tag carried in every report.
pub fn version_string() -> String {
    format!("svfuse-{}", env!("CARGO_PKG_VERSION"))
}

/// Deterministic benchmark result; wall-clock timing is written separately
/// so reports are byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastReport {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// The Chamfer definition every number in this report uses.
    pub cd_definition: String,
    /// cd_<in>in_<out>out -> m^2.
    pub metrics: BTreeMap<String, f64>,
    /// Static-world (ego-compensated last cloud) reference per pair.
    pub baseline: BTreeMap<String, f64>,
    /// Mean forecast point counts per pair.
    pub point_counts: BTreeMap<String, f64>,
}

fn pair_key(in_h: f64, out_h: f64) -> String {
    format!("cd_{}in_{}out", in_h as i64, out_h as i64)
}

/// Encodes an anchor frame (with history) and freezes the pyramid for
/// evaluation-time decoding.
pub fn frozen_pyramid(
    params: &ParamSet,
    config: &RunConfig,
    prepared: &PreparedFrames,
    anchor: usize,
) -> Result<[SparseVoxelGrid; 4], TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut bn_stats = Vec::new();
    let pyramid = train::encode_with_history(
        &mut tape, &bound, params, config, prepared, anchor, false, &mut bn_stats,
    )?;
    Ok(freeze_pyramid(&tape, &pyramid))
}

pub fn freeze_pyramid(tape: &Tape, pyramid: &[TapeGrid; 4]) -> [SparseVoxelGrid; 4] {
    std::array::from_fn(|i| pyramid[i].freeze(tape))
}

/// Evaluation region: within the sensor range cap and inside the ego-relative
/// grid ROI. Applied identically to predictions, ground truth, and the
/// baseline so every cloud is judged on the same support.
fn clip_to_roi(
    points: &[Vec3],
    origin: Vec3,
    max_range: f64,
    extent: &crate::grid::Aabb,
) -> Vec<Vec3> {
    points
        .iter()
        .copied()
        .filter(|&p| vec3_norm(vec3_sub(p, origin)) <= max_range && extent.contains(p))
        .collect()
}

/// Runs the forecasting protocol: for each (input, output) horizon pair,
/// encode the history, ray-march the decoder at the future time, and compare
/// against the ground-truth future cloud; the static-world baseline
/// ego-compensates the anchor cloud to the future frame.
///
/// With `dump_dir` set, the predicted and ground-truth clouds of every
/// anchor are exported as ASCII PLY for inspection.
pub fn run_forecast_benchmark(
    config: &RunConfig,
    params: &ParamSet,
    prepared: &PreparedFrames,
    dump_dir: Option<&Path>,
) -> Result<(ForecastReport, f64), BenchError> {
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    let start = Instant::now();
    let fps = config.sim.frame_rate;
    let span = (prepared.frames.len() - 1) as f64 / fps;
    let lidar = &config.sim.lidar;
    let rays = ray_directions(lidar);
    let step = config.grid.base_size * config.forecast.step_fraction;
    let max_range = config.forecast.max_range.min(lidar.max_range);

    let mut metrics = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    let mut point_counts = BTreeMap::new();

    for &in_h in &config.forecast.input_horizons {
        for &out_h in &config.forecast.output_horizons {
            if in_h + out_h >= span {
                return Err(BenchError::HorizonUnavailable {
                    horizon: in_h + out_h,
                    span,
                });
            }
            let mut run_config = config.clone();
            run_config.history_horizon = in_h;
            let anchors = train::eval_anchors(config, prepared.frames.len(), in_h, out_h);
            if anchors.is_empty() {
                return Err(BenchError::HorizonUnavailable {
                    horizon: in_h + out_h,
                    span,
                });
            }

            let mut cd_model = 0.0;
            let mut cd_static = 0.0;
            let mut points = 0.0;
            for &anchor in &anchors {
                let pyramid = frozen_pyramid(params, &run_config, prepared, anchor)?;
                let ego_path = prepared.ego_path(anchor);
                let future_idx = anchor + (out_h * fps).round() as usize;
                let future = &prepared.frames[future_idx];

                let pred = forecast_cloud(
                    params,
                    &pyramid,
                    &ego_path,
                    lidar.mount,
                    &rays,
                    out_h,
                    config.forecast.threshold,
                    step,
                    max_range,
                );
                let extent = config.grid.geometry().extent;
                let gt_points: Vec<Vec3> = future.cloud.points.iter().map(|p| p.position).collect();
                let gt_points = clip_to_roi(&gt_points, lidar.mount, max_range, &extent);
                let pred_points: Vec<Vec3> = pred.points.iter().map(|p| p.position).collect();
                let pred_points = clip_to_roi(&pred_points, lidar.mount, max_range, &extent);
                points += pred_points.len() as f64;
                cd_model += chamfer_distance(&pred_points, &gt_points)?;

                if let Some(dir) = dump_dir {
                    let tag = format!("{}in_{}out_a{anchor}", in_h as i64, out_h as i64);
                    let io_err = |e: crate::cloud::CloudError| BenchError::Io {
                        path: dir.display().to_string(),
                        source: std::io::Error::other(e.to_string()),
                    };
                    pred.export_ply(&dir.join(format!("pred_{tag}.ply")))
                        .map_err(io_err)?;
                    future
                        .cloud
                        .export_ply(&dir.join(format!("gt_{tag}.ply")))
                        .map_err(io_err)?;
                }

                // Static-world baseline: anchor cloud moved rigidly into the
                // future ego frame.
                let t_fut = prepared.frames[future_idx].time;
                let t_cur = prepared.frames[anchor].time;
                let into_future = ego_path
                    .pose_at(t_fut)
                    .inverse()
                    .compose(&ego_path.pose_at(t_cur));
                let moved: Vec<Vec3> = prepared.frames[anchor]
                    .cloud
                    .points
                    .iter()
                    .map(|p| into_future.apply(p.position))
                    .collect();
                let moved = clip_to_roi(&moved, lidar.mount, max_range, &extent);
                cd_static += chamfer_distance(&moved, &gt_points)?;
            }
            let n = anchors.len() as f64;
            metrics.insert(pair_key(in_h, out_h), cd_model / n);
            baseline.insert(pair_key(in_h, out_h), cd_static / n);
            point_counts.insert(pair_key(in_h, out_h), points / n);
        }
    }

    let report = ForecastReport {
        config_hash: config.hash(),
        seed: config.seed,
        version: version_string(),
        cd_definition: CD_DEFINITION.to_string(),
        metrics,
        baseline,
        point_counts,
    };
    Ok((report, start.elapsed().as_secs_f64()))
}

/// Depth evaluation over deterministic anchors: masked MAE/MSE plus simple
/// footprint numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub depth_mae: f64,
    pub depth_mse: f64,
    pub frames_evaluated: usize,
    pub parameter_count: usize,
}

pub fn run_depth_eval(
    config: &RunConfig,
    params: &ParamSet,
    prepared: &PreparedFrames,
) -> Result<(DepthEvalReport, f64), BenchError> {
    let start = Instant::now();
    let anchors = train::eval_anchors(config, prepared.frames.len(), 0.0, 0.0);
    let mut mae = 0.0;
    let mut mse = 0.0;
    let mut count = 0usize;
    for &anchor in &anchors {
        for cam_idx in 0..prepared.images[anchor].len() {
            let (m1, m2) = train::depth_mae_on_frame(params, config, prepared, anchor, cam_idx)?;
            mae += m1;
            mse += m2;
            count += 1;
        }
    }
    let report = DepthEvalReport {
        config_hash: config.hash(),
        seed: config.seed,
        version: version_string(),
        depth_mae: mae / count.max(1) as f64,
        depth_mse: mse / count.max(1) as f64,
        frames_evaluated: count,
        parameter_count: params.num_values(),
    };
    Ok((report, start.elapsed().as_secs_f64()))
}

/// Writes the deterministic report plus a timing sidecar. The report bytes
/// depend only on the config and seed; wall-clock goes to `timing.json`.
pub fn write_report<T: Serialize>(
    out_dir: &Path,
    name: &str,
    report: &T,
    runtime_s: f64,
) -> Result<(), BenchError> {
    let io = |path: &Path, e| BenchError::Io {
        path: path.display().to_string(),
        source: e,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let report_path = out_dir.join(name);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&report_path, json).map_err(|e| io(&report_path, e))?;
    let timing_path = out_dir.join("timing.json");
    let timing = serde_json::json!({ "runtime_s": runtime_s });
    std::fs::write(&timing_path, timing.to_string()).map_err(|e| io(&timing_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_roundtrips_through_json() {
        let mut metrics = BTreeMap::new();
        metrics.insert("cd_1in_1out".to_string(), 3.25);
        let report = ForecastReport {
            config_hash: "abcd".into(),
            seed: 7,
            version: version_string(),
            cd_definition: CD_DEFINITION.into(),
            metrics: metrics.clone(),
            baseline: metrics.clone(),
            point_counts: metrics,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: ForecastReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.metrics["cd_1in_1out"], 3.25);
        assert_eq!(back.cd_definition, CD_DEFINITION);
    }

    #[test]
    fn pair_keys_are_stable() {
        assert_eq!(pair_key(1.0, 3.0), "cd_1in_3out");
        assert_eq!(pair_key(0.0, 1.0), "cd_0in_1out");
    }
}
