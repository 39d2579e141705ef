//! Training stages: depth completion first, then the full self-supervised
//! pipeline.

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::decoder::{generate_labels, ssl_loss, DecoderError, EgoPath, SupervisionSample};
use crate::depth::{self, DepthError, DepthMap, ImageFrame};
use crate::fuse::{BnMode, TapeGrid};
use crate::geom::CameraModel;
use crate::model::{self, EncodeOutput, FrameInput, PipelineError};
use crate::nn::optim::Sgd;
use crate::nn::{CheckpointError, NnError, ParamSet, Tape, Tensor};
use crate::rng::child_rng;
use crate::sim::{Dataset, Frame, SimError};
use crate::temporal::{self, AttentionWindow, HistoryStep};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing dataset at {0}")]
    MissingDataset(String),
    #[error("dataset too short: {have} frames, need at least {need}")]
    DatasetTooShort { have: usize, need: usize },
    #[error("non-finite loss at step {step}: {value}")]
    NumericFailure { step: usize, value: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Loss trace and summary of one training stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl StageReport {
    fn from_losses(losses: Vec<f64>) -> Self {
        let first_loss = losses.first().copied().unwrap_or(0.0);
        let final_loss = losses.last().copied().unwrap_or(0.0);
        Self {
            losses,
            first_loss,
            final_loss,
        }
    }
}

/// Opens the sequence directory, surfacing a path-bearing error when absent.
pub fn open_dataset(dir: &Path) -> Result<Dataset, TrainError> {
    if !dir.is_dir() {
        return Err(TrainError::MissingDataset(dir.display().to_string()));
    }
    Ok(Dataset::open(dir)?)
}

/// Every frame with its rendered camera inputs, loaded up front.
pub struct PreparedFrames {
    pub frames: Vec<Frame>,
    pub images: Vec<Vec<(ImageFrame, CameraModel)>>,
}

pub fn prepare_frames(dataset: &Dataset) -> Result<PreparedFrames, TrainError> {
    let mut frames = Vec::with_capacity(dataset.n_frames);
    let mut images = Vec::with_capacity(dataset.n_frames);
    for i in 0..dataset.n_frames {
        let frame = dataset.load_frame(i)?;
        let state = dataset.world_state(&frame);
        images.push(frame.image_inputs(&dataset.config, &state));
        frames.push(frame);
    }
    Ok(PreparedFrames { frames, images })
}

impl PreparedFrames {
    pub fn ego_path(&self, anchor: usize) -> EgoPath {
        let entries = self
            .frames
            .iter()
            .map(|f| (f.time, f.ego_pose))
            .collect();
        EgoPath::new(self.frames[anchor].time, entries)
    }

    fn frame_input(&self, index: usize, with_images: bool) -> FrameInput {
        FrameInput {
            cloud: self.frames[index].cloud.clone(),
            ego_velocity: self.frames[index].ego_velocity,
            images: if with_images {
                self.images[index].clone()
            } else {
                Vec::new()
            },
        }
    }
}

/// Valid-aware pooling of a ground-truth depth map to the four scales,
/// coarse-to-fine order reversed to match refinement outputs. Depths beyond
/// `valid_max` count as missing.
fn gt_pyramid(gt: &DepthMap, valid_max: f64) -> [(Vec<f64>, Vec<f64>, usize, usize); 4] {
    let clipped: Vec<f64> = gt
        .data
        .iter()
        .map(|&d| if d > valid_max { 0.0 } else { d })
        .collect();
    let frame = ImageFrame::new(
        gt.width,
        gt.height,
        vec![0.0; gt.width * gt.height * 3],
        clipped,
    );
    let levels = depth::sparse_depth_pyramid(&frame);
    // Refinement emits coarse -> fine: strides 8, 4, 2, 1.
    let mut out: Vec<(Vec<f64>, Vec<f64>, usize, usize)> = levels
        .into_iter()
        .map(|l| (l.sparse.data, l.mask.data, l.h, l.w))
        .collect();
    out.reverse();
    let mut it = out.into_iter();
    [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ]
}

/// Stage 1: trains the camera encoder and depth refinement against simulator
/// ground truth with a multi-scale masked L1 loss. Returns the checkpoint
/// path and the per-step loss trace.
pub fn train_stage1(
    config: &RunConfig,
    prepared: &PreparedFrames,
    out_dir: &Path,
) -> Result<(PathBuf, StageReport, ParamSet), TrainError> {
    let mut params = model::init_params(config.seed);
    let mut opt = Sgd::new(config.train.depth_learning_rate, config.train.momentum);
    let mut rng = child_rng(config.seed, 0xD0);
    let mut losses = Vec::with_capacity(config.train.depth_steps);

    for step in 0..config.train.depth_steps {
        let frame_idx = rng.gen_range(0..prepared.frames.len());
        let cam_idx = rng.gen_range(0..prepared.images[frame_idx].len().max(1));
        let Some((image, cam)) = prepared.images[frame_idx].get(cam_idx) else {
            continue;
        };
        if image.valid_count() == 0 {
            continue;
        }
        let gt = &prepared.frames[frame_idx].gt_depths[cam_idx];
        let gt_levels = gt_pyramid(gt, config.train.depth_valid_max);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = depth::run_refinement(&mut tape, &bound, image, cam, &config.train.depth_iters)?;

        let mut total = None;
        for (level, (d_var, h, w)) in out.per_scale.iter().enumerate() {
            let weight = config.train.scale_loss_weights[level];
            if weight == 0.0 {
                continue;
            }
            let (gt_data, mask_data, gh, gw) = &gt_levels[level];
            debug_assert_eq!((h, w), (gh, gw));
            let n = h * w;
            let mask = tape.leaf_owned(Tensor::from_vec(&[n, 1], mask_data.clone()));
            let masked_pred = tape.mul(*d_var, mask)?;
            let masked_gt: Vec<f64> = gt_data
                .iter()
                .zip(mask_data)
                .map(|(&g, &m)| g * m)
                .collect();
            let l1 = tape.l1(masked_pred, &Tensor::from_vec(&[n, 1], masked_gt))?;
            let scaled = tape.scale(l1, weight);
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        let Some(total) = total else { continue };
        let loss_value = tape.value(total)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NumericFailure {
                step,
                value: loss_value,
            });
        }
        losses.push(loss_value);
        let grads = tape.backward(total);
        opt.step(&mut params, &bound, &grads);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| {
        TrainError::Sim(SimError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    let path = out_dir.join("depth.svwt");
    params.save(&path)?;
    Ok((path, StageReport::from_losses(losses), params))
}

/// History chain configuration derived from the run config.
pub fn history_offsets(config: &RunConfig) -> (usize, usize) {
    let stride_frames = (config.history_stride * config.sim.frame_rate).round() as usize;
    let n_hist = (config.history_horizon / config.history_stride).round() as usize;
    (n_hist, stride_frames.max(1))
}

/// Encodes the anchor frame plus its history chain and applies temporal
/// fusion at the second scale. Returns the final pyramid.
#[allow(clippy::too_many_arguments)]
pub fn encode_with_history(
    tape: &mut Tape,
    bound: &crate::nn::BoundParams,
    params: &ParamSet,
    config: &RunConfig,
    prepared: &PreparedFrames,
    anchor: usize,
    train_bn: bool,
    bn_stats_out: &mut Vec<(Option<(Vec<f64>, Vec<f64>)>, Option<(Vec<f64>, Vec<f64>)>)>,
) -> Result<[TapeGrid; 4], TrainError> {
    let geom = config.grid.geometry();
    let (n_hist, stride_frames) = history_offsets(config);
    let window = AttentionWindow {
        radius: [config.window_radius; 3],
    };

    let encode = |tape: &mut Tape, idx: usize| -> Result<EncodeOutput, TrainError> {
        let input = prepared.frame_input(idx, true);
        let bn = if train_bn {
            BnMode::Batch
        } else {
            BnMode::Frozen(params)
        };
        Ok(model::encode_frame(
            tape,
            bound,
            &input,
            geom,
            &config.train.ssl_depth_iters,
            bn,
        )?)
    };

    // History chain, oldest first.
    let mut history = Vec::with_capacity(n_hist);
    for j in (1..=n_hist).rev() {
        let idx = anchor - j * stride_frames;
        let out = encode(tape, idx)?;
        bn_stats_out.push((out.camera_stats.clone(), out.lidar_stats.clone()));
        let mut v2 = out.pyramid.into_iter().nth(1).expect("four levels");
        if config.train.detach_history {
            v2.feat = tape.detach(v2.feat);
        }
        let next_idx = anchor - (j - 1) * stride_frames;
        let pose_then = prepared.frames[idx].ego_pose;
        let pose_next = prepared.frames[next_idx].ego_pose;
        let ego_to_next = pose_next.inverse().compose(&pose_then);
        history.push(HistoryStep {
            v2,
            ego_to_next,
            dt: config.history_stride,
        });
    }

    let current = encode(tape, anchor)?;
    bn_stats_out.push((current.camera_stats.clone(), current.lidar_stats.clone()));
    let mut pyramid = current.pyramid;
    let fused_v2 = temporal::temporal_fuse_v2(
        tape,
        &pyramid[1],
        &history,
        window,
        bound.var("temporal.wq"),
        bound.var("temporal.wk"),
        bound.var("temporal.wv"),
    )?;
    pyramid[1] = fused_v2;
    Ok(pyramid)
}

/// Gathers ray supervision at every configured horizon around the anchor.
pub fn supervision_for_anchor(
    config: &RunConfig,
    prepared: &PreparedFrames,
    anchor: usize,
    rng: &mut crate::rng::DetRng,
) -> Vec<SupervisionSample> {
    let fps = config.sim.frame_rate;
    let mut samples = Vec::new();
    for (h, w) in config
        .train
        .supervision_horizons
        .iter()
        .zip(&config.train.horizon_weights)
    {
        let offset = (h * fps).round() as isize;
        let idx = anchor as isize + offset;
        if idx < 0 || idx as usize >= prepared.frames.len() {
            continue;
        }
        let frame = &prepared.frames[idx as usize];
        samples.extend(generate_labels(
            &frame.cloud,
            *h,
            frame.ego_velocity,
            config.train.rays_per_frame,
            config.train.free_samples_per_ray,
            config.grid.base_size,
            *w,
            rng,
        ));
    }
    samples
}

/// Stage 2: the full pipeline trained with ray self-supervision. Camera and
/// depth weights stay frozen at their stage-1 values; everything downstream
/// of the encoders learns.
pub fn train_stage2(
    config: &RunConfig,
    prepared: &PreparedFrames,
    stage1_checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<(PathBuf, StageReport, ParamSet), TrainError> {
    let mut params = model::init_params(config.seed);
    if let Some(ckpt) = stage1_checkpoint {
        params.load_from(ckpt)?;
    }
    // Stage 1 owns the camera and depth weights; here they are inputs.
    params.set_trainable("cam.", false);
    params.set_trainable("depth.", false);

    let (n_hist, stride_frames) = history_offsets(config);
    let fps = config.sim.frame_rate;
    let max_future = config
        .train
        .supervision_horizons
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let future_frames = (max_future * fps).round() as usize;
    let lo = n_hist * stride_frames;
    let hi = prepared.frames.len().saturating_sub(future_frames + 1);
    if lo > hi {
        return Err(TrainError::DatasetTooShort {
            have: prepared.frames.len(),
            need: lo + future_frames + 1,
        });
    }

    let mut opt = Sgd::new(config.train.learning_rate, config.train.momentum);
    let mut rng = child_rng(config.seed, 0xE0);
    let mut losses = Vec::with_capacity(config.train.ssl_steps);

    for step in 0..config.train.ssl_steps {
        let anchor = rng.gen_range(lo..=hi);
        let samples = supervision_for_anchor(config, prepared, anchor, &mut rng);
        if samples.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut bn_stats = Vec::new();
        let pyramid = encode_with_history(
            &mut tape,
            &bound,
            &params,
            config,
            prepared,
            anchor,
            true,
            &mut bn_stats,
        )?;
        let ego_path = prepared.ego_path(anchor);
        let loss = ssl_loss(
            &mut tape,
            &bound,
            &pyramid,
            &ego_path,
            &samples,
            config.train.lambda_vel,
            config.train.velocity_loss,
        )?;
        let loss_value = tape.value(loss.total)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NumericFailure {
                step,
                value: loss_value,
            });
        }
        losses.push(loss_value);
        let grads = tape.backward(loss.total);
        opt.step(&mut params, &bound, &grads);
        for (cam_stats, lid_stats) in &bn_stats {
            model::update_bn_buffers(&mut params, cam_stats, lid_stats);
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| {
        TrainError::Sim(SimError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    let path = out_dir.join("model.svwt");
    params.save(&path)?;
    Ok((path, StageReport::from_losses(losses), params))
}

/// Depth MAE of the current parameters on one frame, for reports and smoke
/// tests.
pub fn depth_mae_on_frame(
    params: &ParamSet,
    config: &RunConfig,
    prepared: &PreparedFrames,
    frame_idx: usize,
    cam_idx: usize,
) -> Result<(f64, f64), TrainError> {
    let (image, cam) = &prepared.images[frame_idx][cam_idx];
    let gt = &prepared.frames[frame_idx].gt_depths[cam_idx];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = depth::run_refinement(&mut tape, &bound, image, cam, &config.train.depth_iters)?;
    let pred = DepthMap {
        width: gt.width,
        height: gt.height,
        data: tape.value(out.depth).to_vec(),
    };
    let mask: Vec<bool> = gt
        .data
        .iter()
        .map(|&d| d > 0.0 && d <= config.train.depth_valid_max)
        .collect();
    Ok(depth::depth_metrics(&pred, gt, &mask)?)
}

/// Deterministic anchor choices for evaluation runs.
pub fn eval_anchors(config: &RunConfig, n_frames: usize, in_horizon: f64, out_horizon: f64) -> Vec<usize> {
    let fps = config.sim.frame_rate;
    let stride_frames = (config.history_stride * fps).round() as usize;
    let n_hist = (in_horizon / config.history_stride).round() as usize;
    let lo = n_hist * stride_frames.max(1);
    let hi = n_frames.saturating_sub((out_horizon * fps).round() as usize + 1);
    if lo > hi {
        return Vec::new();
    }
    let count = config.forecast.eval_frames.max(1);
    (0..count)
        .map(|i| {
            if count == 1 {
                lo
            } else {
                lo + i * (hi - lo) / (count - 1)
            }
        })
        .collect()
}
