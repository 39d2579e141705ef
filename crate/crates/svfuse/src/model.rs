//! Model definition: every trainable network's parameters, and the
//! frame-to-pyramid encoding pipeline that ties the modules together.

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::decoder::{QUERY_DIM, VSTAR_DIM};
use crate::depth::{self, DepthError, ImageFrame, ENC_CHANNELS, HIDDEN};
use crate::fuse::{self, BnMode, FuseError, TapeGrid, FEAT, FUSED_FEAT};
use crate::geom::{CameraModel, Vec3};
use crate::grid::GridGeometry;
use crate::nn::layers::{init_mgu, Activation, Mlp};
use crate::nn::{BoundParams, NnError, ParamSet, Tape, Tensor};
use crate::rng::seeded_rng;

/// Width of the projected camera calibration embedding.
pub const EMBED_DIM: usize = 4;
/// Running-statistic momentum for the fusion batch norm.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Builds the full parameter set with deterministic initialization.
pub fn init_params(seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();

    // Camera embedding and stand-in encoder pyramid.
    p.insert("cam.embed.w", Tensor::kaiming(16, EMBED_DIM, &mut rng));
    p.insert("cam.embed.b", Tensor::zeros(&[1, EMBED_DIM]));
    let enc_in = 4 + EMBED_DIM;
    p.insert("cam.enc1.w", Tensor::kaiming(9 * enc_in, ENC_CHANNELS, &mut rng));
    p.insert("cam.enc1.b", Tensor::zeros(&[1, ENC_CHANNELS]));
    for l in 2..=4 {
        p.insert(
            &format!("cam.enc{l}.w"),
            Tensor::kaiming(9 * ENC_CHANNELS, ENC_CHANNELS, &mut rng),
        );
        p.insert(&format!("cam.enc{l}.b"), Tensor::zeros(&[1, ENC_CHANNELS]));
    }

    // Depth refinement: backbone, MGU update block, heads.
    p.insert("depth.bh.w", Tensor::kaiming(9 * ENC_CHANNELS, HIDDEN, &mut rng));
    p.insert("depth.bh.b", Tensor::zeros(&[1, HIDDEN]));
    p.insert("depth.bc.w", Tensor::kaiming(ENC_CHANNELS, 1, &mut rng));
    p.insert("depth.bc.b", Tensor::zeros(&[1, 1]));
    init_mgu(&mut p, "depth.mgu", ENC_CHANNELS + 3, HIDDEN, &mut rng);
    p.insert("depth.grad.w", Tensor::randn(&[HIDDEN, 2], 0.05, &mut rng));
    p.insert("depth.grad.b", Tensor::zeros(&[1, 2]));
    p.insert("depth.conf.w", Tensor::randn(&[HIDDEN, 1], 0.05, &mut rng));
    p.insert("depth.conf.b", Tensor::zeros(&[1, 1]));
    p.insert("depth.upd1.w", Tensor::kaiming(9 * 5, ENC_CHANNELS, &mut rng));
    p.insert("depth.upd1.b", Tensor::zeros(&[1, ENC_CHANNELS]));
    p.insert(
        "depth.upd2.w",
        Tensor::kaiming(9 * ENC_CHANNELS, ENC_CHANNELS, &mut rng),
    );
    p.insert("depth.upd2.b", Tensor::zeros(&[1, ENC_CHANNELS]));
    // Small head so the first correction steps stay gentle.
    p.insert("depth.head.w", Tensor::randn(&[ENC_CHANNELS, 1], 0.02, &mut rng));
    p.insert("depth.head.b", Tensor::zeros(&[1, 1]));

    // Voxel-wise PointNet stand-in.
    p.insert("lidar.p1.w", Tensor::kaiming(5, 32, &mut rng));
    p.insert("lidar.p1.b", Tensor::zeros(&[1, 32]));
    p.insert("lidar.p2.w", Tensor::kaiming(32, FEAT, &mut rng));
    p.insert("lidar.p2.b", Tensor::zeros(&[1, FEAT]));

    // Fusion convolution and frozen normalization buffers.
    p.insert(
        "fuse.conv.w",
        Tensor::kaiming(27 * FUSED_FEAT, FUSED_FEAT, &mut rng),
    );
    p.insert("fuse.conv.b", Tensor::zeros(&[1, FUSED_FEAT]));
    for half in ["cam", "lid"] {
        p.insert_buffer(&format!("fuse.bn.{half}_mean"), Tensor::zeros(&[1, FEAT]));
        p.insert_buffer(
            &format!("fuse.bn.{half}_var"),
            Tensor::from_vec(&[1, FEAT], vec![1.0; FEAT]),
        );
    }

    // Late sparse encoding pyramid.
    for level in 1..=4usize {
        let cin = if level == 1 { FUSED_FEAT } else { FEAT };
        p.insert(
            &format!("late.l{level}.comp.w"),
            Tensor::kaiming(27 * cin, FEAT, &mut rng),
        );
        p.insert(&format!("late.l{level}.comp.b"), Tensor::zeros(&[1, FEAT]));
        p.insert(
            &format!("late.l{level}.agg.w"),
            Tensor::kaiming(27 * FEAT, FEAT, &mut rng),
        );
        p.insert(&format!("late.l{level}.agg.b"), Tensor::zeros(&[1, FEAT]));
    }

    // Temporal attention projections (single head, bias-free).
    let attn_std = (1.0 / FEAT as f64).sqrt();
    p.insert("temporal.wq", Tensor::randn(&[FEAT, FEAT], attn_std, &mut rng));
    p.insert("temporal.wk", Tensor::randn(&[FEAT, FEAT], attn_std, &mut rng));
    p.insert("temporal.wv", Tensor::randn(&[FEAT, FEAT], attn_std, &mut rng));

    // Decoder heads. The pose head's output layer starts near zero so the
    // second sampling begins at the rigid position.
    Mlp::init(
        &mut p,
        "dec.pose",
        &[VSTAR_DIM + QUERY_DIM, 64, 64, 3],
        Activation::Relu,
        &mut rng,
    );
    *p.get_mut("dec.pose.l2.w") = Tensor::randn(&[64, 3], 0.01, &mut rng);
    Mlp::init(
        &mut p,
        "dec.occ",
        &[2 * VSTAR_DIM + QUERY_DIM, 64, 64, 1],
        Activation::Relu,
        &mut rng,
    );
    Mlp::init(
        &mut p,
        "dec.vel",
        &[2 * VSTAR_DIM + QUERY_DIM, 64, 64, 3],
        Activation::Relu,
        &mut rng,
    );
    p
}

/// One frame's sensor inputs for the encoding pipeline.
pub struct FrameInput {
    pub cloud: PointCloud,
    /// Ego velocity expressed in this frame's ego axes.
    pub ego_velocity: Vec3,
    pub images: Vec<(ImageFrame, CameraModel)>,
}

pub struct EncodeOutput {
    pub pyramid: [TapeGrid; 4],
    /// Raw per-channel statistics of the encoder outputs when batch
    /// normalization ran in batch mode, for running-average updates.
    pub camera_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub lidar_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub fused_cells: usize,
}

/// Union-merges camera grids lifted from several cameras, weighting each
/// cell's contribution by its pixel count.
fn merge_lifted(
    tape: &mut Tape,
    grids: Vec<TapeGrid>,
    geom: GridGeometry,
) -> Result<TapeGrid, PipelineError> {
    let mut grids: Vec<TapeGrid> = grids
        .into_iter()
        .filter(|g| !g.structure.is_empty())
        .collect();
    if grids.len() <= 1 {
        return Ok(grids.pop().unwrap_or_else(|| TapeGrid {
            structure: crate::grid::SparseVoxelGrid::empty(geom, 1, 0),
            feat: tape.leaf_owned(Tensor::zeros(&[0, FEAT])),
        }));
    }
    let mut union: std::collections::BTreeMap<[i32; 3], Vec<(usize, usize)>> = Default::default();
    for (gi, g) in grids.iter().enumerate() {
        for (row, &ijk) in g.structure.coords().iter().enumerate() {
            union.entry(ijk).or_default().push((gi, row));
        }
    }
    let mut cells = std::collections::BTreeMap::new();
    let mut weight_cols: Vec<Vec<f64>> = vec![vec![0.0; union.len()]; grids.len()];
    let mut gathers: Vec<Vec<usize>> = vec![vec![crate::nn::GATHER_PAD; union.len()]; grids.len()];
    for (u, (&ijk, members)) in union.iter().enumerate() {
        let total: u32 = members
            .iter()
            .map(|&(gi, row)| grids[gi].structure.counts[row])
            .sum();
        for &(gi, row) in members {
            gathers[gi][u] = row;
            weight_cols[gi][u] = grids[gi].structure.counts[row] as f64 / total.max(1) as f64;
        }
        cells.insert(ijk, (Vec::new(), [0.0; 3], total));
    }
    let structure = crate::grid::SparseVoxelGrid::from_cells(geom, 1, 0, cells);
    let ones = tape.leaf_owned(Tensor::from_vec(&[1, FEAT], vec![1.0; FEAT]));
    let mut acc = None;
    for (gi, g) in grids.iter().enumerate() {
        let picked = tape.gather_rows(g.feat, &gathers[gi])?;
        let w = tape.leaf_owned(Tensor::from_vec(&[union.len(), 1], weight_cols[gi].clone()));
        let w_wide = tape.matmul(w, ones)?;
        let contrib = tape.mul(w_wide, picked)?;
        acc = Some(match acc {
            None => contrib,
            Some(a) => tape.add(a, contrib)?,
        });
    }
    Ok(TapeGrid {
        structure,
        feat: acc.expect("at least two grids"),
    })
}

/// Full single-frame encoding: depth refinement per camera, feature lifting,
/// LiDAR encoding, fusion, and the late sparse pyramid. Temporal fusion
/// happens outside, where history frames are available.
pub fn encode_frame(
    tape: &mut Tape,
    bound: &BoundParams,
    frame: &FrameInput,
    geom: GridGeometry,
    depth_iters: &[usize; 4],
    bn: BnMode,
) -> Result<EncodeOutput, PipelineError> {
    let lidar = fuse::encode_lidar(tape, bound, &frame.cloud, frame.ego_velocity, geom)?;

    let mut lifted = Vec::with_capacity(frame.images.len());
    for (image, cam) in &frame.images {
        if image.valid_count() == 0 {
            continue;
        }
        let refined = depth::run_refinement(tape, bound, image, cam, depth_iters)?;
        let feats = depth::encode_image(tape, bound, image, cam)?;
        let depth_values = tape.value(refined.depth).to_vec();
        let lift = fuse::lift_camera_features(tape, feats.levels[1], &depth_values, cam, geom)?;
        lifted.push(lift);
    }
    let camera = merge_lifted(tape, lifted, geom)?;

    let fused = fuse::fuse(tape, bound, &camera, &lidar, bn)?;
    let fused_cells = fused.grid.structure.len();
    let camera_stats = fused.camera_stats.clone();
    let lidar_stats = fused.lidar_stats.clone();
    let pyramid = fuse::late_encode(tape, bound, &fused)?;
    Ok(EncodeOutput {
        pyramid,
        camera_stats,
        lidar_stats,
        fused_cells,
    })
}

/// Folds fresh batch statistics into the frozen normalization buffers.
pub fn update_bn_buffers(
    params: &mut ParamSet,
    camera_stats: &Option<(Vec<f64>, Vec<f64>)>,
    lidar_stats: &Option<(Vec<f64>, Vec<f64>)>,
) {
    let mut fold = |prefix: &str, stats: &Option<(Vec<f64>, Vec<f64>)>| {
        if let Some((mean, var)) = stats {
            let m = params.get_mut(&format!("fuse.bn.{prefix}_mean"));
            for (dst, &src) in m.data.iter_mut().zip(mean) {
                *dst = BN_MOMENTUM * *dst + (1.0 - BN_MOMENTUM) * src;
            }
            let v = params.get_mut(&format!("fuse.bn.{prefix}_var"));
            for (dst, &src) in v.data.iter_mut().zip(var) {
                *dst = BN_MOMENTUM * *dst + (1.0 - BN_MOMENTUM) * src;
            }
        }
    };
    fold("cam", camera_stats);
    fold("lid", lidar_stats);
}
