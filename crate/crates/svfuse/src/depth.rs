//! Multi-scale recurrent depth completion.
//!
//! Sparse projected LiDAR plus image features are refined into dense depth by
//! an MGU-gated update block, coarse to fine over four scales. The update
//! combines the discrepancy between the actual and predicted depth gradient,
//! the sparse-depth residual, and two confidence maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geom::{project_to_image, CameraModel};
use crate::nn::layers::mgu_from;
use crate::nn::{BoundParams, NnError, Tape, Tensor, Var};

pub const SVDP_MAGIC: &[u8; 4] = b"SVDP";

/// Depth clamp range, meters; generous enough for a 400 m sensor.
pub const DEPTH_MIN: f64 = 0.1;
pub const DEPTH_MAX: f64 = 500.0;

pub const ENC_CHANNELS: usize = 16;
pub const HIDDEN: usize = 16;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("no sparse depth: refinement needs at least one valid sample")]
    NoSparseDepth,
    #[error("empty mask in depth metrics")]
    EmptyMask,
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an SVDP raster")]
    BadMagic { path: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Dense raster of meters, row-major; 0 marks missing/invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Binary raster: magic "SVDP", u32 H, u32 W, then H*W little-endian f32
    /// meters, row-major.
    pub fn save(&self, path: &Path) -> Result<(), DepthError> {
        let io = |e| DepthError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(SVDP_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.height as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.width as u32).map_err(io)?;
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, DepthError> {
        let io = |e| DepthError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SVDP_MAGIC {
            return Err(DepthError::BadMagic {
                path: path.display().to_string(),
            });
        }
        let height = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let width = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut data = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            data.push(r.read_f32::<LittleEndian>().map_err(io)? as f64);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Camera-branch input: RGB plus the projected sparse depth and its mask.
#[derive(Debug, Clone)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    /// h*w*3 values in [0, 1], pixel-major.
    pub rgb: Vec<f64>,
    /// h*w meters, 0 = missing.
    pub sparse_depth: Vec<f64>,
    /// True exactly where sparse_depth > 0.
    pub mask: Vec<bool>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, rgb: Vec<f64>, sparse_depth: Vec<f64>) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        assert_eq!(sparse_depth.len(), width * height);
        let mask = sparse_depth.iter().map(|&d| d > 0.0).collect();
        Self {
            width,
            height,
            rgb,
            sparse_depth,
            mask,
        }
    }

    /// Projects a cloud into the camera, keeping the nearest return per pixel.
    pub fn project_sparse_depth(cloud: &PointCloud, cam: &CameraModel) -> Vec<f64> {
        let mut sd = vec![0.0; cam.width * cam.height];
        for p in &cloud.points {
            let Some(hit) = project_to_image(p.position, cam) else {
                continue;
            };
            let (c, r) = (hit.u as usize, hit.v as usize);
            let idx = r * cam.width + c;
            if sd[idx] == 0.0 || hit.depth < sd[idx] {
                sd[idx] = hit.depth;
            }
        }
        sd
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-scale feature map handle on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Four feature maps at strides 1, 2, 4, 8.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMaps {
    pub levels: [FeatMap; 4],
}

/// Stand-in multi-scale encoder: a camera embedding (projected flattened
/// calibration) is concatenated to every RGBD pixel before the first layer,
/// then stride-halving conv stages produce the pyramid.
pub fn encode_image(
    tape: &mut Tape,
    bound: &BoundParams,
    frame: &ImageFrame,
    cam: &CameraModel,
) -> Result<FeatureMaps, DepthError> {
    let (h, w) = (frame.height, frame.width);
    let n = h * w;
    let mut rgbd = Vec::with_capacity(n * 4);
    for p in 0..n {
        rgbd.extend_from_slice(&frame.rgb[p * 3..p * 3 + 3]);
        rgbd.push(frame.sparse_depth[p] / 100.0);
    }
    let rgbd = tape.leaf_owned(Tensor::from_vec(&[n, 4], rgbd));

    // Pixel-unit intrinsics are two orders larger than rotation entries;
    // scale them down so the embedding projection sees comparable inputs.
    let mut calib = cam.calibration_vector();
    for v in calib.iter_mut().take(4) {
        *v *= 0.01;
    }
    let calib = tape.leaf_owned(Tensor::row(&calib));
    let embed = tape.matmul(calib, bound.var("cam.embed.w"))?;
    let embed = tape.add_bcast_row(embed, bound.var("cam.embed.b"))?;
    let embed = tape.tanh(embed);
    let embed_full = tape.broadcast(embed, n)?;
    let x0 = tape.concat_cols(&[rgbd, embed_full])?;

    let mut levels = Vec::with_capacity(4);
    let mut cur = x0;
    let (mut ch, mut cw) = (h, w);
    for l in 1..=4usize {
        if l > 1 {
            cur = tape.avg_pool2(cur, ch, cw)?;
            ch /= 2;
            cw /= 2;
        }
        let wv = bound.var(&format!("cam.enc{l}.w"));
        let bv = bound.var(&format!("cam.enc{l}.b"));
        cur = tape.conv2d(cur, wv, bv, ch, cw)?;
        cur = tape.relu(cur);
        levels.push(FeatMap {
            var: cur,
            h: ch,
            w: cw,
        });
    }
    Ok(FeatureMaps {
        levels: [levels[0], levels[1], levels[2], levels[3]],
    })
}

/// Nearest-valid-neighbor fill of the sparse depth (exact Euclidean nearest,
/// adequate at desk scale).
pub fn init_depth(frame: &ImageFrame) -> Result<DepthMap, DepthError> {
    let seeds: Vec<(usize, usize, f64)> = (0..frame.height)
        .flat_map(|r| (0..frame.width).map(move |c| (r, c)))
        .filter(|&(r, c)| frame.mask[r * frame.width + c])
        .map(|(r, c)| (r, c, frame.sparse_depth[r * frame.width + c]))
        .collect();
    if seeds.is_empty() {
        return Err(DepthError::NoSparseDepth);
    }
    let mut out = DepthMap::zeros(frame.width, frame.height);
    for r in 0..frame.height {
        for c in 0..frame.width {
            let mut best = f64::INFINITY;
            let mut depth = seeds[0].2;
            for &(sr, sc, sd) in &seeds {
                let dr = sr as f64 - r as f64;
                let dc = sc as f64 - c as f64;
                let d2 = dr * dr + dc * dc;
                if d2 < best {
                    best = d2;
                    depth = sd;
                }
            }
            out.set(r, c, depth);
        }
    }
    Ok(out)
}

/// Recurrent state threaded through refinement at one scale.
#[derive(Debug, Clone, Copy)]
pub struct DepthState {
    /// Current depth estimate, [n, 1] meters.
    pub depth: Var,
    /// MGU hidden state, [n, HIDDEN].
    pub hidden: Var,
    /// Input confidence from the backbone, [n, 1] in (0, 1).
    pub conf_input: Var,
    /// Gradient confidence from the last update, [n, 1] in (0, 1).
    pub conf_grad: Var,
}

/// Forward differences with replicate boundary; output [n, 2] = (d/dx, d/dy).
fn forward_diff(tape: &mut Tape, d: Var, h: usize, w: usize) -> Result<Var, NnError> {
    let mut right = Vec::with_capacity(h * w);
    let mut down = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            right.push(r * w + (c + 1).min(w - 1));
            down.push(((r + 1).min(h - 1)) * w + c);
        }
    }
    let shift_r = tape.gather_rows(d, &right)?;
    let shift_d = tape.gather_rows(d, &down)?;
    let dx = tape.sub(shift_r, d)?;
    let dy = tape.sub(shift_d, d)?;
    tape.concat_cols(&[dx, dy])
}

/// Per-scale constants derived from the image frame.
pub struct ScaleInputs {
    /// [n, 1] sparse depth, zeros where missing.
    pub sparse: Tensor,
    /// [n, 1] validity as 0/1.
    pub mask: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Valid-aware 2x2 reduction pyramid of the sparse depth, strides 1, 2, 4, 8.
pub fn sparse_depth_pyramid(frame: &ImageFrame) -> [ScaleInputs; 4] {
    let mut levels = Vec::with_capacity(4);
    let (mut h, mut w) = (frame.height, frame.width);
    let mut sd = frame.sparse_depth.clone();
    for _ in 0..4 {
        let mask: Vec<f64> = sd.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        levels.push(ScaleInputs {
            sparse: Tensor::from_vec(&[h * w, 1], sd.clone()),
            mask: Tensor::from_vec(&[h * w, 1], mask),
            h,
            w,
        });
        // Reduce: mean over valid samples in each 2x2 block.
        let (nh, nw) = (h / 2, w / 2);
        let mut next = vec![0.0; nh * nw];
        for r in 0..nh {
            for c in 0..nw {
                let mut sum = 0.0;
                let mut cnt = 0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let v = sd[(2 * r + dr) * w + 2 * c + dc];
                    if v > 0.0 {
                        sum += v;
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    next[r * nw + c] = sum / cnt as f64;
                }
            }
        }
        sd = next;
        h = nh;
        w = nw;
    }
    let mut it = levels.into_iter();
    [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ]
}

/// Initializes the recurrent state at one scale from the backbone.
pub fn init_state(
    tape: &mut Tape,
    bound: &BoundParams,
    feats: FeatMap,
    depth0: Var,
) -> Result<DepthState, DepthError> {
    let pre = tape.conv2d(
        feats.var,
        bound.var("depth.bh.w"),
        bound.var("depth.bh.b"),
        feats.h,
        feats.w,
    )?;
    let hidden = tape.tanh(pre);
    let ci = tape.matmul(feats.var, bound.var("depth.bc.w"))?;
    let ci = tape.add_bcast_row(ci, bound.var("depth.bc.b"))?;
    let conf_input = tape.sigmoid(ci);
    let n = feats.h * feats.w;
    let conf_grad = tape.leaf_owned(Tensor::from_vec(&[n, 1], vec![0.5; n]));
    Ok(DepthState {
        depth: depth0,
        hidden,
        conf_input,
        conf_grad,
    })
}

/// One refinement iteration at one scale.
///
/// h' = MGU([feat, d, s_d, M], h); g = F_g(h'); C_dg = f_conf(h');
/// dd = f_update(grad(d) - g, (d - s_d) (.) M, C_dg, C_inp);
/// d' = clamp(d - dd).
pub fn refine_step(
    tape: &mut Tape,
    bound: &BoundParams,
    state: &DepthState,
    feats: FeatMap,
    scale_in: &ScaleInputs,
) -> Result<DepthState, DepthError> {
    let (h, w) = (scale_in.h, scale_in.w);
    let sparse = tape.leaf(&scale_in.sparse);
    let mask = tape.leaf(&scale_in.mask);

    let d_norm = tape.scale(state.depth, 0.01);
    let sd_norm = tape.scale(sparse, 0.01);
    let x = tape.concat_cols(&[feats.var, d_norm, sd_norm, mask])?;
    let hidden = mgu_from(tape, bound, "depth.mgu", x, state.hidden)?;

    let g = tape.matmul(hidden, bound.var("depth.grad.w"))?;
    let g = tape.add_bcast_row(g, bound.var("depth.grad.b"))?;
    let cg = tape.matmul(hidden, bound.var("depth.conf.w"))?;
    let cg = tape.add_bcast_row(cg, bound.var("depth.conf.b"))?;
    let conf_grad = tape.sigmoid(cg);

    // Gradients live in normalized depth units and are clamped: grazing
    // ground pixels jump by hundreds of meters between neighbors.
    let grad_d = forward_diff(tape, d_norm, h, w)?;
    let grad_err = tape.sub(grad_d, g)?;
    let grad_err = tape.clamp(grad_err, -5.0, 5.0);
    let resid = tape.sub(state.depth, sparse)?;
    let resid = tape.mul(resid, mask)?;
    let resid = tape.scale(resid, 0.01);

    let upd_in = tape.concat_cols(&[grad_err, resid, conf_grad, state.conf_input])?;
    let u1 = tape.conv2d(
        upd_in,
        bound.var("depth.upd1.w"),
        bound.var("depth.upd1.b"),
        h,
        w,
    )?;
    let u1 = tape.relu(u1);
    let u2 = tape.conv2d(u1, bound.var("depth.upd2.w"), bound.var("depth.upd2.b"), h, w)?;
    let u2 = tape.relu(u2);
    let dd = tape.matmul(u2, bound.var("depth.head.w"))?;
    let dd = tape.add_bcast_row(dd, bound.var("depth.head.b"))?;

    let next = tape.sub(state.depth, dd)?;
    let next = tape.clamp(next, DEPTH_MIN, DEPTH_MAX);
    Ok(DepthState {
        depth: next,
        hidden,
        conf_input: state.conf_input,
        conf_grad,
    })
}

pub struct RefinementOutput {
    /// Final dense depth at full resolution, [h*w, 1].
    pub depth: Var,
    /// Gradient confidence upsampled to full resolution, [h*w, 1].
    pub confidence: Var,
    /// Depth after the iterations at each scale, coarse to fine (strides 8,
    /// 4, 2, 1), for multi-scale supervision.
    pub per_scale: Vec<(Var, usize, usize)>,
}

/// Coarse-to-fine refinement: iterate at stride 8, bilinearly upsample,
/// repeat down to stride 1.
pub fn run_refinement(
    tape: &mut Tape,
    bound: &BoundParams,
    frame: &ImageFrame,
    cam: &CameraModel,
    iters_per_scale: &[usize; 4],
) -> Result<RefinementOutput, DepthError> {
    let feats = encode_image(tape, bound, frame, cam)?;
    let pyramid = sparse_depth_pyramid(frame);

    // Coarsest init: nearest-neighbor fill pooled down to stride 8.
    let d0_full = init_depth(frame)?;
    let n = frame.width * frame.height;
    let mut d = tape.leaf_owned(Tensor::from_vec(&[n, 1], d0_full.data.clone()));
    let (mut ch, mut cw) = (frame.height, frame.width);
    for _ in 0..3 {
        d = tape.avg_pool2(d, ch, cw)?;
        ch /= 2;
        cw /= 2;
    }

    let mut confidence = None;
    let mut per_scale = Vec::with_capacity(4);
    for level in (0..4).rev() {
        // level 3 = stride 8 .. level 0 = stride 1
        let scale_in = &pyramid[level];
        let feat = feats.levels[level];
        let mut state = init_state(tape, bound, feat, d)?;
        for _ in 0..iters_per_scale[level] {
            state = refine_step(tape, bound, &state, feat, scale_in)?;
        }
        d = state.depth;
        confidence = Some((state.conf_grad, scale_in.h, scale_in.w));
        per_scale.push((d, scale_in.h, scale_in.w));
        if level > 0 {
            d = tape.interp2x(d, scale_in.h, scale_in.w)?;
        }
    }

    // Upsample the last confidence map to full resolution if needed.
    let (mut conf, mut conf_h, mut conf_w) = confidence.expect("four levels processed");
    while conf_h < frame.height {
        conf = tape.interp2x(conf, conf_h, conf_w)?;
        conf_h *= 2;
        conf_w *= 2;
    }
    Ok(RefinementOutput {
        depth: d,
        confidence: conf,
        per_scale,
    })
}

/// Masked mean absolute and squared error.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &[bool],
) -> Result<(f64, f64), DepthError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(DepthError::ShapeMismatch(
            pred.width, pred.height, gt.width, gt.height,
        ));
    }
    let mut mae = 0.0;
    let mut mse = 0.0;
    let mut count = 0usize;
    for i in 0..pred.data.len() {
        if mask[i] {
            let d = pred.data[i] - gt.data[i];
            mae += d.abs();
            mse += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(DepthError::EmptyMask);
    }
    Ok((mae / count as f64, mse / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use crate::rng::seeded_rng;
    use rand::Rng;
    use tempfile::tempdir;

    fn test_frame(width: usize, height: usize, seed: u64) -> ImageFrame {
        let mut rng = seeded_rng(seed);
        let rgb: Vec<f64> = (0..width * height * 3).map(|_| rng.gen::<f64>()).collect();
        let mut sd = vec![0.0; width * height];
        for _ in 0..width * height / 20 {
            let idx = rng.gen_range(0..sd.len());
            sd[idx] = rng.gen_range(5.0..80.0);
        }
        ImageFrame::new(width, height, rgb, sd)
    }

    fn cam(width: usize, height: usize) -> CameraModel {
        CameraModel::forward(width as f64, width, height, [0.0, 0.0, 1.6])
    }

    #[test]
    fn svdp_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.svdp");
        let mut dm = DepthMap::zeros(6, 4);
        dm.set(1, 2, 42.5);
        dm.save(&path).unwrap();
        let loaded = DepthMap::load(&path).unwrap();
        assert_eq!(loaded.width, 6);
        assert_eq!(loaded.height, 4);
        assert_eq!(loaded.at(1, 2), 42.5);
    }

    #[test]
    fn encoder_strides_and_intrinsics_sensitivity() {
        let frame = test_frame(32, 16, 1);
        let params = model::init_params(7);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let cam_a = cam(32, 16);
        let feats = encode_image(&mut tape, &bound, &frame, &cam_a).unwrap();
        for (l, fm) in feats.levels.iter().enumerate() {
            assert_eq!(fm.h, 16 >> l);
            assert_eq!(fm.w, 32 >> l);
            assert_eq!(tape.shape(fm.var), &[fm.h * fm.w, ENC_CHANNELS]);
        }

        // Same image, different focal length: features must differ.
        let mut cam_b = cam_a.clone();
        cam_b.intrinsics[0][0] *= 1.5;
        let feats_b = encode_image(&mut tape, &bound, &frame, &cam_b).unwrap();
        let a = tape.value(feats.levels[0].var);
        let b = tape.value(feats_b.levels[0].var);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn encoder_is_deterministic() {
        let frame = test_frame(32, 16, 2);
        let params = model::init_params(7);
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let feats = encode_image(&mut tape, &bound, &frame, &cam(32, 16)).unwrap();
            tape.value(feats.levels[3].var).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn init_depth_single_point_is_constant() {
        let mut sd = vec![0.0; 8 * 8];
        sd[3 * 8 + 4] = 12.5;
        let frame = ImageFrame::new(8, 8, vec![0.0; 8 * 8 * 3], sd);
        let d = init_depth(&frame).unwrap();
        assert!(d.data.iter().all(|&v| v == 12.5));
    }

    #[test]
    fn init_depth_dense_is_identity() {
        let mut rng = seeded_rng(3);
        let sd: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..50.0)).collect();
        let frame = ImageFrame::new(8, 8, vec![0.0; 8 * 8 * 3], sd.clone());
        let d = init_depth(&frame).unwrap();
        assert_eq!(d.data, sd);
    }

    #[test]
    fn init_depth_two_points_voronoi() {
        let w = 16;
        let h = 8;
        let mut sd = vec![0.0; w * h];
        sd[2 * w + 2] = 10.0;
        sd[5 * w + 12] = 40.0;
        let frame = ImageFrame::new(w, h, vec![0.0; w * h * 3], sd);
        let d = init_depth(&frame).unwrap();
        // Brute-force oracle.
        for r in 0..h {
            for c in 0..w {
                let d1 = (r as f64 - 2.0).powi(2) + (c as f64 - 2.0).powi(2);
                let d2 = (r as f64 - 5.0).powi(2) + (c as f64 - 12.0).powi(2);
                let expect = if d1 < d2 { 10.0 } else { 40.0 };
                if (d1 - d2).abs() > 1e-9 {
                    assert_eq!(d.at(r, c), expect, "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn init_depth_without_samples_errors() {
        let frame = ImageFrame::new(4, 4, vec![0.0; 48], vec![0.0; 16]);
        assert!(matches!(init_depth(&frame), Err(DepthError::NoSparseDepth)));
    }

    #[test]
    fn zeroed_update_head_is_identity_on_depth() {
        let frame = test_frame(16, 8, 4);
        let mut params = model::init_params(5);
        for name in ["depth.upd1.w", "depth.upd1.b", "depth.upd2.w", "depth.upd2.b", "depth.head.w", "depth.head.b"] {
            params.get_mut(name).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let feats = encode_image(&mut tape, &bound, &frame, &cam(16, 8)).unwrap();
        let pyr = sparse_depth_pyramid(&frame);
        let d0 = init_depth(&frame).unwrap();
        let d0 = tape.leaf_owned(Tensor::from_vec(&[16 * 8, 1], d0.data));
        let state = init_state(&mut tape, &bound, feats.levels[0], d0).unwrap();
        let next = refine_step(&mut tape, &bound, &state, feats.levels[0], &pyr[0]).unwrap();
        let before = tape.value(state.depth).to_vec();
        let after = tape.value(next.depth).to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_iterations_returns_upsampled_init() {
        let frame = test_frame(16, 8, 6);
        let params = model::init_params(5);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = run_refinement(&mut tape, &bound, &frame, &cam(16, 8), &[0, 0, 0, 0]).unwrap();

        // Oracle: init pooled to stride 8 and bilinearly upsampled back.
        let d0 = init_depth(&frame).unwrap();
        let mut t2 = Tape::new();
        let mut d = t2.leaf_owned(Tensor::from_vec(&[16 * 8, 1], d0.data));
        let (mut h, mut w) = (8, 16);
        for _ in 0..3 {
            d = t2.avg_pool2(d, h, w).unwrap();
            h /= 2;
            w /= 2;
        }
        for _ in 0..3 {
            d = t2.interp2x(d, h, w).unwrap();
            h *= 2;
            w *= 2;
        }
        let expect = t2.value(d);
        let got = tape.value(out.depth);
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn final_depth_respects_clamp() {
        let frame = test_frame(16, 8, 8);
        let params = model::init_params(11);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = run_refinement(&mut tape, &bound, &frame, &cam(16, 8), &[1, 1, 1, 1]).unwrap();
        for &v in tape.value(out.depth) {
            assert!((DEPTH_MIN..=DEPTH_MAX).contains(&v));
        }
    }

    #[test]
    fn metrics_trivial_and_oracle() {
        let mut rng = seeded_rng(12);
        let n = 48;
        let gt = DepthMap {
            width: 8,
            height: 6,
            data: (0..n).map(|_| rng.gen_range(1.0..60.0)).collect(),
        };
        let mask = vec![true; n];
        let (mae, mse) = depth_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((mae, mse), (0.0, 0.0));

        let off = DepthMap {
            width: 8,
            height: 6,
            data: gt.data.iter().map(|v| v + 1.0).collect(),
        };
        let (mae, mse) = depth_metrics(&off, &gt, &mask).unwrap();
        assert!((mae - 1.0).abs() < 1e-12 && (mse - 1.0).abs() < 1e-12);

        // Random pair against an independently summed loop.
        let pred = DepthMap {
            width: 8,
            height: 6,
            data: (0..n).map(|_| rng.gen_range(1.0..60.0)).collect(),
        };
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let (mae, mse) = depth_metrics(&pred, &gt, &mask).unwrap();
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut k = 0;
        for i in 0..n {
            if mask[i] {
                s1 += (pred.data[i] - gt.data[i]).abs();
                s2 += (pred.data[i] - gt.data[i]).powi(2);
                k += 1;
            }
        }
        assert!((mae - s1 / k as f64).abs() < 1e-9);
        assert!((mse - s2 / k as f64).abs() < 1e-9);

        assert!(matches!(
            depth_metrics(&pred, &gt, &vec![false; n]),
            Err(DepthError::EmptyMask)
        ));
    }
}
