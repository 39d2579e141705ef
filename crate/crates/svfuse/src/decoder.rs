//! The self-supervision core: occupancy and velocity at arbitrary 4D query
//! points, ray-derived labels, the stage-2 loss, and occupancy ray-marching
//! for LiDAR forecasting.
//!
//! A query (x, y, z, t) lives in the ego frame of its own timestamp; the
//! rigid ego transform maps it into the current frame, a residual network
//! shifts the sampling position to absorb dynamic-actor motion, and two
//! rounds of multi-scale trilinear interpolation feed the prediction heads.

use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::cloud::{LidarPoint, PointCloud};
use crate::fuse::{TapeGrid, FEAT};
use crate::geom::{
    vec3_add, vec3_dot, vec3_norm, vec3_normalize, vec3_scale, vec3_sub, Se3Pose, Vec3,
};
use crate::grid::SparseVoxelGrid;
use crate::nn::layers::{fourier_dim, fourier_encode, Activation, Mlp};
use crate::nn::{BoundParams, NnError, ParamSet, Tape, Tensor, Var, GATHER_PAD};
use crate::rng::DetRng;

pub const FOURIER_FREQS: usize = 4;
/// Fourier width of the (x, y, z, t) query.
pub const QUERY_DIM: usize = fourier_dim(4, FOURIER_FREQS);
/// Concatenated feature width of one sampling across the 4 pyramid levels.
pub const VSTAR_DIM: usize = 4 * FEAT;
/// Query times are normalized by this horizon, seconds.
pub const TIME_SCALE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("empty sample set in ssl_loss")]
    EmptySamples,
    #[error("no in-extent samples survive in ssl_loss")]
    AllOutOfExtent,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// 4D query point; spatial coordinates are in the ego frame at time
/// `t0 + t` where negative t is the past.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub position: Vec3,
    pub t: f64,
}

/// One ray-derived supervision sample.
#[derive(Debug, Clone)]
pub struct SupervisionSample {
    pub query: QueryPoint,
    pub occupied: bool,
    /// Present only for occupied samples.
    pub vel_label: Option<Vec3>,
    pub weight: f64,
}

/// Ego trajectory lookup: maps query-time coordinates into the current frame.
/// Linear interpolation over translation and yaw (planar motion), with
/// constant-velocity extrapolation beyond the stored range.
#[derive(Debug, Clone)]
pub struct EgoPath {
    /// Absolute time of the current frame.
    pub t0: f64,
    times: Vec<f64>,
    poses: Vec<Se3Pose>,
}

fn yaw_of(pose: &Se3Pose) -> f64 {
    pose.rotation[1][0].atan2(pose.rotation[0][0])
}

impl EgoPath {
    pub fn new(t0: f64, entries: Vec<(f64, Se3Pose)>) -> Self {
        assert!(!entries.is_empty(), "ego path needs at least one pose");
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (times, poses) = entries.into_iter().unzip();
        Self { t0, times, poses }
    }

    /// Ego-to-world pose at an absolute time.
    pub fn pose_at(&self, t: f64) -> Se3Pose {
        let n = self.times.len();
        if n == 1 {
            return self.poses[0];
        }
        // Segment selection with extrapolation at both ends.
        let seg = match self.times.iter().position(|&ti| ti > t) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (ta, tb) = (self.times[seg], self.times[seg + 1]);
        let alpha = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
        let (pa, pb) = (&self.poses[seg], &self.poses[seg + 1]);
        let yaw = yaw_of(pa) * (1.0 - alpha) + yaw_of(pb) * alpha;
        let translation = [
            pa.translation[0] * (1.0 - alpha) + pb.translation[0] * alpha,
            pa.translation[1] * (1.0 - alpha) + pb.translation[1] * alpha,
            pa.translation[2] * (1.0 - alpha) + pb.translation[2] * alpha,
        ];
        Se3Pose::from_yaw_translation(yaw, translation)
    }

    /// Rigid map from the ego frame at relative time `rel_t` into the current
    /// frame: pose(t0)^-1 . pose(t0 + rel_t).
    pub fn to_current(&self, p: Vec3, rel_t: f64) -> Vec3 {
        if rel_t == 0.0 {
            return p;
        }
        let cur = self.pose_at(self.t0);
        let then = self.pose_at(self.t0 + rel_t);
        cur.inverse().apply(then.apply(p))
    }

    pub fn static_path(t0: f64) -> Self {
        Self::new(t0, vec![(t0, Se3Pose::identity())])
    }
}

fn normalized_query(extent: &crate::grid::Aabb, p: Vec3, t: f64) -> [f64; 4] {
    let mut q = [0.0; 4];
    for a in 0..3 {
        let span = extent.max[a] - extent.min[a];
        q[a] = 2.0 * (p[a] - extent.min[a]) / span - 1.0;
    }
    q[3] = t / TIME_SCALE;
    q
}

pub fn pose_net() -> Mlp {
    Mlp::named("dec.pose", 3, Activation::Relu)
}
pub fn occ_net() -> Mlp {
    Mlp::named("dec.occ", 3, Activation::Relu)
}
pub fn vel_net() -> Mlp {
    Mlp::named("dec.vel", 3, Activation::Relu)
}

/// Batched tape decode of in-extent queries.
pub struct DecodeBatch {
    /// [B, 1] occupancy logits of the in-extent queries.
    pub occ_logits: Var,
    /// [B, 3] velocities of the in-extent queries.
    pub velocities: Var,
    /// For each input query, its row in the batch or None when the rigidly
    /// mapped position fell outside the extent.
    pub rows: Vec<Option<usize>>,
}

fn sample_level_tape(
    tape: &mut Tape,
    level: &TapeGrid,
    pos_var: Var,
    pos_val: Vec3,
) -> Result<Var, NnError> {
    let geom = &level.structure.geom;
    if !geom.extent.contains(pos_val) {
        // Clamped-out second sampling: zero features, no position gradient.
        let zero = tape.leaf_owned(Tensor::zeros(&[1, FEAT]));
        return Ok(zero);
    }
    let (corners, weights, dweights) = geom.trilinear_corners_d(pos_val, level.structure.scale);
    let mut rows = [GATHER_PAD; 8];
    for c in 0..8 {
        if let Some(r) = level.structure.row_of(corners[c]) {
            rows[c] = r;
        }
    }
    tape.trilinear(level.feat, pos_var, rows, weights, dweights)
}

/// Decodes a batch of queries on the tape (training path).
///
/// Per query: rigid map to the current frame, first multi-scale sampling,
/// position residual from the pose head, second sampling at the shifted
/// position, then the occupancy and velocity heads on both samplings.
pub fn decode_batch(
    tape: &mut Tape,
    bound: &BoundParams,
    pyramid: &[TapeGrid; 4],
    ego_path: &EgoPath,
    queries: &[QueryPoint],
) -> Result<DecodeBatch, DecoderError> {
    let extent = pyramid[0].structure.geom.extent;
    let mut rows = Vec::with_capacity(queries.len());
    let mut kept: Vec<(Vec3, f64)> = Vec::new();
    for q in queries {
        let p_cur = ego_path.to_current(q.position, q.t);
        if extent.contains(p_cur) {
            rows.push(Some(kept.len()));
            kept.push((p_cur, q.t));
        } else {
            rows.push(None);
        }
    }
    if kept.is_empty() {
        return Err(DecoderError::AllOutOfExtent);
    }

    // First sampling at the rigid positions, plus the Fourier-encoded query.
    let mut vstar1_rows = Vec::with_capacity(kept.len());
    let mut enc_rows = Vec::with_capacity(kept.len());
    let mut pos_vars = Vec::with_capacity(kept.len());
    for &(p, t) in &kept {
        let pos_var = tape.leaf_owned(Tensor::row(&p));
        pos_vars.push(pos_var);
        let mut level_feats = Vec::with_capacity(4);
        for level in pyramid {
            level_feats.push(sample_level_tape(tape, level, pos_var, p)?);
        }
        vstar1_rows.push(tape.concat_cols(&level_feats)?);
        let enc = fourier_encode(&normalized_query(&extent, p, t), FOURIER_FREQS);
        enc_rows.push(tape.leaf_owned(Tensor::row(&enc)));
    }
    let vstar1 = tape.concat_rows(&vstar1_rows)?;
    let encq = tape.concat_rows(&enc_rows)?;

    // Position residual and second sampling at the shifted positions.
    let pose_in = tape.concat_cols(&[vstar1, encq])?;
    let delta = pose_net().forward(tape, bound, pose_in)?;
    let mut vstar2_rows = Vec::with_capacity(kept.len());
    for (i, &(_, _)) in kept.iter().enumerate() {
        let delta_i = tape.slice_rows(delta, i, 1)?;
        let pos2 = tape.add(pos_vars[i], delta_i)?;
        let p2 = {
            let v = tape.value(pos2);
            [v[0], v[1], v[2]]
        };
        let mut level_feats = Vec::with_capacity(4);
        for level in pyramid {
            level_feats.push(sample_level_tape(tape, level, pos2, p2)?);
        }
        vstar2_rows.push(tape.concat_cols(&level_feats)?);
    }
    let vstar2 = tape.concat_rows(&vstar2_rows)?;

    let stacked = tape.concat_cols(&[vstar1, vstar2, encq])?;
    let occ_logits = occ_net().forward(tape, bound, stacked)?;
    let velocities = vel_net().forward(tape, bound, stacked)?;
    Ok(DecodeBatch {
        occ_logits,
        velocities,
        rows,
    })
}

/// Plain decode result.
#[derive(Debug, Clone, Copy)]
pub struct DecodeResult {
    /// Occupancy probability in [0, 1].
    pub occupancy: f64,
    pub velocity: Vec3,
    pub out_of_extent: bool,
}

fn apply_mlp_plain(params: &ParamSet, prefix: &str, layers: usize, input: &[f64]) -> Vec<f64> {
    let mut cur = input.to_vec();
    for l in 0..layers {
        let w = params.get(&format!("{prefix}.l{l}.w"));
        let b = params.get(&format!("{prefix}.l{l}.b"));
        let (rows, cols) = (w.shape[0], w.shape[1]);
        debug_assert_eq!(cur.len(), rows);
        let mut next = b.data.clone();
        for r in 0..rows {
            let x = cur[r];
            if x == 0.0 {
                continue;
            }
            let wrow = &w.data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                next[c] += x * wrow[c];
            }
        }
        if l + 1 < layers {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        cur = next;
    }
    cur
}

fn sample_all_levels_plain(pyramid: &[SparseVoxelGrid; 4], p: Vec3) -> Vec<f64> {
    let mut out = Vec::with_capacity(VSTAR_DIM);
    for level in pyramid {
        out.extend(level.trilinear_sample(p).feature);
    }
    out
}

/// Tape-free decode over a frozen pyramid (evaluation path); matches the
/// batched tape decode bit-for-bit on the same inputs.
pub fn decode(
    params: &ParamSet,
    pyramid: &[SparseVoxelGrid; 4],
    ego_path: &EgoPath,
    query: &QueryPoint,
) -> DecodeResult {
    let extent = pyramid[0].geom.extent;
    let p_cur = ego_path.to_current(query.position, query.t);
    if !extent.contains(p_cur) {
        return DecodeResult {
            occupancy: 0.0,
            velocity: [0.0; 3],
            out_of_extent: true,
        };
    }
    let vstar1 = sample_all_levels_plain(pyramid, p_cur);
    let encq = fourier_encode(&normalized_query(&extent, p_cur, query.t), FOURIER_FREQS);

    let mut pose_in = Vec::with_capacity(VSTAR_DIM + QUERY_DIM);
    pose_in.extend_from_slice(&vstar1);
    pose_in.extend_from_slice(&encq);
    let delta = apply_mlp_plain(params, "dec.pose", 3, &pose_in);
    let p2 = vec3_add(p_cur, [delta[0], delta[1], delta[2]]);
    let vstar2 = if extent.contains(p2) {
        sample_all_levels_plain(pyramid, p2)
    } else {
        vec![0.0; VSTAR_DIM]
    };

    let mut stacked = Vec::with_capacity(2 * VSTAR_DIM + QUERY_DIM);
    stacked.extend_from_slice(&vstar1);
    stacked.extend_from_slice(&vstar2);
    stacked.extend_from_slice(&encq);
    let logit = apply_mlp_plain(params, "dec.occ", 3, &stacked)[0];
    let vel = apply_mlp_plain(params, "dec.vel", 3, &stacked);
    DecodeResult {
        occupancy: 1.0 / (1.0 + (-logit).exp()),
        velocity: [vel[0], vel[1], vel[2]],
        out_of_extent: false,
    }
}

/// Ray supervision: the return point is occupied (with its measured velocity
/// resolved along the ray), and free samples are drawn uniformly along the
/// ray strictly inside the segment before the return.
///
/// `ego_velocity` (ego frame) compensates the Doppler measurement so static
/// structure labels as zero velocity; `epsilon` keeps free samples at least
/// one voxel short of the surface.
pub fn generate_labels(
    cloud: &PointCloud,
    rel_time: f64,
    ego_velocity: Vec3,
    rays_per_frame: usize,
    free_samples_per_ray: usize,
    epsilon: f64,
    weight: f64,
    rng: &mut DetRng,
) -> Vec<SupervisionSample> {
    assert!(rays_per_frame > 0 && free_samples_per_ray > 0);
    let n = cloud.len();
    if n == 0 {
        return Vec::new();
    }
    let picks: Vec<usize> = if rays_per_frame >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, rays_per_frame).into_vec()
    };
    let velocities = cloud.resolved_velocities(ego_velocity);
    let mut samples = Vec::with_capacity(picks.len() * (1 + free_samples_per_ray));
    for idx in picks {
        let point = &cloud.points[idx];
        let offset = vec3_sub(point.position, cloud.sensor_origin);
        let range = vec3_norm(offset);
        if range <= epsilon {
            continue;
        }
        let dir = vec3_scale(offset, 1.0 / range);
        samples.push(SupervisionSample {
            query: QueryPoint {
                position: point.position,
                t: rel_time,
            },
            occupied: true,
            vel_label: Some(velocities[idx]),
            weight,
        });
        for _ in 0..free_samples_per_ray {
            let u: f64 = rng.gen_range(0.0..(range - epsilon));
            samples.push(SupervisionSample {
                query: QueryPoint {
                    position: vec3_add(cloud.sensor_origin, vec3_scale(dir, u)),
                    t: rel_time,
                },
                occupied: false,
                vel_label: None,
                weight,
            });
        }
    }
    samples
}

/// Loss values plus bookkeeping from one ssl_loss evaluation.
pub struct SslLoss {
    pub total: Var,
    pub occ_loss: f64,
    pub vel_loss: f64,
    pub in_extent: usize,
    pub skipped: usize,
}

/// Stage-2 loss: weighted mean BCE over occupancy plus (optionally) weighted
/// mean squared velocity error over occupied samples. Samples whose rigid
/// mapping leaves the extent carry no information and are skipped.
pub fn ssl_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    pyramid: &[TapeGrid; 4],
    ego_path: &EgoPath,
    samples: &[SupervisionSample],
    lambda_vel: f64,
    velocity_term: bool,
) -> Result<SslLoss, DecoderError> {
    if samples.is_empty() {
        return Err(DecoderError::EmptySamples);
    }
    let queries: Vec<QueryPoint> = samples.iter().map(|s| s.query).collect();
    let batch = decode_batch(tape, bound, pyramid, ego_path, &queries)?;

    // Group by weight so each group reduces with the plain-mean primitives.
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = std::collections::BTreeMap::new();
    let mut skipped = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if batch.rows[i].is_some() {
            groups.entry(s.weight.to_bits()).or_default().push(i);
        } else {
            skipped += 1;
        }
    }

    let mut occ_terms: Vec<(f64, Var)> = Vec::new();
    let mut vel_terms: Vec<(f64, Var)> = Vec::new();
    let mut total_w = 0.0;
    let mut total_vel_w = 0.0;
    for (bits, members) in &groups {
        let w = f64::from_bits(*bits);
        let occ_rows: Vec<usize> = members
            .iter()
            .map(|&i| batch.rows[i].unwrap())
            .collect();
        let labels = Tensor::from_vec(
            &[members.len(), 1],
            members
                .iter()
                .map(|&i| if samples[i].occupied { 1.0 } else { 0.0 })
                .collect(),
        );
        let logits = tape.gather_rows(batch.occ_logits, &occ_rows)?;
        let bce = tape.bce_with_logits(logits, &labels)?;
        occ_terms.push((w * members.len() as f64, bce));
        total_w += w * members.len() as f64;

        let occupied: Vec<usize> = members
            .iter()
            .filter(|&&i| samples[i].occupied)
            .copied()
            .collect();
        if velocity_term && !occupied.is_empty() {
            let rows: Vec<usize> = occupied.iter().map(|&i| batch.rows[i].unwrap()).collect();
            let mut label_data = Vec::with_capacity(occupied.len() * 3);
            for &i in &occupied {
                label_data.extend_from_slice(&samples[i].vel_label.expect("occupied has velocity"));
            }
            let labels = Tensor::from_vec(&[occupied.len(), 3], label_data);
            let picked = tape.gather_rows(batch.velocities, &rows)?;
            let mse = tape.mse(picked, &labels)?;
            vel_terms.push((w * occupied.len() as f64, mse));
            total_vel_w += w * occupied.len() as f64;
        }
    }
    if occ_terms.is_empty() {
        return Err(DecoderError::AllOutOfExtent);
    }

    let combine = |tape: &mut Tape, terms: &[(f64, Var)], norm: f64| -> Result<Var, NnError> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = tape.scale(v, w / norm);
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        Ok(acc.expect("non-empty terms"))
    };
    let occ = combine(tape, &occ_terms, total_w)?;
    let (vel, vel_value) = if vel_terms.is_empty() {
        (None, 0.0)
    } else {
        let v = combine(tape, &vel_terms, total_vel_w)?;
        let val = tape.value(v)[0];
        (Some(v), val)
    };
    let occ_value = tape.value(occ)[0];
    let total = match vel {
        Some(v) => {
            let scaled = tape.scale(v, lambda_vel);
            tape.add(occ, scaled)?
        }
        None => occ,
    };
    let in_extent: usize = groups.values().map(|m| m.len()).sum();
    Ok(SslLoss {
        total,
        occ_loss: occ_value,
        vel_loss: vel_value,
        in_extent,
        skipped,
    })
}

/// Threshold ray-marching: walk each ray from the sensor origin in fixed
/// increments, decode occupancy at the future time, and emit a point at the
/// first sample whose occupancy crosses the threshold.
///
/// Rays and the returned cloud live in the ego frame at `t_future`; the
/// decoder's rigid mapping pulls each sample back into the current frame.
pub fn forecast_cloud(
    params: &ParamSet,
    pyramid: &[SparseVoxelGrid; 4],
    ego_path: &EgoPath,
    sensor_origin: Vec3,
    ray_dirs: &[Vec3],
    t_future: f64,
    threshold: f64,
    step: f64,
    max_range: f64,
) -> PointCloud {
    assert!(threshold > 0.0 && threshold < 1.0);
    assert!(step > 0.0);
    let steps = (max_range / step).floor() as usize;
    let hits: Vec<Option<(Vec3, Vec3)>> = crate::thread_pool().install(|| {
        use rayon::prelude::*;
        ray_dirs
            .par_iter()
            .map(|&dir| {
                let dir = vec3_normalize(dir);
                for k in 1..=steps {
                    let p = vec3_add(sensor_origin, vec3_scale(dir, k as f64 * step));
                    let out = decode(
                        params,
                        pyramid,
                        ego_path,
                        &QueryPoint {
                            position: p,
                            t: t_future,
                        },
                    );
                    if out.occupancy > threshold {
                        return Some((p, out.velocity));
                    }
                }
                None
            })
            .collect()
    });
    let mut cloud = PointCloud::empty(ego_path.t0 + t_future, sensor_origin);
    for (dir, hit) in ray_dirs.iter().zip(hits) {
        if let Some((p, vel)) = hit {
            let dir = vec3_normalize(*dir);
            cloud.points.push(LidarPoint {
                position: p,
                radial_velocity: vec3_dot(vel, dir),
                intensity: 1.0,
            });
        }
    }
    cloud
}

/// Sample dump: one JSON object per line.
pub fn dump_samples(samples: &[SupervisionSample], mut w: impl Write) -> std::io::Result<()> {
    for s in samples {
        let line = serde_json::json!({
            "q": [s.query.position[0], s.query.position[1], s.query.position[2], s.query.t],
            "occ": if s.occupied { 1 } else { 0 },
            "vel": s.vel_label.map(|v| v.to_vec()),
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}
