//! Lifting camera features into 3D, encoding LiDAR into sparse voxels,
//! fusing both modalities, and building the 4-scale sparse pyramid.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::depth::FeatMap;
use crate::geom::{unproject_pixel, vec3_add, vec3_scale, CameraModel, Vec3};
use crate::grid::{GridGeometry, SparseVoxelGrid};
use crate::nn::{BoundParams, NnError, ParamSet, Tape, Tensor, Var, GATHER_PAD};

pub const FEAT: usize = 16;
pub const FUSED_FEAT: usize = 2 * FEAT;
pub const BN_EPS: f64 = 1e-5;
/// Camera pixels are lifted at this stride to bound cell counts.
pub const LIFT_STRIDE: usize = 2;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("grid parameter mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A sparse grid whose features live on the tape; the structure half carries
/// coordinates, velocities, and counts.
pub struct TapeGrid {
    pub structure: SparseVoxelGrid,
    pub feat: Var,
}

impl TapeGrid {
    /// Pulls the features off the tape into plain grid storage.
    pub fn freeze(&self, tape: &Tape) -> SparseVoxelGrid {
        let feat_dim = tape.shape(self.feat)[1];
        self.structure
            .clone()
            .with_features(feat_dim, tape.value(self.feat).to_vec())
    }

    /// Wraps a frozen grid's features as a tape leaf.
    pub fn thaw(grid: &SparseVoxelGrid, tape: &mut Tape) -> Self {
        let feat = tape.leaf_owned(Tensor::from_vec(
            &[grid.len(), grid.feat_dim],
            grid.features.clone(),
        ));
        let mut structure = grid.clone();
        structure.features = Vec::new();
        structure.feat_dim = 0;
        TapeGrid {
            structure,
            feat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    CameraOnly,
    LidarOnly,
    Both,
}

/// Fused camera-LiDAR grid. `Q = M + N - O` holds by construction: the
/// occupied set is the union of both modality sets.
pub struct FusedGrid {
    pub grid: TapeGrid,
    pub provenance: Vec<Provenance>,
    /// Normalized, zero-filled halves before the fusion convolution.
    pub pre_camera: Var,
    pub pre_lidar: Var,
    /// Per-channel batch statistics of the raw encoder outputs, for running
    /// average updates during training.
    pub camera_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub lidar_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Offsets of a 3x3x3 neighborhood in fixed (dk, dj, di) order.
fn window_offsets() -> Vec<[i32; 3]> {
    let mut offs = Vec::with_capacity(27);
    for dk in -1..=1 {
        for dj in -1..=1 {
            for di in -1..=1 {
                offs.push([di, dj, dk]);
            }
        }
    }
    offs
}

/// Neighbor row table for a sparse convolution: for every output coordinate,
/// the input row holding each neighborhood offset (-1 when unoccupied).
pub fn neighbor_table(input: &SparseVoxelGrid, out_coords: &[[i32; 3]]) -> Vec<i64> {
    let offs = window_offsets();
    let mut table = Vec::with_capacity(out_coords.len() * offs.len());
    for &ijk in out_coords {
        for off in &offs {
            let nb = [ijk[0] + off[0], ijk[1] + off[1], ijk[2] + off[2]];
            table.push(input.row_of(nb).map_or(-1, |r| r as i64));
        }
    }
    table
}

/// One-ring dilation of the occupied set, clipped to the extent.
pub fn dilate_occupancy(grid: &SparseVoxelGrid) -> Vec<[i32; 3]> {
    let offs = window_offsets();
    let mut set = std::collections::BTreeSet::new();
    let scale = grid.scale;
    for &ijk in grid.coords() {
        for off in &offs {
            let nb = [ijk[0] + off[0], ijk[1] + off[1], ijk[2] + off[2]];
            let center = grid.geom.center_of(nb, scale);
            if grid.geom.extent.contains(center) {
                set.insert(nb);
            }
        }
    }
    set.into_iter().collect()
}

/// Groups in-extent items by their scale-1 cell, in sorted cell order.
fn group_by_cell(positions: &[Vec3], geom: &GridGeometry) -> BTreeMap<[i32; 3], Vec<usize>> {
    let mut groups: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (idx, &p) in positions.iter().enumerate() {
        if geom.extent.contains(p) {
            groups.entry(geom.coord_of(p, 1)).or_default().push(idx);
        }
    }
    groups
}

fn structure_from_groups(
    geom: GridGeometry,
    scale: u8,
    groups: &BTreeMap<[i32; 3], Vec<usize>>,
    velocities: &[Vec3],
) -> SparseVoxelGrid {
    let cells = groups
        .iter()
        .map(|(&ijk, members)| {
            let mut vel = [0.0; 3];
            for &m in members {
                vel = vec3_add(vel, velocities[m]);
            }
            vel = vec3_scale(vel, 1.0 / members.len() as f64);
            (ijk, (Vec::new(), vel, members.len() as u32))
        })
        .collect();
    SparseVoxelGrid::from_cells(geom, scale, 0, cells)
}

/// Voxel-wise PointNet stand-in: each point embeds (dx, dy, dz, v_r,
/// intensity) relative to its cell center through a small MLP, max-pooled
/// per voxel. Permutation invariant within each cell by construction.
pub fn encode_lidar(
    tape: &mut Tape,
    bound: &BoundParams,
    cloud: &PointCloud,
    ego_velocity: Vec3,
    geom: GridGeometry,
) -> Result<TapeGrid, FuseError> {
    let positions: Vec<Vec3> = cloud.points.iter().map(|p| p.position).collect();
    let velocities = cloud.resolved_velocities(ego_velocity);
    let groups = group_by_cell(&positions, &geom);
    let structure = structure_from_groups(geom, 1, &groups, &velocities);

    if groups.is_empty() {
        let feat = tape.leaf_owned(Tensor::zeros(&[0, FEAT]));
        return Ok(TapeGrid { structure, feat });
    }

    let mut rows = Vec::new();
    let mut lens = Vec::with_capacity(groups.len());
    for (ijk, members) in &groups {
        let center = geom.center_of(*ijk, 1);
        for &m in members {
            let p = &cloud.points[m];
            rows.extend_from_slice(&[
                p.position[0] - center[0],
                p.position[1] - center[1],
                p.position[2] - center[2],
                p.radial_velocity * 0.1,
                p.intensity,
            ]);
        }
        lens.push(members.len());
    }
    let n_points = rows.len() / 5;
    let x = tape.leaf_owned(Tensor::from_vec(&[n_points, 5], rows));
    let h = tape.matmul(x, bound.var("lidar.p1.w"))?;
    let h = tape.add_bcast_row(h, bound.var("lidar.p1.b"))?;
    let h = tape.relu(h);
    let h = tape.matmul(h, bound.var("lidar.p2.w"))?;
    let h = tape.add_bcast_row(h, bound.var("lidar.p2.b"))?;
    let feat = tape.segment_max(h, lens)?;
    Ok(TapeGrid { structure, feat })
}

/// Lifts stride-2 pixel blocks through the predicted depth into scale-1
/// voxels, mean-aggregating block features per cell.
pub fn lift_camera_features(
    tape: &mut Tape,
    feat_l2: FeatMap,
    depth_full: &[f64],
    cam: &CameraModel,
    geom: GridGeometry,
) -> Result<TapeGrid, FuseError> {
    assert_eq!(depth_full.len(), cam.width * cam.height);
    let (h2, w2) = (feat_l2.h, feat_l2.w);
    let mut positions = Vec::with_capacity(h2 * w2);
    let mut feat_rows = Vec::with_capacity(h2 * w2);
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            // Mean depth of the 2x2 full-resolution block.
            let mut depth = 0.0;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                depth += depth_full[(2 * r2 + dr) * cam.width + 2 * c2 + dc];
            }
            depth *= 0.25;
            if depth <= 0.0 {
                continue;
            }
            let u = (2 * c2 + 1) as f64;
            let v = (2 * r2 + 1) as f64;
            let Ok(p) = unproject_pixel(u, v, depth, cam) else {
                continue;
            };
            positions.push(p);
            feat_rows.push(r2 * w2 + c2);
        }
    }
    let groups = group_by_cell(&positions, &geom);
    let velocities = vec![[0.0; 3]; positions.len()];
    let structure = structure_from_groups(geom, 1, &groups, &velocities);
    if groups.is_empty() {
        let feat = tape.leaf_owned(Tensor::zeros(&[0, FEAT]));
        return Ok(TapeGrid { structure, feat });
    }
    let mut gather = Vec::new();
    let mut lens = Vec::with_capacity(groups.len());
    for members in groups.values() {
        for &m in members {
            gather.push(feat_rows[m]);
        }
        lens.push(members.len());
    }
    let picked = tape.gather_rows(feat_l2.var, &gather)?;
    let feat = tape.segment_mean(picked, lens)?;
    Ok(TapeGrid { structure, feat })
}

/// How fusion normalization obtains its statistics.
pub enum BnMode<'a> {
    /// Differentiable per-batch statistics over occupied cells.
    Batch,
    /// Frozen running averages from the parameter buffers.
    Frozen(&'a ParamSet),
}

fn normalize_half(
    tape: &mut Tape,
    feat: Var,
    mode: &BnMode,
    prefix: &str,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), FuseError> {
    let rows = tape.shape(feat)[0];
    if rows == 0 {
        return Ok((feat, None));
    }
    match mode {
        BnMode::Batch => {
            let f = tape.shape(feat)[1];
            let vals = tape.value(feat);
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for r in 0..rows {
                for c in 0..f {
                    mean[c] += vals[r * f + c];
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            for r in 0..rows {
                for c in 0..f {
                    let d = vals[r * f + c] - mean[c];
                    var[c] += d * d;
                }
            }
            for v in &mut var {
                *v /= rows as f64;
            }
            let out = crate::nn::layers::batch_norm_cols(tape, feat, BN_EPS)?;
            Ok((out, Some((mean, var))))
        }
        BnMode::Frozen(params) => {
            let mean = params.get(&format!("fuse.bn.{prefix}_mean"));
            let var = params.get(&format!("fuse.bn.{prefix}_var"));
            let out = crate::nn::layers::normalize_with_stats(tape, feat, mean, var, BN_EPS)?;
            Ok((out, None))
        }
    }
}

/// Concatenates normalized camera and LiDAR features on the union occupancy
/// (zeros where a modality is missing) and applies the fusion convolution.
pub fn fuse(
    tape: &mut Tape,
    bound: &BoundParams,
    cam_grid: &TapeGrid,
    lidar_grid: &TapeGrid,
    bn: BnMode,
) -> Result<FusedGrid, FuseError> {
    if cam_grid.structure.geom != lidar_grid.structure.geom {
        return Err(FuseError::GridMismatch(format!(
            "camera geom {:?} vs lidar geom {:?}",
            cam_grid.structure.geom, lidar_grid.structure.geom
        )));
    }
    if cam_grid.structure.scale != lidar_grid.structure.scale {
        return Err(FuseError::GridMismatch(format!(
            "camera scale {} vs lidar scale {}",
            cam_grid.structure.scale, lidar_grid.structure.scale
        )));
    }
    let geom = cam_grid.structure.geom;
    let scale = cam_grid.structure.scale;

    // Union occupancy in sorted order; Q = M + N - O by set union.
    let mut union: BTreeMap<[i32; 3], (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (row, &ijk) in cam_grid.structure.coords().iter().enumerate() {
        union.entry(ijk).or_default().0 = Some(row);
    }
    for (row, &ijk) in lidar_grid.structure.coords().iter().enumerate() {
        union.entry(ijk).or_default().1 = Some(row);
    }

    let mut provenance = Vec::with_capacity(union.len());
    let mut cam_rows = Vec::with_capacity(union.len());
    let mut lid_rows = Vec::with_capacity(union.len());
    let mut cells = BTreeMap::new();
    for (&ijk, &(cam_row, lid_row)) in &union {
        provenance.push(match (cam_row, lid_row) {
            (Some(_), Some(_)) => Provenance::Both,
            (Some(_), None) => Provenance::CameraOnly,
            (None, Some(_)) => Provenance::LidarOnly,
            (None, None) => unreachable!("cell in union without source"),
        });
        cam_rows.push(cam_row.unwrap_or(GATHER_PAD));
        lid_rows.push(lid_row.unwrap_or(GATHER_PAD));
        let vel = lid_row
            .map(|r| lidar_grid.structure.velocities[r])
            .unwrap_or([0.0; 3]);
        let count = cam_row.map_or(0, |r| cam_grid.structure.counts[r])
            + lid_row.map_or(0, |r| lidar_grid.structure.counts[r]);
        cells.insert(ijk, (Vec::new(), vel, count));
    }
    let structure = SparseVoxelGrid::from_cells(geom, scale, 0, cells);

    let (cam_norm, camera_stats) = normalize_half(tape, cam_grid.feat, &bn, "cam")?;
    let (lid_norm, lidar_stats) = normalize_half(tape, lidar_grid.feat, &bn, "lid")?;
    let pre_camera = tape.gather_rows(cam_norm, &cam_rows)?;
    let pre_lidar = tape.gather_rows(lid_norm, &lid_rows)?;
    let stacked = tape.concat_cols(&[pre_camera, pre_lidar])?;

    let table = neighbor_table(&structure, structure.coords());
    let feat = tape.sparse_conv3(
        stacked,
        bound.var("fuse.conv.w"),
        bound.var("fuse.conv.b"),
        table,
        27,
    )?;
    let feat = tape.relu(feat);

    Ok(FusedGrid {
        grid: TapeGrid { structure, feat },
        provenance,
        pre_camera,
        pre_lidar,
        camera_stats,
        lidar_stats,
    })
}

/// Downsamples a tape grid to the next scale: mean features over children,
/// count-weighted velocities, summed counts.
pub fn downsample_tape(tape: &mut Tape, tg: &TapeGrid) -> Result<TapeGrid, FuseError> {
    let fine = &tg.structure;
    let mut groups: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (row, &ijk) in fine.coords().iter().enumerate() {
        let coarse = [
            ijk[0].div_euclid(2),
            ijk[1].div_euclid(2),
            ijk[2].div_euclid(2),
        ];
        groups.entry(coarse).or_default().push(row);
    }
    let mut gather = Vec::new();
    let mut lens = Vec::with_capacity(groups.len());
    let mut cells = BTreeMap::new();
    for (&coarse, members) in &groups {
        let mut vel = [0.0; 3];
        let mut count = 0u32;
        for &m in members {
            gather.push(m);
            vel = vec3_add(vel, vec3_scale(fine.velocities[m], fine.counts[m] as f64));
            count += fine.counts[m];
        }
        if count > 0 {
            vel = vec3_scale(vel, 1.0 / count as f64);
        } else {
            vel = [0.0; 3];
        }
        lens.push(members.len());
        cells.insert(coarse, (Vec::new(), vel, count));
    }
    let structure = SparseVoxelGrid::from_cells(fine.geom, fine.scale + 1, 0, cells);
    let feat = if structure.is_empty() {
        let f = tape.shape(tg.feat)[1];
        tape.leaf_owned(Tensor::zeros(&[0, f]))
    } else {
        let picked = tape.gather_rows(tg.feat, &gather)?;
        tape.segment_mean(picked, lens)?
    };
    Ok(TapeGrid { structure, feat })
}

/// Expands a structure to a dilated occupied set, carrying velocities and
/// counts for pre-existing cells (new cells get zeros).
fn dilated_structure(grid: &SparseVoxelGrid) -> SparseVoxelGrid {
    let coords = dilate_occupancy(grid);
    let cells = coords
        .into_iter()
        .map(|ijk| {
            let (vel, count) = grid
                .row_of(ijk)
                .map(|r| (grid.velocities[r], grid.counts[r]))
                .unwrap_or(([0.0; 3], 0));
            (ijk, (Vec::new(), vel, count))
        })
        .collect();
    SparseVoxelGrid::from_cells(grid.geom, grid.scale, 0, cells)
}

/// One pyramid level: a completion block (occupancy dilation + convolution
/// over the original support) followed by a contextual aggregation block
/// (3x3x3 convolution on the dilated support).
fn late_level(
    tape: &mut Tape,
    bound: &BoundParams,
    input: &TapeGrid,
    level: usize,
) -> Result<TapeGrid, FuseError> {
    let structure = dilated_structure(&input.structure);
    let comp_table = neighbor_table(&input.structure, structure.coords());
    let comp = tape.sparse_conv3(
        input.feat,
        bound.var(&format!("late.l{level}.comp.w")),
        bound.var(&format!("late.l{level}.comp.b")),
        comp_table,
        27,
    )?;
    let comp = tape.relu(comp);
    let agg_table = neighbor_table(&structure, structure.coords());
    let agg = tape.sparse_conv3(
        comp,
        bound.var(&format!("late.l{level}.agg.w")),
        bound.var(&format!("late.l{level}.agg.b")),
        agg_table,
        27,
    )?;
    let feat = tape.relu(agg);
    Ok(TapeGrid { structure, feat })
}

/// Four-scale late encoding; every level stays sparse.
pub fn late_encode(
    tape: &mut Tape,
    bound: &BoundParams,
    fused: &FusedGrid,
) -> Result<[TapeGrid; 4], FuseError> {
    let v1 = late_level(tape, bound, &fused.grid, 1)?;
    let base2 = downsample_tape(tape, &v1)?;
    let v2 = late_level(tape, bound, &base2, 2)?;
    let base3 = downsample_tape(tape, &v2)?;
    let v3 = late_level(tape, bound, &base3, 3)?;
    let base4 = downsample_tape(tape, &v3)?;
    let v4 = late_level(tape, bound, &base4, 4)?;
    Ok([v1, v2, v3, v4])
}

/// Dense BEV raster over the occupied (i, j) bounding box.
#[derive(Debug, Clone)]
pub struct BevMap {
    pub i0: i32,
    pub j0: i32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major by (j, i), channel-interleaved.
    pub data: Vec<f64>,
}

/// Projects a sparse level to BEV: each (i, j) column averages its occupied
/// cells over k; empty columns stay zero.
pub fn bev_project(level: &SparseVoxelGrid) -> BevMap {
    let channels = level.feat_dim;
    if level.is_empty() {
        return BevMap {
            i0: 0,
            j0: 0,
            width: 0,
            height: 0,
            channels,
            data: Vec::new(),
        };
    }
    let (mut i_min, mut i_max, mut j_min, mut j_max) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for &ijk in level.coords() {
        i_min = i_min.min(ijk[0]);
        i_max = i_max.max(ijk[0]);
        j_min = j_min.min(ijk[1]);
        j_max = j_max.max(ijk[1]);
    }
    let width = (i_max - i_min + 1) as usize;
    let height = (j_max - j_min + 1) as usize;
    let mut data = vec![0.0; width * height * channels];
    let mut counts = vec![0usize; width * height];
    for (row, &ijk) in level.coords().iter().enumerate() {
        let px = (ijk[1] - j_min) as usize * width + (ijk[0] - i_min) as usize;
        counts[px] += 1;
        for (c, &v) in level.feature(row).iter().enumerate() {
            data[px * channels + c] += v;
        }
    }
    for px in 0..width * height {
        if counts[px] > 0 {
            for c in 0..channels {
                data[px * channels + c] /= counts[px] as f64;
            }
        }
    }
    BevMap {
        i0: i_min,
        j0: j_min,
        width,
        height,
        channels,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::LidarPoint;
    use crate::grid::Aabb;
    use crate::model;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn geom() -> GridGeometry {
        GridGeometry {
            base_size: 0.5,
            origin: [0.0; 3],
            extent: Aabb::new([-20.0; 3], [20.0; 3]),
        }
    }

    fn cloud_from(points: Vec<(Vec3, f64)>) -> PointCloud {
        PointCloud {
            timestamp: 0.0,
            sensor_origin: [0.0; 3],
            points: points
                .into_iter()
                .map(|(position, radial_velocity)| LidarPoint {
                    position,
                    radial_velocity,
                    intensity: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_cloud_empty_grid() {
        let params = model::init_params(1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let g = encode_lidar(&mut tape, &bound, &cloud_from(vec![]), [0.0; 3], geom()).unwrap();
        assert!(g.structure.is_empty());
        assert_eq!(tape.shape(g.feat), &[0, FEAT]);
    }

    #[test]
    fn lidar_encoding_is_permutation_invariant() {
        let params = model::init_params(2);
        let pts = vec![
            ([1.1, 1.2, 0.3], -2.0),
            ([1.3, 1.1, 0.2], -1.0),
            ([1.2, 1.3, 0.4], 0.5),
            ([5.0, 2.0, 0.1], 1.0),
        ];
        let mut reversed = pts.clone();
        reversed.reverse();

        let run = |points: Vec<(Vec3, f64)>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let g = encode_lidar(&mut tape, &bound, &cloud_from(points), [0.0; 3], geom()).unwrap();
            (g.structure.coords().to_vec(), tape.value(g.feat).to_vec())
        };
        let (ca, fa) = run(pts);
        let (cb, fb) = run(reversed);
        assert_eq!(ca, cb);
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lidar_feature_matches_bruteforce_max() {
        // Oracle: embed each member point separately, take the elementwise max.
        let params = model::init_params(3);
        let pts = vec![
            ([1.1, 1.2, 0.3], -2.0),
            ([1.3, 1.1, 0.2], -1.0),
            ([1.2, 1.3, 0.4], 0.5),
        ];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let g = encode_lidar(&mut tape, &bound, &cloud_from(pts.clone()), [0.0; 3], geom()).unwrap();
        assert_eq!(g.structure.len(), 1);
        let got = tape.value(g.feat).to_vec();

        let mut oracle = vec![f64::NEG_INFINITY; FEAT];
        let center = geom().center_of(g.structure.coords()[0], 1);
        for (p, vr) in &pts {
            let mut t2 = Tape::new();
            let b2 = params.bind(&mut t2);
            let x = t2.leaf_owned(Tensor::row(&[
                p[0] - center[0],
                p[1] - center[1],
                p[2] - center[2],
                vr * 0.1,
                0.5,
            ]));
            let h = t2.matmul(x, b2.var("lidar.p1.w")).unwrap();
            let h = t2.add_bcast_row(h, b2.var("lidar.p1.b")).unwrap();
            let h = t2.relu(h);
            let h = t2.matmul(h, b2.var("lidar.p2.w")).unwrap();
            let h = t2.add_bcast_row(h, b2.var("lidar.p2.b")).unwrap();
            for (o, &v) in oracle.iter_mut().zip(t2.value(h)) {
                *o = o.max(v);
            }
        }
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    fn leaf_grid(tape: &mut Tape, cells: Vec<([i32; 3], Vec<f64>)>, g: GridGeometry) -> TapeGrid {
        let mut map = BTreeMap::new();
        for (ijk, feat) in &cells {
            map.insert(*ijk, (feat.clone(), [0.0; 3], 1));
        }
        let dim = cells.first().map_or(FEAT, |(_, f)| f.len());
        let grid = SparseVoxelGrid::from_cells(g, 1, dim, map);
        TapeGrid::thaw(&grid, tape)
    }

    #[test]
    fn fuse_disjoint_and_identical_counts() {
        let params = model::init_params(4);
        let g = geom();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let cam = leaf_grid(&mut tape, vec![([0, 0, 0], vec![1.0; FEAT])], g);
        let lid = leaf_grid(&mut tape, vec![([3, 0, 0], vec![2.0; FEAT])], g);
        let fused = fuse(&mut tape, &bound, &cam, &lid, BnMode::Batch).unwrap();
        assert_eq!(fused.grid.structure.len(), 2);
        assert_eq!(
            fused.provenance,
            vec![Provenance::CameraOnly, Provenance::LidarOnly]
        );
        // Camera-only cell has zero lidar half pre-conv and vice versa.
        let pre_l = tape.value(fused.pre_lidar);
        let pre_c = tape.value(fused.pre_camera);
        assert!(pre_l[..FEAT].iter().all(|&v| v == 0.0));
        assert!(pre_c[FEAT..].iter().all(|&v| v == 0.0));

        // Identical occupancy: Q = M = N = O.
        let cam2 = leaf_grid(&mut tape, vec![([1, 1, 1], vec![1.0; FEAT])], g);
        let lid2 = leaf_grid(&mut tape, vec![([1, 1, 1], vec![2.0; FEAT])], g);
        let fused2 = fuse(&mut tape, &bound, &cam2, &lid2, BnMode::Batch).unwrap();
        assert_eq!(fused2.grid.structure.len(), 1);
        assert_eq!(fused2.provenance, vec![Provenance::Both]);
    }

    #[test]
    fn fuse_q_equals_union_oracle() {
        let params = model::init_params(5);
        let mut rng = seeded_rng(6);
        let g = geom();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let cam_n = rng.gen_range(1..30);
            let lid_n = rng.gen_range(1..30);
            let mut make = |n: usize| {
                let cells: Vec<([i32; 3], Vec<f64>)> = (0..n)
                    .map(|_| {
                        (
                            [
                                rng.gen_range(-8..8),
                                rng.gen_range(-8..8),
                                rng.gen_range(-8..8),
                            ],
                            vec![rng.gen_range(-1.0..1.0); FEAT],
                        )
                    })
                    .collect();
                cells
            };
            let cam_cells = make(cam_n);
            let lid_cells = make(lid_n);
            let cam_set: std::collections::BTreeSet<[i32; 3]> =
                cam_cells.iter().map(|(c, _)| *c).collect();
            let lid_set: std::collections::BTreeSet<[i32; 3]> =
                lid_cells.iter().map(|(c, _)| *c).collect();
            let union = cam_set.union(&lid_set).count();
            let overlap = cam_set.intersection(&lid_set).count();

            let cam = leaf_grid(&mut tape, cam_cells, g);
            let lid = leaf_grid(&mut tape, lid_cells, g);
            let fused = fuse(&mut tape, &bound, &cam, &lid, BnMode::Batch).unwrap();
            let q = fused.grid.structure.len();
            assert_eq!(q, union);
            assert_eq!(q, cam_set.len() + lid_set.len() - overlap);
            let both = fused
                .provenance
                .iter()
                .filter(|p| **p == Provenance::Both)
                .count();
            assert_eq!(both, overlap);
        }
    }

    #[test]
    fn completion_dilates_single_cell() {
        let params = model::init_params(7);
        let g = geom();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let cam = leaf_grid(&mut tape, vec![([2, 2, 2], vec![1.0; FEAT])], g);
        let lid = leaf_grid(&mut tape, vec![([2, 2, 2], vec![1.0; FEAT])], g);
        let fused = fuse(&mut tape, &bound, &cam, &lid, BnMode::Batch).unwrap();
        let pyramid = late_encode(&mut tape, &bound, &fused).unwrap();
        assert_eq!(pyramid[0].structure.len(), 27);
        let expect: Vec<[i32; 3]> = dilate_occupancy(&fused.grid.structure);
        assert_eq!(pyramid[0].structure.coords(), expect.as_slice());
    }

    #[test]
    fn pyramid_counts_follow_pigeonhole() {
        let params = model::init_params(8);
        let mut rng = seeded_rng(9);
        let g = geom();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let cells: Vec<([i32; 3], Vec<f64>)> = (0..40)
            .map(|_| {
                (
                    [
                        rng.gen_range(-10..10),
                        rng.gen_range(-10..10),
                        rng.gen_range(-6..6),
                    ],
                    vec![rng.gen_range(-1.0..1.0); FEAT],
                )
            })
            .collect();
        let cam = leaf_grid(&mut tape, cells.clone(), g);
        let lid = leaf_grid(&mut tape, cells, g);
        let fused = fuse(&mut tape, &bound, &cam, &lid, BnMode::Batch).unwrap();
        let pyramid = late_encode(&mut tape, &bound, &fused).unwrap();
        for level in 0..3 {
            let down = downsample_tape(&mut tape, &pyramid[level]).unwrap();
            assert!(down.structure.len() <= pyramid[level].structure.len());
            // The next level dilates exactly that downsampled base.
            assert_eq!(
                pyramid[level + 1].structure.coords(),
                dilate_occupancy(&down.structure).as_slice()
            );
        }
    }

    #[test]
    fn zero_weight_conv_zeroes_features_keeps_occupancy() {
        let mut params = model::init_params(10);
        for level in 1..=4 {
            for part in ["comp", "agg"] {
                for leaf in ["w", "b"] {
                    params
                        .get_mut(&format!("late.l{level}.{part}.{leaf}"))
                        .data
                        .iter_mut()
                        .for_each(|v| *v = 0.0);
                }
            }
        }
        let g = geom();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let cam = leaf_grid(&mut tape, vec![([0, 0, 0], vec![1.0; FEAT])], g);
        let lid = leaf_grid(&mut tape, vec![([1, 0, 0], vec![1.0; FEAT])], g);
        let fused = fuse(&mut tape, &bound, &cam, &lid, BnMode::Batch).unwrap();
        let pyramid = late_encode(&mut tape, &bound, &fused).unwrap();
        assert!(tape.value(pyramid[0].feat).iter().all(|&v| v == 0.0));
        assert!(!pyramid[0].structure.is_empty());
    }

    #[test]
    fn lift_single_pixel_on_axis() {
        // 2x2 image, one stride-2 block at depth 10 on the optical axis.
        let cam = CameraModel::forward(2.0, 2, 2, [0.0; 3]);
        let g = GridGeometry {
            base_size: 0.5,
            origin: [0.0; 3],
            extent: Aabb::new([-20.0; 3], [20.0; 3]),
        };
        let mut tape = Tape::new();
        let feat = tape.leaf_owned(Tensor::from_vec(&[1, FEAT], vec![2.0; FEAT]));
        let fm = FeatMap {
            var: feat,
            h: 1,
            w: 1,
        };
        let depth = vec![10.0; 4];
        let lifted = lift_camera_features(&mut tape, fm, &depth, &cam, g).unwrap();
        assert_eq!(lifted.structure.len(), 1);
        let expect = g.coord_of([10.0, 0.0, 0.0], 1);
        assert_eq!(lifted.structure.coords()[0], expect);
        assert_eq!(tape.value(lifted.feat), &[2.0; FEAT]);
    }

    #[test]
    fn lift_cell_count_bounded_by_pixels() {
        let cam = CameraModel::forward(16.0, 16, 8, [0.0, 0.0, 1.0]);
        let g = geom();
        let mut rng = seeded_rng(11);
        let mut tape = Tape::new();
        let feat = tape.leaf_owned(Tensor::randn(&[4 * 8, FEAT], 1.0, &mut rng));
        let fm = FeatMap {
            var: feat,
            h: 4,
            w: 8,
        };
        let depth: Vec<f64> = (0..16 * 8).map(|_| rng.gen_range(2.0..15.0)).collect();
        let lifted = lift_camera_features(&mut tape, fm, &depth, &cam, g).unwrap();
        assert!(lifted.structure.len() <= 4 * 8);
        let total: u32 = lifted.structure.counts.iter().sum();
        assert_eq!(total as usize, 4 * 8);
    }

    #[test]
    fn lift_adjacent_pixels_mean_in_shared_cell() {
        // Two stride-2 blocks, same depth; the grid origin centers one 4 m
        // cell on the optical axis so both land in it.
        let cam = CameraModel::forward(8.0, 4, 2, [0.0; 3]);
        let g = GridGeometry {
            base_size: 4.0,
            origin: [-2.0, -2.0, -2.0],
            extent: Aabb::new([-40.0; 3], [40.0; 3]),
        };
        let mut tape = Tape::new();
        let feat = tape.leaf_owned(Tensor::from_vec(
            &[2, FEAT],
            (0..2 * FEAT).map(|i| i as f64).collect(),
        ));
        let fm = FeatMap {
            var: feat,
            h: 1,
            w: 2,
        };
        let depth = vec![10.0; 8];
        let lifted = lift_camera_features(&mut tape, fm, &depth, &cam, g).unwrap();
        assert_eq!(lifted.structure.len(), 1);
        let got = tape.value(lifted.feat);
        for c in 0..FEAT {
            let expect = (c as f64 + (FEAT + c) as f64) / 2.0;
            assert!((got[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bev_projection_counts_and_means() {
        let g = geom();
        let mut cells = BTreeMap::new();
        cells.insert([2, 3, 1], (vec![4.0], [0.0; 3], 1));
        cells.insert([2, 3, 5], (vec![8.0], [0.0; 3], 1));
        cells.insert([4, 3, 0], (vec![1.0], [0.0; 3], 1));
        let grid = SparseVoxelGrid::from_cells(g, 1, 1, cells);
        let bev = bev_project(&grid);
        // Two distinct (i, j) columns -> two nonzero BEV pixels.
        let nonzero = bev.data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 2);
        // Column (2, 3) averages its two cells.
        let px = ((3 - bev.j0) as usize * bev.width) + (2 - bev.i0) as usize;
        assert_eq!(bev.data[px], 6.0);
    }
}
