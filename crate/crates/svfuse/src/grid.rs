//! Hash-indexed sparse voxel grids.
//!
//! Memory is proportional to the number of occupied cells, never to the
//! spatial extent, which is what makes long-range processing viable. Cells
//! are stored in sorted key order so that every reduction over a grid is
//! deterministic regardless of construction order.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::geom::{vec3_add, vec3_scale, Vec3};

/// Axis-aligned region of interest, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] < self.max[i])
    }
}

/// Integer voxel coordinate at a pyramid scale (1..=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub ijk: [i32; 3],
    pub scale: u8,
}

/// Geometry shared by every grid in one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// Edge length of a scale-1 voxel, meters.
    pub base_size: f64,
    /// World position of voxel (0, 0, 0)'s minimum corner.
    pub origin: Vec3,
    pub extent: Aabb,
}

impl GridGeometry {
    pub fn voxel_size(&self, scale: u8) -> f64 {
        debug_assert!((1..=4).contains(&scale));
        self.base_size * f64::powi(2.0, scale as i32 - 1)
    }

    pub fn coord_of(&self, p: Vec3, scale: u8) -> [i32; 3] {
        let size = self.voxel_size(scale);
        [
            ((p[0] - self.origin[0]) / size).floor() as i32,
            ((p[1] - self.origin[1]) / size).floor() as i32,
            ((p[2] - self.origin[2]) / size).floor() as i32,
        ]
    }

    /// Center of the cell, the point trilinear interpolation anchors on.
    pub fn center_of(&self, ijk: [i32; 3], scale: u8) -> Vec3 {
        let size = self.voxel_size(scale);
        vec3_add(
            self.origin,
            [
                (ijk[0] as f64 + 0.5) * size,
                (ijk[1] as f64 + 0.5) * size,
                (ijk[2] as f64 + 0.5) * size,
            ],
        )
    }

    /// The 8 cell centers surrounding `p` at the given scale, with their
    /// trilinear weights. Weights sum to 1 and are not renormalized when
    /// corners are unoccupied.
    pub fn trilinear_corners(&self, p: Vec3, scale: u8) -> ([[i32; 3]; 8], [f64; 8]) {
        let (corners, weights, _) = self.trilinear_corners_d(p, scale);
        (corners, weights)
    }

    /// Corners, weights, and weight gradients with respect to the sample
    /// position (piecewise within the surrounding cell).
    pub fn trilinear_corners_d(
        &self,
        p: Vec3,
        scale: u8,
    ) -> ([[i32; 3]; 8], [f64; 8], [[f64; 3]; 8]) {
        let size = self.voxel_size(scale);
        let mut base = [0i32; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            // Continuous coordinate in units of cells, measured from the
            // center of cell 0.
            let u = (p[a] - self.origin[a]) / size - 0.5;
            let f = u.floor();
            base[a] = f as i32;
            frac[a] = u - f;
        }
        let mut corners = [[0i32; 3]; 8];
        let mut weights = [0f64; 8];
        let mut dweights = [[0f64; 3]; 8];
        for c in 0..8 {
            let d = [(c & 1) as i32, ((c >> 1) & 1) as i32, ((c >> 2) & 1) as i32];
            corners[c] = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            weights[c] = w;
            for a in 0..3 {
                // d/dp_a of the hat product; dfrac/dp = 1/size.
                let mut dw = if d[a] == 1 { 1.0 } else { -1.0 } / size;
                for b in 0..3 {
                    if b != a {
                        dw *= if d[b] == 1 { frac[b] } else { 1.0 - frac[b] };
                    }
                }
                dweights[c][a] = dw;
            }
        }
        (corners, weights, dweights)
    }
}

/// Occupied-cell statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryStats {
    pub cells: usize,
    pub bytes: usize,
}

/// Sparse voxel grid: occupied cells only, each carrying a latent feature
/// vector, an aggregate velocity, and the contributing point count.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    pub geom: GridGeometry,
    pub scale: u8,
    pub feat_dim: usize,
    coords: Vec<[i32; 3]>,
    index: HashMap<[i32; 3], usize>,
    /// Row-major, `len() * feat_dim` values.
    pub features: Vec<f64>,
    pub velocities: Vec<Vec3>,
    pub counts: Vec<u32>,
}

impl SparseVoxelGrid {
    pub fn empty(geom: GridGeometry, scale: u8, feat_dim: usize) -> Self {
        Self {
            geom,
            scale,
            feat_dim,
            coords: Vec::new(),
            index: HashMap::new(),
            features: Vec::new(),
            velocities: Vec::new(),
            counts: Vec::new(),
        }
    }

    /// Freezes a cell map into sorted-key storage.
    pub fn from_cells(
        geom: GridGeometry,
        scale: u8,
        feat_dim: usize,
        cells: BTreeMap<[i32; 3], (Vec<f64>, Vec3, u32)>,
    ) -> Self {
        let n = cells.len();
        let mut coords = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * feat_dim);
        let mut velocities = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        let mut index = HashMap::with_capacity(n);
        for (ijk, (feat, vel, count)) in cells {
            debug_assert_eq!(feat.len(), feat_dim);
            index.insert(ijk, coords.len());
            coords.push(ijk);
            features.extend_from_slice(&feat);
            velocities.push(vel);
            counts.push(count);
        }
        Self {
            geom,
            scale,
            feat_dim,
            coords,
            index,
            features,
            velocities,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Cells in sorted key order.
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn row_of(&self, ijk: [i32; 3]) -> Option<usize> {
        self.index.get(&ijk).copied()
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.features[row * self.feat_dim..(row + 1) * self.feat_dim]
    }

    /// Replaces the feature matrix, e.g. with an encoder output.
    pub fn with_features(mut self, feat_dim: usize, features: Vec<f64>) -> Self {
        assert_eq!(features.len(), self.len() * feat_dim, "feature matrix shape");
        self.feat_dim = feat_dim;
        self.features = features;
        self
    }

    pub fn memory_stats(&self) -> MemoryStats {
        // Per cell: key (12) + hash entry estimate (20) + feature row +
        // velocity (24) + count (4).
        let per_cell = 12 + 20 + self.feat_dim * 8 + 24 + 4;
        MemoryStats {
            cells: self.len(),
            bytes: self.len() * per_cell,
        }
    }

    /// Weighted sum over the 8 surrounding cell centers. Unoccupied corners
    /// contribute zero feature with their weight retained, so interpolation
    /// decays toward zero at sparse boundaries.
    pub fn trilinear_sample(&self, p: Vec3) -> TrilinearSample {
        if !self.geom.extent.contains(p) {
            return TrilinearSample {
                feature: vec![0.0; self.feat_dim],
                out_of_bounds: true,
            };
        }
        let (corners, weights) = self.geom.trilinear_corners(p, self.scale);
        let mut feature = vec![0.0; self.feat_dim];
        for c in 0..8 {
            if let Some(row) = self.row_of(corners[c]) {
                let f = self.feature(row);
                for (dst, &src) in feature.iter_mut().zip(f) {
                    *dst += weights[c] * src;
                }
            }
        }
        TrilinearSample {
            feature,
            out_of_bounds: false,
        }
    }

    /// Next-scale grid: each coarse cell averages its occupied children.
    /// Velocities merge by count weighting; counts add.
    pub fn downsample(&self) -> SparseVoxelGrid {
        assert!(self.scale < 4, "scale 4 is the coarsest level");
        let mut cells: BTreeMap<[i32; 3], (Vec<f64>, Vec3, u32, u32)> = BTreeMap::new();
        for (row, &ijk) in self.coords.iter().enumerate() {
            let coarse = [
                ijk[0].div_euclid(2),
                ijk[1].div_euclid(2),
                ijk[2].div_euclid(2),
            ];
            let entry = cells
                .entry(coarse)
                .or_insert_with(|| (vec![0.0; self.feat_dim], [0.0; 3], 0, 0));
            for (dst, &src) in entry.0.iter_mut().zip(self.feature(row)) {
                *dst += src;
            }
            let c = self.counts[row] as f64;
            entry.1 = vec3_add(entry.1, vec3_scale(self.velocities[row], c));
            entry.2 += self.counts[row];
            entry.3 += 1;
        }
        let finalized = cells
            .into_iter()
            .map(|(ijk, (mut feat, vel, count, children))| {
                for f in &mut feat {
                    *f /= children as f64;
                }
                let vel = if count > 0 {
                    vec3_scale(vel, 1.0 / count as f64)
                } else {
                    [0.0; 3]
                };
                (ijk, (feat, vel, count))
            })
            .collect();
        SparseVoxelGrid::from_cells(self.geom, self.scale + 1, self.feat_dim, finalized)
    }

    /// Debug dump: one JSON object per cell.
    pub fn dump_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for (row, ijk) in self.coords.iter().enumerate() {
            let line = serde_json::json!({
                "ijk": ijk,
                "scale": self.scale,
                "feat": self.feature(row),
                "vel": self.velocities[row],
                "count": self.counts[row],
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrilinearSample {
    pub feature: Vec<f64>,
    pub out_of_bounds: bool,
}

/// Bins points into cells, dropping out-of-extent points. Per-cell velocity
/// is the mean of the member point velocities, count the member count.
pub fn voxelize(
    positions: &[Vec3],
    velocities: &[Vec3],
    geom: GridGeometry,
) -> SparseVoxelGrid {
    assert_eq!(positions.len(), velocities.len());
    let mut cells: BTreeMap<[i32; 3], (Vec<f64>, Vec3, u32)> = BTreeMap::new();
    for (p, v) in positions.iter().zip(velocities) {
        if !geom.extent.contains(*p) {
            continue;
        }
        let ijk = geom.coord_of(*p, 1);
        let entry = cells.entry(ijk).or_insert_with(|| (Vec::new(), [0.0; 3], 0));
        entry.1 = vec3_add(entry.1, *v);
        entry.2 += 1;
    }
    for (_, (_, vel, count)) in cells.iter_mut() {
        *vel = vec3_scale(*vel, 1.0 / *count as f64);
    }
    SparseVoxelGrid::from_cells(geom, 1, 0, cells)
}

/// Like [`voxelize`] but also mean-aggregates a per-point feature row into
/// each cell, which is how lifted camera features reach the grid.
pub fn voxelize_with_features(
    positions: &[Vec3],
    velocities: &[Vec3],
    point_features: &[f64],
    feat_dim: usize,
    geom: GridGeometry,
) -> SparseVoxelGrid {
    assert_eq!(positions.len(), velocities.len());
    assert_eq!(point_features.len(), positions.len() * feat_dim);
    let mut cells: BTreeMap<[i32; 3], (Vec<f64>, Vec3, u32)> = BTreeMap::new();
    for (idx, (p, v)) in positions.iter().zip(velocities).enumerate() {
        if !geom.extent.contains(*p) {
            continue;
        }
        let ijk = geom.coord_of(*p, 1);
        let entry = cells
            .entry(ijk)
            .or_insert_with(|| (vec![0.0; feat_dim], [0.0; 3], 0));
        let row = &point_features[idx * feat_dim..(idx + 1) * feat_dim];
        for (dst, &src) in entry.0.iter_mut().zip(row) {
            *dst += src;
        }
        entry.1 = vec3_add(entry.1, *v);
        entry.2 += 1;
    }
    for (_, (feat, vel, count)) in cells.iter_mut() {
        let inv = 1.0 / *count as f64;
        for f in feat.iter_mut() {
            *f *= inv;
        }
        *vel = vec3_scale(*vel, inv);
    }
    SparseVoxelGrid::from_cells(geom, 1, feat_dim, cells)
}
