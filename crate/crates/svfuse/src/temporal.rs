//! Velocity-aware temporal warping and sparse windowed attention.
//!
//! Past voxels move by their own velocity times the elapsed interval, then by
//! the ego transform. Each occupied current voxel attends to occupied warped
//! voxels inside a fixed 3D window around its own coordinate; the output
//! occupancy equals the current occupancy exactly, so history never inflates
//! the sparse representation.

use std::collections::BTreeMap;

use crate::fuse::TapeGrid;
use crate::geom::{vec3_add, vec3_scale, Se3Pose};
use crate::grid::SparseVoxelGrid;
use crate::nn::{NnError, Tape, Tensor, Var, GATHER_PAD};

/// Attention window half-extent in cells per axis; 1 = a 3x3x3 window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWindow {
    pub radius: [i32; 3],
}

impl Default for AttentionWindow {
    fn default() -> Self {
        Self { radius: [1, 1, 1] }
    }
}

/// Query/key/value projections of the attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Warps a tape grid one interval forward: each cell center advances by its
/// velocity times dt, then maps through the ego transform, and is
/// re-voxelized at the same scale. Colliding cells merge features by mean;
/// cells leaving the extent are dropped; velocities rotate with the frame.
pub fn warp_voxels_tape(
    tape: &mut Tape,
    past: &TapeGrid,
    ego: &Se3Pose,
    dt: f64,
) -> Result<TapeGrid, NnError> {
    let src = &past.structure;
    let scale = src.scale;
    let mut groups: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (row, &ijk) in src.coords().iter().enumerate() {
        let center = src.geom.center_of(ijk, scale);
        let advanced = vec3_add(center, vec3_scale(src.velocities[row], dt));
        let moved = ego.apply(advanced);
        if !src.geom.extent.contains(moved) {
            continue;
        }
        groups.entry(src.geom.coord_of(moved, scale)).or_default().push(row);
    }

    let mut gather = Vec::new();
    let mut lens = Vec::with_capacity(groups.len());
    let mut cells = BTreeMap::new();
    for (&ijk, members) in &groups {
        let mut vel = [0.0; 3];
        let mut count = 0u32;
        for &m in members {
            gather.push(m);
            let rotated = ego.rotate(src.velocities[m]);
            vel = vec3_add(vel, vec3_scale(rotated, src.counts[m] as f64));
            count += src.counts[m];
        }
        if count > 0 {
            vel = vec3_scale(vel, 1.0 / count as f64);
        }
        lens.push(members.len());
        cells.insert(ijk, (Vec::new(), vel, count));
    }
    let structure = SparseVoxelGrid::from_cells(src.geom, scale, 0, cells);
    let feat = if structure.is_empty() {
        let f = tape.shape(past.feat)[1];
        tape.leaf_owned(Tensor::zeros(&[0, f]))
    } else {
        let picked = tape.gather_rows(past.feat, &gather)?;
        tape.segment_mean(picked, lens)?
    };
    Ok(TapeGrid { structure, feat })
}

/// Plain-grid warp for frozen features.
pub fn warp_voxels(past: &SparseVoxelGrid, ego: &Se3Pose, dt: f64) -> SparseVoxelGrid {
    let mut tape = Tape::new();
    let tg = TapeGrid::thaw(past, &mut tape);
    let warped = warp_voxels_tape(&mut tape, &tg, ego, dt).expect("warp is shape-safe");
    warped.freeze(&tape)
}

/// Sparse windowed attention on the tape. Every occupied current cell is a
/// query; keys/values are occupied warped cells within the window centered at
/// the query coordinate. The attended value adds residually onto the current
/// feature; queries without keys pass through unchanged. The output occupied
/// set equals the current occupied set.
pub fn sparse_window_attention_tape(
    tape: &mut Tape,
    current: &TapeGrid,
    warped: &TapeGrid,
    window: AttentionWindow,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<TapeGrid, NnError> {
    let cur = &current.structure;
    let n = cur.len();
    if warped.structure.is_empty() || n == 0 {
        return Ok(TapeGrid {
            structure: cur.clone(),
            feat: current.feat,
        });
    }
    let d = tape.shape(current.feat)[1] as f64;

    let q = tape.matmul(current.feat, wq)?;
    let k = tape.matmul(warped.feat, wk)?;
    let v = tape.matmul(warped.feat, wv)?;

    // Per query, collect warped rows inside the window.
    let [rx, ry, rz] = window.radius;
    let mut q_gather = Vec::new();
    let mut kv_gather = Vec::new();
    let mut lens = Vec::new();
    let mut scatter = vec![GATHER_PAD; n];
    for (row, &ijk) in cur.coords().iter().enumerate() {
        let mut keys = 0usize;
        for dk in -rz..=rz {
            for dj in -ry..=ry {
                for di in -rx..=rx {
                    let nb = [ijk[0] + di, ijk[1] + dj, ijk[2] + dk];
                    if let Some(w_row) = warped.structure.row_of(nb) {
                        q_gather.push(row);
                        kv_gather.push(w_row);
                        keys += 1;
                    }
                }
            }
        }
        if keys > 0 {
            scatter[row] = lens.len();
            lens.push(keys);
        }
    }
    if lens.is_empty() {
        return Ok(TapeGrid {
            structure: cur.clone(),
            feat: current.feat,
        });
    }

    let qb = tape.gather_rows(q, &q_gather)?;
    let kb = tape.gather_rows(k, &kv_gather)?;
    let vb = tape.gather_rows(v, &kv_gather)?;
    let prod = tape.mul(qb, kb)?;
    let dim = tape.shape(prod)[1];
    let ones_col = tape.leaf_owned(Tensor::from_vec(&[dim, 1], vec![1.0; dim]));
    let scores = tape.matmul(prod, ones_col)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.segment_softmax(scores, lens.clone())?;
    let ones_row = tape.leaf_owned(Tensor::from_vec(&[1, dim], vec![1.0; dim]));
    let attn_wide = tape.matmul(attn, ones_row)?;
    let weighted = tape.mul(attn_wide, vb)?;
    let summed = tape.segment_sum(weighted, lens)?;

    let residual = tape.gather_rows(summed, &scatter)?;
    let feat = tape.add(current.feat, residual)?;
    Ok(TapeGrid {
        structure: cur.clone(),
        feat,
    })
}

/// Plain-grid attention for frozen features.
pub fn sparse_window_attention(
    current: &SparseVoxelGrid,
    warped: &SparseVoxelGrid,
    window: AttentionWindow,
    weights: &AttentionWeights,
) -> SparseVoxelGrid {
    let mut tape = Tape::new();
    let cur = TapeGrid::thaw(current, &mut tape);
    let past = TapeGrid::thaw(warped, &mut tape);
    let wq = tape.leaf(&weights.wq);
    let wk = tape.leaf(&weights.wk);
    let wv = tape.leaf(&weights.wv);
    let out = sparse_window_attention_tape(&mut tape, &cur, &past, window, wq, wk, wv)
        .expect("attention is shape-safe");
    out.freeze(&tape)
}

/// One history step in the temporal chain: the pyramid encoded at the older
/// timestamp plus the rigid transform and interval to the next frame in the
/// chain.
pub struct HistoryStep {
    pub v2: TapeGrid,
    /// Maps the older frame's ego coordinates into the next frame's.
    pub ego_to_next: Se3Pose,
    pub dt: f64,
}

/// Enriches the current second-scale grid with history, chaining oldest to
/// newest: each step warps the accumulated history into the next frame and
/// attends from that frame's occupied cells. Only V2 changes; every level's
/// occupied set is preserved.
pub fn temporal_fuse_v2(
    tape: &mut Tape,
    current_v2: &TapeGrid,
    history: &[HistoryStep],
    window: AttentionWindow,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<TapeGrid, NnError> {
    if history.is_empty() {
        return Ok(TapeGrid {
            structure: current_v2.structure.clone(),
            feat: current_v2.feat,
        });
    }
    let mut enriched = TapeGrid {
        structure: history[0].v2.structure.clone(),
        feat: history[0].v2.feat,
    };
    for (i, step) in history.iter().enumerate() {
        let warped = warp_voxels_tape(tape, &enriched, &step.ego_to_next, step.dt)?;
        let target = if i + 1 < history.len() {
            &history[i + 1].v2
        } else {
            current_v2
        };
        enriched = sparse_window_attention_tape(tape, target, &warped, window, wq, wk, wv)?;
    }
    Ok(enriched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Aabb, GridGeometry};
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn geom(base: f64) -> GridGeometry {
        GridGeometry {
            base_size: base,
            origin: [0.0; 3],
            extent: Aabb::new([-40.0; 3], [40.0; 3]),
        }
    }

    fn grid_with(
        g: GridGeometry,
        scale: u8,
        cells: Vec<([i32; 3], Vec<f64>, [f64; 3])>,
    ) -> SparseVoxelGrid {
        let dim = cells.first().map_or(0, |(_, f, _)| f.len());
        let map = cells
            .into_iter()
            .map(|(ijk, feat, vel)| (ijk, (feat, vel, 1)))
            .collect();
        SparseVoxelGrid::from_cells(g, scale, dim, map)
    }

    fn rand_weights(dim: usize, seed: u64) -> AttentionWeights {
        let mut rng = seeded_rng(seed);
        AttentionWeights {
            wq: Tensor::randn(&[dim, dim], 0.5, &mut rng),
            wk: Tensor::randn(&[dim, dim], 0.5, &mut rng),
            wv: Tensor::randn(&[dim, dim], 0.5, &mut rng),
        }
    }

    #[test]
    fn identity_warp_is_identity() {
        let g = geom(0.5);
        let grid = grid_with(
            g,
            2,
            vec![
                ([3, 1, 0], vec![1.0, 2.0], [0.0; 3]),
                ([-2, 4, 1], vec![-1.0, 0.5], [0.0; 3]),
            ],
        );
        let warped = warp_voxels(&grid, &Se3Pose::identity(), 0.5);
        assert_eq!(warped.coords(), grid.coords());
        assert_eq!(warped.features, grid.features);
    }

    #[test]
    fn kinematic_warp_moves_one_meter() {
        // 10 m/s for 0.1 s = +1 m = +1 cell at the 1 m scale-2 size.
        let g = geom(0.5);
        let grid = grid_with(g, 2, vec![([3, 1, 0], vec![7.0], [10.0, 0.0, 0.0])]);
        let warped = warp_voxels(&grid, &Se3Pose::identity(), 0.1);
        assert_eq!(warped.coords(), &[[4, 1, 0]]);
        let center_before = g.center_of([3, 1, 0], 2);
        let center_after = g.center_of([4, 1, 0], 2);
        assert!((center_after[0] - center_before[0] - 1.0).abs() < 1e-12);
        assert_eq!(warped.feature(0), &[7.0]);
    }

    #[test]
    fn rigid_warp_matches_transform_points_oracle() {
        let g = geom(0.5);
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let cells: Vec<([i32; 3], Vec<f64>, [f64; 3])> = (0..30)
                .map(|_| {
                    (
                        [
                            rng.gen_range(-20..20),
                            rng.gen_range(-20..20),
                            rng.gen_range(-20..20),
                        ],
                        vec![rng.gen_range(-1.0..1.0)],
                        [0.0; 3],
                    )
                })
                .collect();
            let grid = grid_with(g, 2, cells);
            let ego = Se3Pose::from_yaw_translation(
                rng.gen_range(-0.5..0.5),
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0],
            );
            let warped = warp_voxels(&grid, &ego, 1.0);

            // Oracle: rigidly move the centers, re-voxelize, compare coords.
            let centers: Vec<[f64; 3]> = grid
                .coords()
                .iter()
                .map(|&ijk| g.center_of(ijk, 2))
                .collect();
            let moved = crate::geom::transform_points(&centers, &ego);
            let mut expect: Vec<[i32; 3]> = moved
                .iter()
                .filter(|p| g.extent.contains(**p))
                .map(|&p| g.coord_of(p, 2))
                .collect();
            expect.sort_unstable();
            expect.dedup();
            assert_eq!(warped.coords(), expect.as_slice());
        }
    }

    #[test]
    fn empty_warped_grid_passes_current_through() {
        let g = geom(0.5);
        let current = grid_with(g, 2, vec![([0, 0, 0], vec![1.0, -1.0], [0.0; 3])]);
        let empty = SparseVoxelGrid::empty(g, 2, 2);
        let out = sparse_window_attention(
            &current,
            &empty,
            AttentionWindow::default(),
            &rand_weights(2, 1),
        );
        assert_eq!(out.coords(), current.coords());
        assert_eq!(out.features, current.features);
    }

    #[test]
    fn singleton_key_adds_projected_value() {
        let dim = 4;
        let g = geom(0.5);
        let weights = rand_weights(dim, 2);
        let cur_feat = vec![0.5, -0.25, 1.0, 0.75];
        let key_feat = vec![1.5, 0.5, -1.0, 0.25];
        let current = grid_with(g, 2, vec![([2, 2, 2], cur_feat.clone(), [0.0; 3])]);
        let warped = grid_with(g, 2, vec![([3, 2, 2], key_feat.clone(), [0.0; 3])]);
        let out = sparse_window_attention(&current, &warped, AttentionWindow::default(), &weights);
        // Softmax over one key = weight 1: out = current + W_v . key.
        for c in 0..dim {
            let mut wv_k = 0.0;
            for r in 0..dim {
                wv_k += key_feat[r] * weights.wv.data[r * dim + c];
            }
            assert!((out.feature(0)[c] - (cur_feat[c] + wv_k)).abs() < 1e-10);
        }
    }

    #[test]
    fn key_outside_window_is_ignored() {
        let dim = 4;
        let g = geom(0.5);
        let current = grid_with(g, 2, vec![([0, 0, 0], vec![1.0; 4], [0.0; 3])]);
        let warped = grid_with(g, 2, vec![([3, 0, 0], vec![9.0; 4], [0.0; 3])]);
        let out = sparse_window_attention(
            &current,
            &warped,
            AttentionWindow::default(),
            &rand_weights(dim, 3),
        );
        assert_eq!(out.feature(0), &[1.0; 4]);
    }

    /// Dense full attention with a window mask; the oracle for the sparse path.
    fn dense_attention_oracle(
        current: &SparseVoxelGrid,
        warped: &SparseVoxelGrid,
        radius: i32,
        weights: &AttentionWeights,
    ) -> Vec<Vec<f64>> {
        let dim = current.feat_dim;
        let project = |feat: &[f64], w: &Tensor| -> Vec<f64> {
            (0..dim)
                .map(|c| (0..dim).map(|r| feat[r] * w.data[r * dim + c]).sum())
                .collect()
        };
        current
            .coords()
            .iter()
            .enumerate()
            .map(|(row, &ijk)| {
                let q = project(current.feature(row), &weights.wq);
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for (w_row, &w_ijk) in warped.coords().iter().enumerate() {
                    let inside = (0..3).all(|a| (w_ijk[a] - ijk[a]).abs() <= radius);
                    if !inside {
                        continue; // masked out
                    }
                    let k = project(warped.feature(w_row), &weights.wk);
                    let v = project(warped.feature(w_row), &weights.wv);
                    let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    scores.push(s / (dim as f64).sqrt());
                    values.push(v);
                }
                let mut out = current.feature(row).to_vec();
                if !scores.is_empty() {
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    for (e, v) in exps.iter().zip(&values) {
                        for c in 0..dim {
                            out[c] += e / total * v[c];
                        }
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn sparse_matches_dense_oracle_on_toy_grids() {
        let dim = 8;
        let g = geom(0.5);
        let mut rng = seeded_rng(7);
        for trial in 0..20 {
            let weights = rand_weights(dim, 100 + trial);
            let cur_n = rng.gen_range(1..40);
            let warp_n = rng.gen_range(1..40);
            let mut make = |n: usize| {
                let cells: Vec<([i32; 3], Vec<f64>, [f64; 3])> = (0..n)
                    .map(|_| {
                        (
                            [
                                rng.gen_range(0..8),
                                rng.gen_range(0..8),
                                rng.gen_range(0..8),
                            ],
                            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                            [0.0; 3],
                        )
                    })
                    .collect();
                grid_with(g, 2, cells)
            };
            let current = make(cur_n);
            let warped = make(warp_n);
            let out =
                sparse_window_attention(&current, &warped, AttentionWindow::default(), &weights);
            assert_eq!(out.coords(), current.coords());
            let oracle = dense_attention_oracle(&current, &warped, 1, &weights);
            for (row, expect) in oracle.iter().enumerate() {
                for (a, b) in out.feature(row).iter().zip(expect) {
                    assert!((a - b).abs() < 1e-5, "trial {trial} row {row}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn temporal_chain_preserves_occupancy() {
        let g = geom(0.5);
        let mut rng = seeded_rng(9);
        let mut make = |n: usize, seed_v: f64| {
            let cells: Vec<([i32; 3], Vec<f64>, [f64; 3])> = (0..n)
                .map(|_| {
                    (
                        [
                            rng.gen_range(-10..10),
                            rng.gen_range(-10..10),
                            rng.gen_range(-3..3),
                        ],
                        (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        [seed_v, 0.0, 0.0],
                    )
                })
                .collect();
            grid_with(g, 2, cells)
        };
        let current = make(25, 0.0);
        let old = make(20, 2.0);
        let older = make(15, -1.0);

        let weights = rand_weights(8, 11);
        let mut tape = Tape::new();
        let wq = tape.leaf(&weights.wq);
        let wk = tape.leaf(&weights.wk);
        let wv = tape.leaf(&weights.wv);
        let cur_tg = TapeGrid::thaw(&current, &mut tape);

        // Empty history: unchanged.
        let out = temporal_fuse_v2(
            &mut tape,
            &cur_tg,
            &[],
            AttentionWindow::default(),
            wq,
            wk,
            wv,
        )
        .unwrap();
        assert_eq!(out.feat, cur_tg.feat);

        // Two-frame chain preserves the current occupied set.
        let ego = Se3Pose::from_yaw_translation(0.05, [1.0, 0.2, 0.0]);
        let h1 = TapeGrid::thaw(&older, &mut tape);
        let h2 = TapeGrid::thaw(&old, &mut tape);
        let history = vec![
            HistoryStep {
                v2: h1,
                ego_to_next: ego,
                dt: 1.0,
            },
            HistoryStep {
                v2: h2,
                ego_to_next: ego,
                dt: 1.0,
            },
        ];
        let out = temporal_fuse_v2(
            &mut tape,
            &cur_tg,
            &history,
            AttentionWindow::default(),
            wq,
            wk,
            wv,
        )
        .unwrap();
        assert_eq!(out.structure.coords(), current.coords());
    }

    #[test]
    fn softmax_weights_sum_to_one_per_query() {
        // Indirect check through the attention output: a warped grid whose
        // projected values are constant must add exactly that constant.
        let dim = 4;
        let g = geom(0.5);
        let current = grid_with(g, 2, vec![([1, 1, 1], vec![0.0; 4], [0.0; 3])]);
        let warped = grid_with(
            g,
            2,
            vec![
                ([0, 1, 1], vec![1.0, 0.0, 0.0, 0.0], [0.0; 3]),
                ([2, 1, 1], vec![1.0, 0.0, 0.0, 0.0], [0.0; 3]),
                ([1, 0, 1], vec![1.0, 0.0, 0.0, 0.0], [0.0; 3]),
            ],
        );
        // Identity value projection: every value row is e0, so the attended
        // sum is exactly sum(weights) * e0 = e0 regardless of the scores.
        let mut weights = rand_weights(dim, 13);
        weights.wv = Tensor::from_vec(
            &[4, 4],
            (0..16)
                .map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 })
                .collect(),
        );
        let out = sparse_window_attention(&current, &warped, AttentionWindow::default(), &weights);
        assert!((out.feature(0)[0] - 1.0).abs() < 1e-9);
        assert!(out.feature(0)[1].abs() < 1e-9);
    }
}
