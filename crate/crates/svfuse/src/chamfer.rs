//! Chamfer distance between point clouds via a 3D k-d tree.

use thiserror::Error;

use crate::geom::Vec3;

/// Definition string pinned into every forecast report so numbers stay
/// comparable across runs.
pub const CD_DEFINITION: &str =
    "mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2 (symmetric sum of squared distances, m^2)";

#[derive(Debug, Error)]
pub enum ChamferError {
    #[error("empty cloud in CD")]
    EmptyCloud,
}

/// Median-split k-d tree over 3D points.
pub struct KdTree {
    nodes: Vec<KdNode>,
    points: Vec<Vec3>,
}

struct KdNode {
    point: Vec3,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = Self {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
        };
        if !points.is_empty() {
            let mut idx: Vec<usize> = (0..points.len()).collect();
            tree.build_rec(&mut idx, 0);
        }
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let axis = depth % 3;
        idx.sort_unstable_by(|&a, &b| {
            self.points[a][axis]
                .partial_cmp(&self.points[b][axis])
                .unwrap()
        });
        let mid = idx.len() / 2;
        let node_idx = self.nodes.len();
        self.nodes.push(KdNode {
            point: self.points[idx[mid]],
            axis,
            left: None,
            right: None,
        });
        // Split copies keep the borrow checker out of the recursion.
        let mut left: Vec<usize> = idx[..mid].to_vec();
        let mut right: Vec<usize> = idx[mid + 1..].to_vec();
        if !left.is_empty() {
            let child = self.build_rec(&mut left, depth + 1);
            self.nodes[node_idx].left = Some(child);
        }
        if !right.is_empty() {
            let child = self.build_rec(&mut right, depth + 1);
            self.nodes[node_idx].right = Some(child);
        }
        node_idx
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_sq(&self, query: Vec3) -> f64 {
        assert!(!self.nodes.is_empty(), "nearest query on empty tree");
        let mut best = f64::INFINITY;
        self.nearest_rec(0, query, &mut best);
        best
    }

    fn nearest_rec(&self, node_idx: usize, query: Vec3, best: &mut f64) {
        let node = &self.nodes[node_idx];
        let d = dist_sq(node.point, query);
        if d < *best {
            *best = d;
        }
        let delta = query[node.axis] - node.point[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.nearest_rec(n, query, best);
        }
        if let Some(f) = far {
            if delta * delta < *best {
                self.nearest_rec(f, query, best);
            }
        }
    }
}

fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Symmetric-sum squared Chamfer distance, m^2 (see [`CD_DEFINITION`]).
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64, ChamferError> {
    if a.is_empty() || b.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let tree_a = KdTree::build(a);
    let tree_b = KdTree::build(b);
    let a_to_b = crate::thread_pool().install(|| {
        use rayon::prelude::*;
        a.par_iter().map(|&p| tree_b.nearest_sq(p)).sum::<f64>()
    }) / a.len() as f64;
    let b_to_a = crate::thread_pool().install(|| {
        use rayon::prelude::*;
        b.par_iter().map(|&p| tree_a.nearest_sq(p)).sum::<f64>()
    }) / b.len() as f64;
    Ok(a_to_b + b_to_a)
}

/// O(n*m) reference used to validate the k-d tree path.
pub fn chamfer_distance_brute(a: &[Vec3], b: &[Vec3]) -> Result<f64, ChamferError> {
    if a.is_empty() || b.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let min_to = |src: &[Vec3], dst: &[Vec3]| -> f64 {
        src.iter()
            .map(|&p| {
                dst.iter()
                    .map(|&q| dist_sq(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / src.len() as f64
    };
    Ok(min_to(a, b) + min_to(b, a))
}
