//! Long-range sparse-voxel camera-LiDAR fusion.
//!
//! The pipeline keeps every 3D representation sparse so memory scales with
//! occupied voxels rather than range: LiDAR and lifted camera features meet
//! in one hash-indexed grid, a multi-scale sparse encoder builds a feature
//! pyramid, past frames are warped by ego motion plus per-voxel velocity and
//! attended through a sparse 3D window, and a 4D occupancy/velocity decoder
//! trained purely from LiDAR rays forecasts future point clouds.
//!
//! A synthetic highway simulator supplies ground truth for every signal at
//! desk scale; see the `examples/` directory for one runnable walkthrough per
//! capability, or the `svfuse` binary for the end-to-end train/benchmark
//! workflow.

pub mod bench;
pub mod chamfer;
pub mod cli;
pub mod cloud;
pub mod config;
pub mod decoder;
pub mod depth;
pub mod fuse;
pub mod geom;
pub mod grid;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod temporal;
pub mod train;

use std::sync::OnceLock;

static THREAD_POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Worker pool capped by the `SVFUSE_THREADS` environment variable
/// (default: hardware parallelism). All parallel sections reduce in a fixed
/// order, so results do not depend on the worker count.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    THREAD_POOL.get_or_init(|| {
        let threads = std::env::var("SVFUSE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool")
    })
}
