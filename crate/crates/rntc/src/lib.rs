//! Residual neural terminal constraint MPC.
//!
//! End-to-end pipeline for safe local planning among moving disk obstacles:
//! ground-truth safe sets from Hamilton-Jacobi reachability, a hypernetwork
//! that emits the parameters of a small residual network subtracted from the
//! analytic signed distance function, and a multiple-shooting MPC whose
//! terminal constraint is the resulting value-function estimate. Includes
//! dataset synthesis, training, and a closed-loop corridor benchmark against
//! SDF and DCBF baselines.

pub mod config;
pub mod dataset;
pub mod geometry;
pub mod hj;
pub mod neural;

/// Build a rayon pool with `workers` threads (0 = one per core). Modules
/// that parallelize accept an explicit worker count so `--workers 1` gives
/// the deterministic reference behavior end to end.
pub(crate) fn worker_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("rayon pool construction cannot fail with these settings")
}
