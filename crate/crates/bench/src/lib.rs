//! Fixtures shared by the benchmarks.

use graformer::data::{generate_synthetic, SyntheticCamera};
use graformer::{DenseMatrix, SkeletonGraph, Tensor};

/// `(inputs, targets)` for `n` synthetic human-16 samples.
pub fn pose_batch(n: usize, seed: u64) -> (Tensor, Tensor) {
    generate_synthetic(
        &SkeletonGraph::human16(),
        n,
        seed,
        &SyntheticCamera::default(),
    )
    .expect("synthetic batch")
    .all()
}

/// Deterministic dense matrix with entries in `[-1, 1)`.
pub fn filled(rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919) % 2000) as f64 / 1000.0 - 1.0)
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("matching size")
}
