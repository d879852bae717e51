//! Fixtures shared by the kernel benchmarks.

use modgap_core::numerics::normalize_rows;
use modgap_core::{Matrix, MultimodalBatch, Rng};

/// Random unit-norm batch with `m` modalities of `n` rows in `d` dimensions.
pub fn unit_batch(m: usize, n: usize, d: usize, seed: u64) -> MultimodalBatch {
    let mut rng = Rng::new(seed);
    let mods = (0..m)
        .map(|_| normalize_rows(&rng.normal_matrix(n, d, 1.0)).expect("gaussian rows are nonzero"))
        .collect();
    let labels = (0..n).map(|i| i % 10).collect();
    MultimodalBatch::new(mods, Some(labels)).expect("shapes agree")
}

/// Gaussian blobs around `k` centres, `per` points each.
pub fn blobs(k: usize, per: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let centres = rng.normal_matrix(k, d, 3.0);
    let noise = rng.normal_matrix(k * per, d, 1.0);
    Matrix::from_fn(k * per, d, |i, j| centres.get(i / per, j) + noise.get(i, j))
}
