//! Per-class statistics, exact global covariance aggregation, symmetric
//! eigendecomposition and geometric-shape similarity.
//!
//! All functions here are pure; per-class work is independent and can be
//! spread over threads by the caller.

mod eigen;
mod shape;
mod stats;

pub use eigen::{symmetric_eigendecompose, Eigen};
pub use shape::{
    build_shape, cross_domain_similarity_matrix, shape_similarity, GeometricShape,
    SimilarityMatrix, DEFAULT_SIMILARITY_TOP,
};
pub use stats::{aggregate_global_stats, compute_class_stats, ClassStats, GlobalClassStats};

use ndarray::{Array2, ArrayView2};

/// Largest absolute difference between `a[i, j]` and `a[j, i]`, with its location.
pub(crate) fn max_asymmetry(a: ArrayView2<f64>) -> (f64, usize, usize) {
    let n = a.nrows();
    let mut worst = (0.0, 0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a[[i, j]] - a[[j, i]]).abs();
            if d > worst.0 || d.is_nan() {
                worst = (d, i, j);
                if d.is_nan() {
                    return worst;
                }
            }
        }
    }
    worst
}

/// `(A + Aᵀ) / 2`, exact symmetry afterwards.
pub(crate) fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

/// Frobenius norm.
pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
