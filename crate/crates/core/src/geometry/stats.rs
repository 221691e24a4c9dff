use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::symmetrize;
use crate::{Error, Result};

/// What one client uploads for one class: sample count, mean and the
/// population-normalized covariance of its local embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: u32,
    pub count: usize,
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl ClassStats {
    /// Placeholder for a class the client does not hold.
    pub fn empty(class_id: u32, dim: usize) -> Self {
        Self {
            class_id,
            count: 0,
            mean: Array1::zeros(dim),
            covariance: Array2::zeros((dim, dim)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Server-side statistics of one class over every contributing client.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalClassStats {
    pub class_id: u32,
    pub total_count: usize,
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl GlobalClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl From<ClassStats> for GlobalClassStats {
    fn from(s: ClassStats) -> Self {
        Self {
            class_id: s.class_id,
            total_count: s.count,
            mean: s.mean,
            covariance: s.covariance,
        }
    }
}

/// Mean and `1/n`-normalized covariance of the rows of `samples`.
///
/// Zero rows yield the empty placeholder. Any non-finite entry is rejected
/// with the offending row and column.
pub fn compute_class_stats(class_id: u32, samples: ArrayView2<f64>) -> Result<ClassStats> {
    let (n, p) = samples.dim();
    if p == 0 {
        return Err(Error::InvalidData("embedding dimension must be at least 1".into()));
    }
    for (row, sample) in samples.outer_iter().enumerate() {
        if let Some(col) = sample.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
    }
    if n == 0 {
        return Ok(ClassStats::empty(class_id, p));
    }

    let mean = samples.sum_axis(Axis(0)) / n as f64;
    let centered = &samples - &mean.view().insert_axis(Axis(0));
    let mut covariance = centered.t().dot(&centered) / n as f64;
    symmetrize(&mut covariance);
    Ok(ClassStats {
        class_id,
        count: n,
        mean,
        covariance,
    })
}

/// Merge per-client statistics of one class into the pooled statistics.
///
/// With `N = Σ n_k` and `μ = Σ n_k μ_k / N`:
///
/// ```text
/// Σ = (Σ_k n_k Σ_k + Σ_k n_k (μ_k − μ)(μ_k − μ)ᵀ) / N
/// ```
///
/// which is exactly the covariance of the union of all client samples.
/// Empty locals are skipped.
pub fn aggregate_global_stats(locals: &[ClassStats]) -> Result<GlobalClassStats> {
    let first = locals
        .first()
        .ok_or_else(|| Error::InvalidData("no local statistics to aggregate".into()))?;
    let class_id = first.class_id;
    let p = first.dim();
    for s in locals {
        if s.class_id != class_id {
            return Err(Error::InvalidData(format!(
                "mixed classes in aggregation: {} and {}",
                class_id, s.class_id
            )));
        }
        if s.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: s.dim(),
            });
        }
        if s.covariance.dim() != (p, p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: s.covariance.nrows(),
            });
        }
    }

    let present: Vec<&ClassStats> = locals.iter().filter(|s| !s.is_empty()).collect();
    let total: usize = present.iter().map(|s| s.count).sum();
    if total == 0 {
        return Err(Error::InvalidData(format!(
            "class {class_id}: every client reported zero samples"
        )));
    }
    let total_f = total as f64;

    let mut mean = Array1::<f64>::zeros(p);
    for s in &present {
        mean.scaled_add(s.count as f64, &s.mean);
    }
    mean /= total_f;

    let mut covariance = Array2::<f64>::zeros((p, p));
    for s in &present {
        let w = s.count as f64;
        covariance.scaled_add(w, &s.covariance);
        let shift = &s.mean - &mean;
        let col = shift.view().insert_axis(ndarray::Axis(1));
        let row = shift.view().insert_axis(ndarray::Axis(0));
        covariance.scaled_add(w, &col.dot(&row));
    }
    covariance /= total_f;
    symmetrize(&mut covariance);

    Ok(GlobalClassStats {
        class_id,
        total_count: total,
        mean,
        covariance,
    })
}
