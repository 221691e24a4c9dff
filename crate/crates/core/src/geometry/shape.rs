use ndarray::{Array1, Array2};

use super::{symmetric_eigendecompose, GlobalClassStats};
use crate::{Error, Result};

/// Number of leading eigenvectors compared by [`shape_similarity`] by default.
pub const DEFAULT_SIMILARITY_TOP: usize = 5;

/// Eigen-structure of a class covariance: eigenvalues sorted descending and
/// clamped at zero, unit eigenvectors in the columns of `eigenvectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricShape {
    pub class_id: u32,
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl GeometricShape {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Checks the structural invariants: matching sizes, non-increasing
    /// non-negative eigenvalues, orthonormal columns.
    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if p == 0 || self.eigenvectors.dim() != (p, p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: self.eigenvectors.nrows(),
            });
        }
        if self.eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0)
            || self.eigenvectors.iter().any(|x| !x.is_finite())
        {
            return Err(Error::InvalidData(format!(
                "shape of class {} has negative or non-finite entries",
                self.class_id
            )));
        }
        if self.eigenvalues.windows(2).into_iter().any(|w| w[0] < w[1]) {
            return Err(Error::InvalidData(format!(
                "shape of class {} has unsorted eigenvalues",
                self.class_id
            )));
        }
        let gram = self.eigenvectors.t().dot(&self.eigenvectors) - Array2::<f64>::eye(p);
        let err = super::frobenius(gram.view());
        if err > 1e-8 {
            return Err(Error::InvalidData(format!(
                "shape of class {} is not orthonormal (‖VᵀV − I‖ = {err:e})",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// Eigendecompose the global covariance of a class into its shape.
///
/// Low-rank covariances produce tiny negative eigenvalues from rounding;
/// every negative eigenvalue is clamped to zero.
pub fn build_shape(stats: &GlobalClassStats) -> Result<GeometricShape> {
    let eig = symmetric_eigendecompose(stats.covariance.view())?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = -1e-8 * top;
    let mut eigenvalues = eig.values;
    for l in eigenvalues.iter_mut() {
        if *l < floor {
            log::warn!(
                "class {}: eigenvalue {l:e} below clamping tolerance {floor:e}",
                stats.class_id
            );
        }
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(GeometricShape {
        class_id: stats.class_id,
        eigenvalues,
        eigenvectors: eig.vectors,
    })
}

/// Sum of `|⟨ξ_a^i, ξ_b^i⟩|` over the `top` leading eigenvectors, paired
/// by rank. Ranges over `[0, top]`.
///
/// Under tied eigenvalues the pairing depends on the basis chosen within the
/// degenerate subspace; no best-match assignment is attempted.
pub fn shape_similarity(a: &GeometricShape, b: &GeometricShape, top: usize) -> Result<f64> {
    let p = a.dim();
    if b.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: b.dim(),
        });
    }
    if top > p {
        return Err(Error::InvalidData(format!(
            "similarity over top {top} eigenvectors needs dimension ≥ {top}, got {p}"
        )));
    }
    let s = (0..top)
        .map(|i| a.eigenvectors.column(i).dot(&b.eigenvectors.column(i)).abs())
        .sum::<f64>();
    Ok(s.min(top as f64))
}

/// Class-by-class similarity between the shapes of two domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub domain_a: String,
    pub domain_b: String,
    /// Entry `(i, j)` compares class `i` of `domain_a` with class `j` of
    /// `domain_b`. Rows or columns of missing classes hold NaN.
    pub values: Array2<f64>,
    /// `(domain, class)` pairs that had no shape.
    pub missing: Vec<(String, u32)>,
}

impl SimilarityMatrix {
    /// Means of the finite diagonal and off-diagonal entries.
    pub fn diagonal_means(&self) -> (f64, f64) {
        let mut diag = (0.0, 0usize);
        let mut off = (0.0, 0usize);
        for ((i, j), &v) in self.values.indexed_iter() {
            if !v.is_finite() {
                continue;
            }
            let slot = if i == j { &mut diag } else { &mut off };
            slot.0 += v;
            slot.1 += 1;
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        (mean(diag), mean(off))
    }
}

/// Similarity matrices between every pair of domains (`a` before `b` in
/// input order), or the self-similarity matrix when only one domain is
/// given. `shapes_by_domain[d].1[c]` is the shape of class `c` in domain
/// `d`; `None` marks a missing class, whose row (or column) is filled with
/// NaN and reported in `missing`.
pub fn cross_domain_similarity_matrix(
    shapes_by_domain: &[(String, Vec<Option<GeometricShape>>)],
    top: usize,
) -> Result<Vec<SimilarityMatrix>> {
    let Some((_, first)) = shapes_by_domain.first() else {
        return Ok(Vec::new());
    };
    let classes = first.len();
    for (domain, shapes) in shapes_by_domain {
        if shapes.len() != classes {
            return Err(Error::InvalidData(format!(
                "domain {domain} covers {} classes, expected {classes}",
                shapes.len()
            )));
        }
    }

    let mut pairs = Vec::new();
    if shapes_by_domain.len() == 1 {
        pairs.push((0, 0));
    } else {
        for a in 0..shapes_by_domain.len() {
            for b in (a + 1)..shapes_by_domain.len() {
                pairs.push((a, b));
            }
        }
    }

    let mut out = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let (name_a, shapes_a) = &shapes_by_domain[a];
        let (name_b, shapes_b) = &shapes_by_domain[b];
        let mut values = Array2::from_elem((classes, classes), f64::NAN);
        let mut missing = Vec::new();
        for (c, s) in shapes_a.iter().enumerate() {
            if s.is_none() {
                missing.push((name_a.clone(), c as u32));
            }
        }
        if a != b {
            for (c, s) in shapes_b.iter().enumerate() {
                if s.is_none() {
                    missing.push((name_b.clone(), c as u32));
                }
            }
        }
        for (i, sa) in shapes_a.iter().enumerate() {
            let Some(sa) = sa else { continue };
            for (j, sb) in shapes_b.iter().enumerate() {
                let Some(sb) = sb else { continue };
                values[[i, j]] = shape_similarity(sa, sb, top)?;
            }
        }
        if !missing.is_empty() {
            log::warn!("similarity {name_a} vs {name_b}: missing classes {missing:?}");
        }
        out.push(SimilarityMatrix {
            domain_a: name_a.clone(),
            domain_b: name_b.clone(),
            values,
            missing,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{aggregate_global_stats, compute_class_stats};
    use ndarray::{array, concatenate, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape_from_diag(values: &[f64]) -> GeometricShape {
        let stats = GlobalClassStats {
            class_id: 0,
            total_count: 1,
            mean: Array1::zeros(values.len()),
            covariance: Array2::from_diag(&Array1::from(values.to_vec())),
        };
        build_shape(&stats).unwrap()
    }

    fn random_shape(p: usize, seed: u64) -> GeometricShape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((3 * p, p), |_| rng.random_range(-1.0..1.0));
        let s = compute_class_stats(0, x.view()).unwrap();
        build_shape(&s.into()).unwrap()
    }

    #[test]
    fn zero_covariance_shape() {
        let s = shape_from_diag(&[0.0, 0.0, 0.0]);
        assert!(s.eigenvalues.iter().all(|&l| l == 0.0));
        s.validate().unwrap();
    }

    #[test]
    fn diagonal_shape() {
        let s = shape_from_diag(&[3.0, 2.0, 1.0]);
        assert_eq!(s.eigenvalues.to_vec(), vec![3.0, 2.0, 1.0]);
        assert_eq!(s.eigenvectors, Array2::<f64>::eye(3));
    }

    #[test]
    fn negative_noise_is_clamped() {
        let stats = GlobalClassStats {
            class_id: 1,
            total_count: 2,
            mean: Array1::zeros(2),
            covariance: array![[1.0, 0.0], [0.0, -1e-17]],
        };
        let s = build_shape(&stats).unwrap();
        assert_eq!(s.eigenvalues.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn aggregated_shape_equals_pooled_shape() {
        let a = array![[0.0, 0.0], [2.0, 0.0]];
        let b = array![[0.0, 2.0]];
        let pooled = concatenate![Axis(0), a, b];
        let g = aggregate_global_stats(&[
            compute_class_stats(0, a.view()).unwrap(),
            compute_class_stats(0, b.view()).unwrap(),
        ])
        .unwrap();
        let via_agg = build_shape(&g).unwrap();
        let via_pool = build_shape(&compute_class_stats(0, pooled.view()).unwrap().into()).unwrap();
        assert!((&via_agg.eigenvalues - &via_pool.eigenvalues).iter().all(|d| d.abs() < 1e-14));
        assert!((&via_agg.eigenvectors - &via_pool.eigenvectors).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn self_similarity_is_top() {
        let s = random_shape(8, 3);
        assert!((shape_similarity(&s, &s, 5).unwrap() - 5.0).abs() < 1e-9);
        assert!((shape_similarity(&s, &s, 8).unwrap() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn sign_flip_invariance() {
        let a = random_shape(8, 4);
        let b = random_shape(8, 5);
        let mut flipped = b.clone();
        flipped.eigenvectors.column_mut(2).mapv_inplace(|x| -x);
        assert_eq!(
            shape_similarity(&a, &b, 5).unwrap(),
            shape_similarity(&a, &flipped, 5).unwrap()
        );
    }

    #[test]
    fn orthogonal_top_vectors_give_zero() {
        let a = shape_from_diag(&[10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let b = shape_from_diag(&[5.0, 4.0, 3.0, 2.0, 1.0, 10.0, 9.0, 8.0, 7.0, 6.0]);
        assert!(shape_similarity(&a, &b, 5).unwrap().abs() < 1e-9);
    }

    #[test]
    fn similarity_errors() {
        let a = random_shape(4, 1);
        let b = random_shape(6, 2);
        assert!(matches!(
            shape_similarity(&a, &b, 3),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(shape_similarity(&a, &a, 5).is_err());
    }

    #[test]
    fn identical_domains_have_top_on_diagonal() {
        let shapes: Vec<_> = (0..3).map(|c| Some(random_shape(8, 10 + c))).collect();
        let m = cross_domain_similarity_matrix(
            &[("a".into(), shapes.clone()), ("b".into(), shapes)],
            5,
        )
        .unwrap();
        assert_eq!(m.len(), 1);
        for i in 0..3 {
            assert!((m[0].values[[i, i]] - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_single_domain() {
        let m = cross_domain_similarity_matrix(&[("only".into(), vec![Some(random_shape(6, 1))])], 5)
            .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].values.dim(), (1, 1));
        assert_eq!(m[0].domain_a, m[0].domain_b);
    }

    #[test]
    fn missing_class_is_nan_and_reported() {
        let a = vec![Some(random_shape(6, 1)), None];
        let b = vec![Some(random_shape(6, 2)), Some(random_shape(6, 3))];
        let m = cross_domain_similarity_matrix(&[("a".into(), a), ("b".into(), b)], 5).unwrap();
        assert!(m[0].values.row(1).iter().all(|v| v.is_nan()));
        assert!(m[0].values[[0, 1]].is_finite());
        assert_eq!(m[0].missing, vec![("a".to_string(), 1)]);
        let bad = cross_domain_similarity_matrix(
            &[("a".into(), vec![None]), ("b".into(), vec![None, None])],
            5,
        );
        assert!(bad.is_err());
    }
}
