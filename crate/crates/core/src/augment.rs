//! Eigen-structure-guided sample generation.
//!
//! An offset is a random combination of a class's global eigenvectors,
//! `β = Σ_m ε_m λ_m ξ_m` with `ε_m ~ N(0, 1)`. Eigenvalues scale the draws
//! directly (they are not square-rooted), so offsets have covariance
//! `V diag(λ²) Vᵀ`. Local samples (and, in the multi-domain case, class
//! prototypes received from other domains) are shifted by such offsets.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::GeometricShape;
use crate::rng::{Purpose, StreamId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    SingleDomain,
    MultiDomain,
}

/// How many samples to generate per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPlan {
    pub mode: AugmentMode,
    /// Single-domain floor on originals plus generated samples.
    pub target_per_class: usize,
    /// Multi-domain Step 1 floor.
    pub step1_target: usize,
    /// Multi-domain Step 2 samples per foreign prototype.
    pub step2_per_prototype: usize,
    /// Use only the leading `r` eigenpairs; `None` uses all of them.
    pub eigen_rank_limit: Option<usize>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            mode: AugmentMode::SingleDomain,
            target_per_class: 2000,
            step1_target: 500,
            step2_per_prototype: 500,
            eigen_rank_limit: None,
        }
    }
}

impl AugmentationPlan {
    pub fn multi_domain() -> Self {
        Self {
            mode: AugmentMode::MultiDomain,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigen_rank_limit == Some(0) {
            return Err(Error::Config("eigen_rank_limit must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where an augmented row came from. The discriminant is the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Provenance {
    Original = 0,
    Step1 = 1,
    Step2 = 2,
}

impl Provenance {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Original),
            1 => Some(Self::Step1),
            2 => Some(Self::Step2),
            _ => None,
        }
    }
}

/// Augmented rows of one class with a provenance tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub rows: Array2<f64>,
    pub provenance: Vec<Provenance>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|&&t| t == tag).count()
    }
}

/// A class mean uploaded by one client, shared with clients of other domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub source_client: usize,
    pub source_domain: String,
    pub mean: Array1<f64>,
}

/// Draws offsets `β` for one shape from one deterministic stream.
pub struct OffsetSampler {
    /// Column `m` is `λ_m ξ_m`.
    scaled_basis: Array2<f64>,
    rng: ChaCha8Rng,
}

impl OffsetSampler {
    pub fn new(shape: &GeometricShape, rank_limit: Option<usize>, stream: StreamId) -> Result<Self> {
        let p = shape.dim();
        if p == 0 || shape.eigenvectors.dim() != (p, p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: shape.eigenvectors.nrows(),
            });
        }
        if shape.eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidData(format!(
                "shape of class {} has invalid eigenvalues",
                shape.class_id
            )));
        }
        let rank = match rank_limit {
            Some(0) => return Err(Error::Config("eigen_rank_limit must be at least 1".into())),
            Some(r) => r.min(p),
            None => p,
        };
        let mut scaled_basis = shape.eigenvectors.slice(s![.., ..rank]).to_owned();
        for (mut col, &lambda) in scaled_basis.axis_iter_mut(Axis(1)).zip(shape.eigenvalues.iter()) {
            col *= lambda;
        }
        Ok(Self {
            scaled_basis,
            rng: stream.rng(),
        })
    }

    pub fn dim(&self) -> usize {
        self.scaled_basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.scaled_basis.ncols()
    }

    /// One offset vector.
    pub fn sample(&mut self) -> Array1<f64> {
        self.sample_many(1).row(0).to_owned()
    }

    /// `count` offsets as rows. Equivalent to `count` calls of [`sample`](Self::sample).
    pub fn sample_many(&mut self, count: usize) -> Array2<f64> {
        let rank = self.rank();
        let mut eps = Array2::<f64>::zeros((count, rank));
        for x in eps.iter_mut() {
            *x = StandardNormal.sample(&mut self.rng);
        }
        eps.dot(&self.scaled_basis.t())
    }
}

/// Per-anchor generation counts: `deficit` split round-robin over `anchors`,
/// remainder to the earliest ones.
pub fn round_robin_quotas(anchors: usize, deficit: usize) -> Vec<usize> {
    if anchors == 0 {
        return Vec::new();
    }
    let base = deficit / anchors;
    let extra = deficit % anchors;
    (0..anchors).map(|j| base + usize::from(j < extra)).collect()
}

fn check_dim(samples: ArrayView2<f64>, shape: &GeometricShape) -> Result<()> {
    if samples.ncols() != shape.dim() {
        return Err(Error::DimensionMismatch {
            expected: shape.dim(),
            actual: samples.ncols(),
        });
    }
    Ok(())
}

/// Generated rows only: for each anchor `j`, `quotas[j]` copies of
/// `anchor_j + β`, anchors in order.
fn generate_around(
    anchors: ArrayView2<f64>,
    quotas: &[usize],
    sampler: &mut OffsetSampler,
) -> Array2<f64> {
    let total: usize = quotas.iter().sum();
    let mut out = sampler.sample_many(total);
    let mut row = 0;
    for (anchor, &q) in anchors.outer_iter().zip(quotas) {
        for mut r in out.slice_mut(s![row..row + q, ..]).outer_iter_mut() {
            r += &anchor;
        }
        row += q;
    }
    out
}

fn step1(
    samples: ArrayView2<f64>,
    shape: &GeometricShape,
    target: usize,
    rank_limit: Option<usize>,
    stream: StreamId,
) -> Result<Array2<f64>> {
    let n = samples.nrows();
    let deficit = target.saturating_sub(n);
    if deficit == 0 {
        return Ok(Array2::zeros((0, samples.ncols())));
    }
    let mut sampler = OffsetSampler::new(shape, rank_limit, stream)?;
    Ok(generate_around(samples, &round_robin_quotas(n, deficit), &mut sampler))
}

fn stack(parts: &[(ArrayView2<f64>, Provenance)], dim: usize) -> AugmentedSet {
    let total: usize = parts.iter().map(|(m, _)| m.nrows()).sum();
    let mut rows = Array2::zeros((total, dim));
    let mut provenance = Vec::with_capacity(total);
    let mut at = 0;
    for (m, tag) in parts {
        rows.slice_mut(s![at..at + m.nrows(), ..]).assign(m);
        provenance.extend(std::iter::repeat_n(*tag, m.nrows()));
        at += m.nrows();
    }
    AugmentedSet { rows, provenance }
}

/// Single-domain augmentation of one class on one client.
///
/// Returns the originals (unchanged, first) followed by generated samples
/// `x_j + β` until the class holds `max(n, target_per_class)` rows. Quotas
/// per original differ by at most one. A class with no local samples has no
/// anchor and is rejected with [`Error::EmptyClass`].
pub fn augment_single_domain(
    samples: ArrayView2<f64>,
    shape: &GeometricShape,
    plan: &AugmentationPlan,
    stream: StreamId,
) -> Result<AugmentedSet> {
    if plan.mode != AugmentMode::SingleDomain {
        return Err(Error::Config("single-domain augmentation needs a single_domain plan".into()));
    }
    plan.validate()?;
    check_dim(samples, shape)?;
    if samples.nrows() == 0 {
        return Err(Error::EmptyClass {
            class_id: shape.class_id,
        });
    }
    let generated = step1(samples, shape, plan.target_per_class, plan.eigen_rank_limit, stream)?;
    Ok(stack(
        &[
            (samples, Provenance::Original),
            (generated.view(), Provenance::Step1),
        ],
        samples.ncols(),
    ))
}

/// Multi-domain augmentation of one class on one client.
///
/// Step 1 fills local samples up to `step1_target` exactly as the
/// single-domain case does. Step 2 appends `step2_per_prototype` samples
/// `μ' + β` around every foreign prototype, in the given order. Step 1 and
/// Step 2 draw from separate substreams of `stream`, so disabling Step 2
/// leaves Step 1 samples unchanged. A client without local samples of the
/// class skips Step 1 and still runs Step 2.
pub fn augment_multi_domain(
    samples: ArrayView2<f64>,
    shared_shape: &GeometricShape,
    prototypes: &[Prototype],
    plan: &AugmentationPlan,
    stream: StreamId,
) -> Result<AugmentedSet> {
    if plan.mode != AugmentMode::MultiDomain {
        return Err(Error::Config("multi-domain augmentation needs a multi_domain plan".into()));
    }
    plan.validate()?;
    check_dim(samples, shared_shape)?;
    let p = shared_shape.dim();
    for proto in prototypes {
        if proto.mean.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: proto.mean.len(),
            });
        }
        if proto.class_id != shared_shape.class_id {
            return Err(Error::InvalidData(format!(
                "prototype of class {} offered for class {}",
                proto.class_id, shared_shape.class_id
            )));
        }
        if proto.mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "prototype from client {} has non-finite entries",
                proto.source_client
            )));
        }
    }

    let step1_stream = StreamId {
        purpose: Purpose::AugmentStep1,
        ..stream
    };
    let step2_stream = StreamId {
        purpose: Purpose::AugmentStep2,
        ..stream
    };

    let local = if samples.nrows() == 0 {
        Array2::zeros((0, p))
    } else {
        step1(samples, shared_shape, plan.step1_target, plan.eigen_rank_limit, step1_stream)?
    };

    let cross = if prototypes.is_empty() || plan.step2_per_prototype == 0 {
        Array2::zeros((0, p))
    } else {
        let mut anchors = Array2::zeros((prototypes.len(), p));
        for (mut row, proto) in anchors.outer_iter_mut().zip(prototypes) {
            row.assign(&proto.mean);
        }
        let quotas = vec![plan.step2_per_prototype; prototypes.len()];
        let mut sampler = OffsetSampler::new(shared_shape, plan.eigen_rank_limit, step2_stream)?;
        generate_around(anchors.view(), &quotas, &mut sampler)
    };

    Ok(stack(
        &[
            (samples, Provenance::Original),
            (local.view(), Provenance::Step1),
            (cross.view(), Provenance::Step2),
        ],
        p,
    ))
}

/// Mean of the rows, or `None` for an empty matrix.
pub fn row_mean(rows: ArrayView2<f64>) -> Option<Array1<f64>> {
    rows.mean_axis(Axis(0))
}

/// Projection coefficients `⟨β, ξ_m⟩ / λ_m` of an offset on the leading
/// eigenvectors whose eigenvalue exceeds `min_lambda`.
pub fn standardized_coordinates(
    offset: ArrayView1<f64>,
    shape: &GeometricShape,
    min_lambda: f64,
) -> Vec<f64> {
    shape
        .eigenvalues
        .iter()
        .zip(shape.eigenvectors.columns())
        .filter(|(l, _)| **l > min_lambda)
        .map(|(l, v)| v.dot(&offset) / l)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_shape, frobenius, GlobalClassStats};
    use ndarray::{array, Array1};

    fn diag_shape(values: &[f64]) -> GeometricShape {
        let p = values.len();
        build_shape(&GlobalClassStats {
            class_id: 0,
            total_count: 10,
            mean: Array1::zeros(p),
            covariance: Array2::from_diag(&Array1::from(values.to_vec())),
        })
        .unwrap()
    }

    fn stream(client: u64) -> StreamId {
        StreamId::new(42, client, 0, Purpose::AugmentStep1)
    }

    fn proto(client: usize, mean: Array1<f64>) -> Prototype {
        Prototype {
            class_id: 0,
            source_client: client,
            source_domain: format!("d{client}"),
            mean,
        }
    }

    #[test]
    fn zero_eigenvalues_give_zero_offsets() {
        let shape = diag_shape(&[0.0, 0.0, 0.0]);
        let mut s = OffsetSampler::new(&shape, None, stream(0)).unwrap();
        for _ in 0..10 {
            assert!(s.sample().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sample_and_sample_many_agree() {
        let shape = diag_shape(&[3.0, 2.0, 1.0]);
        let mut a = OffsetSampler::new(&shape, None, stream(1)).unwrap();
        let mut b = OffsetSampler::new(&shape, None, stream(1)).unwrap();
        let many = a.sample_many(4);
        for row in many.outer_iter() {
            assert_eq!(row.to_owned(), b.sample());
        }
    }

    #[test]
    fn offsets_are_roughly_zero_mean() {
        let shape = diag_shape(&[2.0, 1.0, 0.5, 0.25]);
        let mut s = OffsetSampler::new(&shape, None, stream(2)).unwrap();
        let draws = s.sample_many(40_000);
        let mean = draws.mean_axis(Axis(0)).unwrap();
        // sd of each coordinate is λ; 5 standard errors
        for (m, l) in mean.iter().zip(shape.eigenvalues.iter()) {
            assert!(m.abs() < 5.0 * l / 200.0, "{m} vs λ={l}");
        }
    }

    #[test]
    fn rank_limit_confines_to_leading_subspace() {
        let shape = diag_shape(&[4.0, 3.0, 2.0, 1.0]);
        let mut s = OffsetSampler::new(&shape, Some(2), stream(3)).unwrap();
        let draws = s.sample_many(100);
        assert!(draws.slice(s![.., 2..]).iter().all(|x| x.abs() < 1e-12));
        assert!(OffsetSampler::new(&shape, Some(0), stream(3)).is_err());
    }

    #[test]
    fn quotas_round_robin() {
        assert_eq!(round_robin_quotas(3, 7), vec![3, 2, 2]);
        assert_eq!(round_robin_quotas(1, 1999), vec![1999]);
        assert_eq!(round_robin_quotas(4, 0), vec![0; 4]);
        assert!(round_robin_quotas(0, 5).is_empty());
    }

    #[test]
    fn no_deficit_returns_input() {
        let shape = diag_shape(&[1.0, 1.0]);
        let x = Array2::from_shape_fn((2500, 2), |(i, j)| (i * 2 + j) as f64);
        let out = augment_single_domain(x.view(), &shape, &AugmentationPlan::default(), stream(0))
            .unwrap();
        assert_eq!(out.rows, x);
        assert!(out.provenance.iter().all(|&t| t == Provenance::Original));
    }

    #[test]
    fn single_sample_filled_to_target() {
        let shape = diag_shape(&[0.5, 0.1]);
        let x = array![[1.0, -1.0]];
        let out = augment_single_domain(x.view(), &shape, &AugmentationPlan::default(), stream(0))
            .unwrap();
        assert_eq!(out.len(), 2000);
        assert_eq!(out.count(Provenance::Original), 1);
        assert_eq!(out.count(Provenance::Step1), 1999);
        assert_eq!(out.rows.row(0), x.row(0));
    }

    #[test]
    fn zero_shape_copies_originals() {
        let shape = diag_shape(&[0.0, 0.0]);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let plan = AugmentationPlan {
            target_per_class: 10,
            ..Default::default()
        };
        let out = augment_single_domain(x.view(), &shape, &plan, stream(0)).unwrap();
        assert_eq!(out.len(), 10);
        // quotas 3,3,1 ... round robin: 7 over 3 anchors = 3,2,2
        let expect_anchor = [0, 0, 0, 1, 1, 2, 2];
        for (k, &a) in expect_anchor.iter().enumerate() {
            assert_eq!(out.rows.row(3 + k), x.row(a));
        }
    }

    #[test]
    fn empty_class_rejected() {
        let shape = diag_shape(&[1.0, 1.0]);
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            augment_single_domain(x.view(), &shape, &AugmentationPlan::default(), stream(0)),
            Err(Error::EmptyClass { class_id: 0 })
        ));
    }

    #[test]
    fn wrong_mode_and_dimension_rejected() {
        let shape = diag_shape(&[1.0, 1.0]);
        let x = array![[1.0, 2.0]];
        assert!(augment_single_domain(x.view(), &shape, &AugmentationPlan::multi_domain(), stream(0)).is_err());
        assert!(augment_multi_domain(x.view(), &shape, &[], &AugmentationPlan::default(), stream(0)).is_err());
        let y = array![[1.0, 2.0, 3.0]];
        assert!(matches!(
            augment_single_domain(y.view(), &shape, &AugmentationPlan::default(), stream(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn multi_domain_without_prototypes_is_step1() {
        let shape = diag_shape(&[1.0, 0.5]);
        let x = array![[0.0, 0.0], [1.0, 1.0]];
        let plan = AugmentationPlan::multi_domain();
        let out = augment_multi_domain(x.view(), &shape, &[], &plan, stream(5)).unwrap();
        assert_eq!(out.len(), 500);
        assert_eq!(out.count(Provenance::Step2), 0);
        let single = augment_single_domain(
            x.view(),
            &shape,
            &AugmentationPlan {
                target_per_class: 500,
                ..Default::default()
            },
            StreamId::new(42, 5, 0, Purpose::AugmentStep1),
        )
        .unwrap();
        assert_eq!(out.rows, single.rows);
    }

    #[test]
    fn three_prototypes_give_1500_step2() {
        let shape = diag_shape(&[1.0, 0.5]);
        let x = array![[0.0, 0.0]];
        let protos = vec![
            proto(1, array![5.0, 5.0]),
            proto(2, array![-5.0, 5.0]),
            proto(3, array![0.0, -5.0]),
        ];
        let plan = AugmentationPlan::multi_domain();
        let out = augment_multi_domain(x.view(), &shape, &protos, &plan, stream(0)).unwrap();
        assert_eq!(out.count(Provenance::Step2), 1500);
        assert_eq!(out.len(), 500 + 1500);
        let step2: Vec<usize> = (0..out.len())
            .filter(|&i| out.provenance[i] == Provenance::Step2)
            .collect();
        // first prototype's block is contiguous and centered on it
        let block = out.rows.select(Axis(0), &step2[..500]);
        let m = block.mean_axis(Axis(0)).unwrap();
        assert!((m[0] - 5.0).abs() < 0.2 && (m[1] - 5.0).abs() < 0.2);
    }

    #[test]
    fn step2_toggle_keeps_step1() {
        let shape = diag_shape(&[1.0, 0.5]);
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let protos = vec![proto(1, array![2.0, 2.0])];
        let plan = AugmentationPlan::multi_domain();
        let with = augment_multi_domain(x.view(), &shape, &protos, &plan, stream(7)).unwrap();
        let without = augment_multi_domain(x.view(), &shape, &[], &plan, stream(7)).unwrap();
        assert_eq!(with.rows.slice(s![..500, ..]), without.rows);
    }

    #[test]
    fn multi_domain_with_no_local_samples() {
        let shape = diag_shape(&[1.0, 0.5]);
        let x = Array2::<f64>::zeros((0, 2));
        let protos = vec![proto(1, array![2.0, 2.0]), proto(2, array![1.0, 0.0])];
        let out = augment_multi_domain(x.view(), &shape, &protos, &AugmentationPlan::multi_domain(), stream(0))
            .unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(out.count(Provenance::Step2), 1000);
    }

    #[test]
    fn prototype_validation() {
        let shape = diag_shape(&[1.0, 0.5]);
        let x = array![[0.0, 0.0]];
        let plan = AugmentationPlan::multi_domain();
        let bad_dim = vec![proto(1, array![1.0, 2.0, 3.0])];
        assert!(augment_multi_domain(x.view(), &shape, &bad_dim, &plan, stream(0)).is_err());
        let mut wrong_class = proto(1, array![1.0, 2.0]);
        wrong_class.class_id = 3;
        assert!(augment_multi_domain(x.view(), &shape, &[wrong_class], &plan, stream(0)).is_err());
    }

    #[test]
    fn deterministic_and_stream_sensitive() {
        let shape = diag_shape(&[1.0, 0.3, 0.1]);
        let x = array![[0.0, 1.0, 2.0], [1.0, 1.0, 1.0]];
        let plan = AugmentationPlan {
            target_per_class: 50,
            ..Default::default()
        };
        let a = augment_single_domain(x.view(), &shape, &plan, stream(1)).unwrap();
        let b = augment_single_domain(x.view(), &shape, &plan, stream(1)).unwrap();
        let c = augment_single_domain(x.view(), &shape, &plan, stream(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn empirical_offset_covariance_matches_lambda_squared() {
        let shape = diag_shape(&[2.0, 1.0, 0.5]);
        let mut s = OffsetSampler::new(&shape, None, stream(9)).unwrap();
        let draws = s.sample_many(50_000);
        let cov = draws.t().dot(&draws) / draws.nrows() as f64;
        let target = Array2::from_diag(&shape.eigenvalues.mapv(|l| l * l));
        let rel = frobenius((&cov - &target).view()) / frobenius(target.view());
        assert!(rel < 0.05, "rel = {rel}");
    }

    #[test]
    fn standardized_coordinates_skip_tiny() {
        let shape = diag_shape(&[2.0, 0.0]);
        let c = standardized_coordinates(array![4.0, 1.0].view(), &shape, 1e-6);
        assert_eq!(c, vec![2.0]);
        assert!(row_mean(Array2::<f64>::zeros((0, 2)).view()).is_none());
    }
}
