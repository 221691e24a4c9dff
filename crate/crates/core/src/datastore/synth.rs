//! Synthetic multi-domain embeddings with known class geometry.
//!
//! Cell `(domain d, class c)` draws `mean_{d,c} + Σ_m sqrt(s_m) η_m v_{c,m}`
//! with `η ~ N(0, I)`. With `shared_basis` the orthonormal basis `v_c` is
//! the same in every domain, so same-class shapes agree across domains
//! while their positions differ.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DomainSplit, EmbeddingDataset, LabeledEmbeddings};
use crate::rng::{substream, Purpose};
use crate::{Error, Result};

/// Geometric eigenvalue decay `s_m = scale · decay^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spectrum {
    pub scale: f64,
    pub decay: f64,
}

impl Spectrum {
    pub fn values(&self, dim: usize) -> Array1<f64> {
        Array1::from_shape_fn(dim, |m| self.scale * self.decay.powi(m as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub domains: usize,
    pub spectrum: Spectrum,
    pub shared_basis: bool,
    /// Expected norm of each class center.
    pub class_mean_scale: f64,
    /// Expected norm of the shift shared by all classes of a domain.
    pub domain_shift_scale: f64,
    /// Expected norm of the extra per-(domain, class) shift.
    pub domain_class_shift_scale: f64,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dim: 64,
            classes: 10,
            domains: 1,
            spectrum: Spectrum {
                scale: 1.0,
                decay: 0.8,
            },
            shared_basis: true,
            class_mean_scale: 3.0,
            domain_shift_scale: 0.0,
            domain_class_shift_scale: 0.0,
            train_per_cell: 2000,
            test_per_cell: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.classes == 0 {
            return bad("classes must be at least 1");
        }
        if self.domains == 0 {
            return bad("domains must be at least 1");
        }
        if !(self.spectrum.scale > 0.0 && self.spectrum.scale.is_finite()) {
            return bad("spectrum scale must be positive");
        }
        if !(self.spectrum.decay > 0.0 && self.spectrum.decay <= 1.0) {
            return bad("spectrum decay must lie in (0, 1]");
        }
        for (name, v) in [
            ("class_mean_scale", self.class_mean_scale),
            ("domain_shift_scale", self.domain_shift_scale),
            ("domain_class_shift_scale", self.domain_class_shift_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn domain_name(&self, d: usize) -> String {
        format!("domain{d}")
    }
}

/// The generator's latent parameters: `bases[d][c]` (columns orthonormal),
/// `means[d][c]` and the shared spectrum.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub spectrum: Array1<f64>,
    pub bases: Vec<Vec<Array2<f64>>>,
    pub means: Vec<Vec<Array1<f64>>>,
}

impl SynthTruth {
    /// `V diag(s) Vᵀ` of one cell.
    pub fn covariance(&self, domain: usize, class: usize) -> Array2<f64> {
        let v = &self.bases[domain][class];
        let scaled = v * &self.spectrum.view().insert_axis(Axis(0));
        scaled.dot(&v.t())
    }
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize, norm: f64) -> Array1<f64> {
    let sd = norm / (dim as f64).sqrt();
    Array1::from_shape_fn(dim, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

/// Orthonormal columns from Gaussian columns via Gram-Schmidt, applied twice.
fn random_orthonormal<R: Rng>(rng: &mut R, dim: usize) -> Array2<f64> {
    let mut q: Array2<f64> = Array2::from_shape_fn((dim, dim), |_| StandardNormal.sample(rng));
    for j in 0..dim {
        for _ in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-proj, &qk);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    q
}

pub fn synth_ground_truth(spec: &SyntheticSpec) -> Result<SynthTruth> {
    spec.validate()?;
    let (p, classes, domains) = (spec.dim, spec.classes, spec.domains);
    let spectrum = spec.spectrum.values(p);

    let mut bases = vec![Vec::with_capacity(classes); domains];
    for c in 0..classes {
        let shared = random_orthonormal(
            &mut substream(spec.seed, &[Purpose::SynthBasis as u64, c as u64]),
            p,
        );
        for (d, row) in bases.iter_mut().enumerate() {
            let basis = if spec.shared_basis || d == 0 {
                shared.clone()
            } else {
                random_orthonormal(
                    &mut substream(spec.seed, &[Purpose::SynthBasis as u64, c as u64, d as u64]),
                    p,
                )
            };
            row.push(basis);
        }
    }

    let mut mean_rng = substream(spec.seed, &[Purpose::SynthMeans as u64]);
    let class_means: Vec<Array1<f64>> = (0..classes)
        .map(|_| gaussian_vector(&mut mean_rng, p, spec.class_mean_scale))
        .collect();
    let mut means = Vec::with_capacity(domains);
    for _ in 0..domains {
        let domain_shift = gaussian_vector(&mut mean_rng, p, spec.domain_shift_scale);
        let row: Vec<Array1<f64>> = class_means
            .iter()
            .map(|m| m + &domain_shift + &gaussian_vector(&mut mean_rng, p, spec.domain_class_shift_scale))
            .collect();
        means.push(row);
    }

    Ok(SynthTruth {
        spectrum,
        bases,
        means,
    })
}

fn draw_cell(
    truth: &SynthTruth,
    seed: u64,
    domain: usize,
    class: usize,
    split: u64,
    n: usize,
) -> Array2<f64> {
    let p = truth.spectrum.len();
    let mut rng = substream(
        seed,
        &[Purpose::SynthSamples as u64, domain as u64, class as u64, split],
    );
    let eta = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
    let scales = truth.spectrum.mapv(f64::sqrt);
    let factor = &truth.bases[domain][class] * &scales.view().insert_axis(Axis(0));
    let mut x = eta.dot(&factor.t());
    x += &truth.means[domain][class].view().insert_axis(Axis(0));
    x
}

/// Generate the dataset described by `spec`. Rows are grouped by class in
/// ascending order within every split.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    let truth = synth_ground_truth(spec)?;
    let p = spec.dim;
    let mut domains = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let mut splits = Vec::with_capacity(2);
        for (split, per_cell) in [(0u64, spec.train_per_cell), (1u64, spec.test_per_cell)] {
            let n = per_cell * spec.classes;
            let mut rows = Array2::<f32>::zeros((n, p));
            let mut labels = Vec::with_capacity(n);
            for c in 0..spec.classes {
                let cell = draw_cell(&truth, spec.seed, d, c, split, per_cell);
                let start = c * per_cell;
                rows.slice_mut(ndarray::s![start..start + per_cell, ..])
                    .assign(&cell.mapv(|x| x as f32));
                labels.extend(std::iter::repeat_n(c as u32, per_cell));
            }
            splits.push(LabeledEmbeddings {
                rows,
                labels,
                provenance: None,
            });
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        domains.push(DomainSplit {
            domain: spec.domain_name(d),
            train,
            test,
        });
    }
    Ok(EmbeddingDataset {
        name: spec.name.clone(),
        dim: p,
        classes: spec.classes,
        domains,
    })
}
