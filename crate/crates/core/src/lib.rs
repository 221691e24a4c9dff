//! Deterministic federated-learning simulator built around geometry-guided
//! embedding augmentation.
//!
//! Clients upload only per-class `(count, mean, covariance)` triples. The
//! server merges them into the exact pooled covariance of every class,
//! eigendecomposes it, and broadcasts the resulting [`GeometricShape`]s.
//! Clients then generate synthetic embeddings along those eigen-directions
//! before a linear classifier is trained with FedAvg.
//!
//! Module map:
//!
//! - [`geometry`]: class statistics, covariance aggregation, eigendecomposition, shape similarity
//! - [`augment`]: offset sampling and single-/multi-domain augmentation
//! - [`partition`]: Dirichlet label skew, domain-per-client and LDS partitions
//! - [`datastore`]: `EMB1` containers, manifests and the synthetic generator
//! - [`model`]: linear softmax classifier and momentum SGD
//! - [`federation`]: the end-to-end protocol
//! - [`report`]: metrics, CSV and JSON outputs

pub mod augment;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod federation;
pub mod geometry;
pub mod model;
pub mod partition;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
pub use geometry::{ClassStats, GeometricShape, GlobalClassStats};
