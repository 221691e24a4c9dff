//! End-to-end protocol: local statistics → global shapes → augmentation →
//! rounds of local training and FedAvg → per-domain evaluation.
//!
//! Geometry and augmentation run once, before the first round, on the
//! original client samples. Rounds are sequential; within a round clients
//! train in parallel on the current rayon pool and updates are reduced in a
//! canonical order, so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_multi_domain, augment_single_domain, AugmentMode, AugmentationPlan, Provenance, Prototype,
};
use crate::datastore::{EmbeddingDataset, LabeledEmbeddings};
use crate::geometry::{aggregate_global_stats, build_shape, compute_class_stats, ClassStats, GeometricShape};
use crate::model::{cross_entropy, evaluate_top1, loss_and_grad, sgd_step, LinearClassifierParams, SgdConfig};
use crate::partition::{build_partition, ClientShard, PartitionSpec};
use crate::report::StdKind;
use crate::rng::{substream, Purpose, StreamId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Fedavg,
}

/// Which sample count a client reports as its FedAvg weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeighting {
    /// Size of the (augmented) training set the client actually used.
    #[default]
    Augmented,
    /// Number of original local samples.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset manifest, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// The partition seed is replaced by `seed` when a run starts.
    pub partition: PartitionSpec,
    pub augmentation: AugmentationPlan,
    pub sgd: SgdConfig,
    pub rounds: usize,
    pub local_rounds: usize,
    pub aggregator: AggregatorKind,
    pub ggeur_enabled: bool,
    pub step2_enabled: bool,
    pub fedavg_weighting: FedAvgWeighting,
    pub std_kind: StdKind,
    /// Emit per-domain shape-similarity CSVs next to the metrics.
    pub similarity_report: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            partition: PartitionSpec::default(),
            augmentation: AugmentationPlan::default(),
            sgd: SgdConfig::default(),
            rounds: 100,
            local_rounds: 10,
            aggregator: AggregatorKind::Fedavg,
            ggeur_enabled: true,
            step2_enabled: true,
            fedavg_weighting: FedAvgWeighting::Augmented,
            std_kind: StdKind::Population,
            similarity_report: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.partition.validate()?;
        self.augmentation.validate()?;
        self.sgd.validate()
    }

    /// The partition spec actually used: seeded from the experiment seed.
    pub fn effective_partition(&self) -> PartitionSpec {
        PartitionSpec {
            seed: self.seed,
            ..self.partition.clone()
        }
    }
}

/// Server-side knowledge computed once before training.
#[derive(Debug, Clone)]
pub struct Geometry {
    /// Global shape per class; classes absent from every client are missing.
    pub shapes: BTreeMap<u32, GeometricShape>,
    /// Every client's non-empty class means, ordered by `(class, client)`.
    pub prototypes: Vec<Prototype>,
    /// `local_stats[k][c]` as uploaded by client `k`.
    pub local_stats: Vec<Vec<ClassStats>>,
}

impl Geometry {
    pub fn prototypes_for(&self, class_id: u32) -> impl Iterator<Item = &Prototype> {
        self.prototypes.iter().filter(move |p| p.class_id == class_id)
    }
}

/// A client's training set after augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub domain: String,
    pub rows: Array2<f64>,
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub original_count: usize,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The training set as an `EMB1`-ready container, provenance tags kept.
    pub fn to_embeddings(&self) -> LabeledEmbeddings {
        LabeledEmbeddings {
            rows: self.rows.mapv(|x| x as f32),
            labels: self.labels.clone(),
            provenance: Some(self.provenance.iter().map(|&t| t as u8).collect()),
        }
    }
}

/// Result of one client's local training in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: LinearClassifierParams,
    pub weight: f64,
    /// Mean training objective over the last local epoch (NaN when no step ran).
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetric {
    pub domain: String,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Each client's local model on its own domain's test split.
    pub client_accuracy: Vec<f64>,
    /// The aggregated model on every domain's full test split.
    pub domains: Vec<DomainMetric>,
    /// Global model after this round's aggregation.
    pub params: LinearClassifierParams,
}

impl RoundRecord {
    /// Unweighted mean over domains.
    pub fn average_accuracy(&self) -> f64 {
        self.domains.iter().map(|d| d.accuracy).sum::<f64>() / self.domains.len() as f64
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct FederationOutput {
    pub shards: Vec<ClientShard>,
    pub geometry: Option<Geometry>,
    pub client_sizes: Vec<(usize, usize)>,
    pub records: Vec<RoundRecord>,
}

impl FederationOutput {
    pub fn final_params(&self) -> &LinearClassifierParams {
        &self.records.last().expect("at least one round").params
    }
}

fn shard_rows(dataset: &EmbeddingDataset, shard: &ClientShard) -> Result<(Array2<f64>, Vec<u32>)> {
    let domain = dataset
        .domain(&shard.domain)
        .ok_or_else(|| Error::InvalidData(format!("unknown domain {}", shard.domain)))?;
    if let Some(&bad) = shard.indices.iter().find(|&&i| i >= domain.train.len()) {
        return Err(Error::InvalidData(format!(
            "client {} index {bad} outside {} train split",
            shard.client_id, shard.domain
        )));
    }
    let rows = domain.train.rows.select(Axis(0), &shard.indices).mapv(f64::from);
    let labels = shard.indices.iter().map(|&i| domain.train.labels[i]).collect();
    Ok((rows, labels))
}

fn class_rows(rows: ArrayView2<f64>, labels: &[u32], class: u32) -> Array2<f64> {
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect();
    rows.select(Axis(0), &idx)
}

/// Clients compute per-class statistics of their original samples; the
/// server merges them per class over all clients (all domains pooled) and
/// eigendecomposes the result. Prototypes are every client's class means.
pub fn prepare_geometry(dataset: &EmbeddingDataset, shards: &[ClientShard]) -> Result<Geometry> {
    let classes = dataset.classes as u32;
    let local_stats: Vec<Vec<ClassStats>> = shards
        .par_iter()
        .map(|shard| {
            let (rows, labels) = shard_rows(dataset, shard)?;
            (0..classes)
                .map(|c| compute_class_stats(c, class_rows(rows.view(), &labels, c).view()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let shapes: Vec<Option<GeometricShape>> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let locals: Vec<ClassStats> = local_stats.iter().map(|s| s[c as usize].clone()).collect();
            if locals.iter().all(ClassStats::is_empty) {
                log::warn!("class {c} is absent from every client; no shape, augmentation skipped");
                return Ok(None);
            }
            build_shape(&aggregate_global_stats(&locals)?).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut prototypes = Vec::new();
    for c in 0..classes {
        for (shard, stats) in shards.iter().zip(&local_stats) {
            let s = &stats[c as usize];
            if !s.is_empty() {
                prototypes.push(Prototype {
                    class_id: c,
                    source_client: shard.client_id,
                    source_domain: shard.domain.clone(),
                    mean: s.mean.clone(),
                });
            }
        }
    }

    Ok(Geometry {
        shapes: shapes.into_iter().flatten().map(|s| (s.class_id, s)).collect(),
        prototypes,
        local_stats,
    })
}

/// Shape of every class computed from each domain's whole train split, in
/// the layout [`crate::geometry::cross_domain_similarity_matrix`] expects.
pub fn per_domain_shapes(dataset: &EmbeddingDataset) -> Result<Vec<(String, Vec<Option<GeometricShape>>)>> {
    dataset
        .domains
        .par_iter()
        .map(|d| {
            let rows = d.train.rows_f64();
            let shapes = (0..dataset.classes as u32)
                .map(|c| {
                    let stats = compute_class_stats(c, class_rows(rows.view(), &d.train.labels, c).view())?;
                    if stats.is_empty() {
                        Ok(None)
                    } else {
                        build_shape(&stats.into()).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((d.domain.clone(), shapes))
        })
        .collect()
}

/// Build one client's training set: originals, plus augmentation when a
/// geometry is supplied.
pub fn build_client_data(
    dataset: &EmbeddingDataset,
    shard: &ClientShard,
    geometry: Option<&Geometry>,
    config: &ExperimentConfig,
) -> Result<ClientData> {
    let (rows, labels) = shard_rows(dataset, shard)?;
    let original_count = labels.len();
    let Some(geometry) = geometry else {
        return Ok(ClientData {
            client_id: shard.client_id,
            domain: shard.domain.clone(),
            rows,
            labels,
            provenance: vec![Provenance::Original; original_count],
            original_count,
        });
    };

    let p = dataset.dim;
    let plan = &config.augmentation;
    let mut parts: Vec<(Array2<f64>, u32, Vec<Provenance>)> = Vec::new();
    for c in 0..dataset.classes as u32 {
        let local = class_rows(rows.view(), &labels, c);
        let stream = StreamId::new(config.seed, shard.client_id as u64, c as u64, Purpose::AugmentStep1);
        let Some(shape) = geometry.shapes.get(&c) else {
            if local.nrows() > 0 {
                let n = local.nrows();
                parts.push((local, c, vec![Provenance::Original; n]));
            }
            continue;
        };
        let set = match plan.mode {
            AugmentMode::SingleDomain => {
                if local.nrows() == 0 {
                    continue;
                }
                augment_single_domain(local.view(), shape, plan, stream)?
            }
            AugmentMode::MultiDomain => {
                let foreign: Vec<Prototype> = if config.step2_enabled {
                    geometry
                        .prototypes_for(c)
                        .filter(|p| p.source_domain != shard.domain && p.source_client != shard.client_id)
                        .cloned()
                        .collect()
                } else {
                    Vec::new()
                };
                if local.nrows() == 0 && foreign.is_empty() {
                    continue;
                }
                augment_multi_domain(local.view(), shape, &foreign, plan, stream)?
            }
        };
        parts.push((set.rows, c, set.provenance));
    }

    let total: usize = parts.iter().map(|(r, _, _)| r.nrows()).sum();
    let mut out_rows = Array2::zeros((total, p));
    let mut out_labels = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    let mut at = 0;
    for (r, c, tags) in parts {
        out_rows.slice_mut(s![at..at + r.nrows(), ..]).assign(&r);
        out_labels.extend(std::iter::repeat_n(c, r.nrows()));
        at += r.nrows();
        provenance.extend(tags);
    }
    Ok(ClientData {
        client_id: shard.client_id,
        domain: shard.domain.clone(),
        rows: out_rows,
        labels: out_labels,
        provenance,
        original_count,
    })
}

/// Sample order for one local epoch, from the client's shuffle stream.
pub fn epoch_order(seed: u64, client: usize, round: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(
        seed,
        &[Purpose::Shuffle as u64, client as u64, round as u64, epoch as u64],
    );
    order.shuffle(&mut rng);
    order
}

/// `local_rounds` epochs of mini-batch momentum SGD starting from the
/// global parameters. Momentum restarts from zero every round.
pub fn run_local_training(
    data: &ClientData,
    global: &LinearClassifierParams,
    config: &ExperimentConfig,
    round: usize,
) -> Result<ClientUpdate> {
    let weight = match config.fedavg_weighting {
        FedAvgWeighting::Augmented => data.len(),
        FedAvgWeighting::Original => data.original_count,
    } as f64;
    let mut params = global.clone();
    let mut train_loss = f64::NAN;
    if data.is_empty() {
        return Ok(ClientUpdate {
            client_id: data.client_id,
            params,
            weight,
            train_loss,
        });
    }
    let mut velocity = LinearClassifierParams::zeros(global.classes(), global.dim());
    let batch = config.sgd.batch_size;
    for epoch in 0..config.local_rounds {
        let order = epoch_order(config.seed, data.client_id, round, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let x = data.rows.select(Axis(0), chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let lg = loss_and_grad(&params, x.view(), &y, config.sgd.weight_decay)?;
            sgd_step(&mut params, &mut velocity, &lg.grad, &config.sgd);
            loss_sum += lg.objective;
            steps += 1;
        }
        train_loss = loss_sum / steps as f64;
    }
    if !params.is_finite() {
        return Err(Error::Runtime(format!(
            "client {} diverged in round {round} (non-finite parameters)",
            data.client_id
        )));
    }
    Ok(ClientUpdate {
        client_id: data.client_id,
        params,
        weight,
        train_loss,
    })
}

fn compare_params(a: &LinearClassifierParams, b: &LinearClassifierParams) -> std::cmp::Ordering {
    a.weights
        .iter()
        .chain(a.bias.iter())
        .zip(b.weights.iter().chain(b.bias.iter()))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Weighted average `Σ w_k θ_k / Σ w_k`.
///
/// Updates are put into a canonical order first (by weight, then by
/// parameter values) and accumulated as `θ_ref + Σ (w_k/W)(θ_k − θ_ref)`,
/// which makes the result bit-for-bit independent of client order and
/// exactly `θ` when every client sends the same `θ`.
pub fn fedavg_aggregate(updates: &[(LinearClassifierParams, f64)]) -> Result<LinearClassifierParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::InvalidData("no client updates to aggregate".into()))?;
    for (p, w) in updates {
        if !p.same_shape(first) {
            return Err(Error::DimensionMismatch {
                expected: first.weights.len(),
                actual: p.weights.len(),
            });
        }
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidData(format!("invalid client weight {w}")));
        }
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidData("client weights sum to zero".into()));
    }

    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| {
        updates[a]
            .1
            .total_cmp(&updates[b].1)
            .then_with(|| compare_params(&updates[a].0, &updates[b].0))
    });
    let reference = &updates[order[0]].0;
    let mut out = reference.clone();
    for &k in &order {
        let (params, w) = &updates[k];
        if *w == 0.0 {
            continue;
        }
        let alpha = w / total;
        out.weights.zip_mut_with(
            &(&params.weights - &reference.weights),
            |o, d| *o += alpha * d,
        );
        out.bias
            .zip_mut_with(&(&params.bias - &reference.bias), |o, d| *o += alpha * d);
    }
    Ok(out)
}

/// Aggregation seam. Only FedAvg ships.
pub trait Aggregator: Send + Sync {
    fn aggregate(&self, updates: &[ClientUpdate]) -> Result<LinearClassifierParams>;
}

pub struct FedAvg;

impl Aggregator for FedAvg {
    fn aggregate(&self, updates: &[ClientUpdate]) -> Result<LinearClassifierParams> {
        let pairs: Vec<(LinearClassifierParams, f64)> =
            updates.iter().map(|u| (u.params.clone(), u.weight)).collect();
        fedavg_aggregate(&pairs)
    }
}

pub fn aggregator(kind: AggregatorKind) -> Box<dyn Aggregator> {
    match kind {
        AggregatorKind::Fedavg => Box::new(FedAvg),
    }
}

struct TestSplit {
    domain: String,
    rows: Array2<f64>,
    labels: Vec<u32>,
}

fn evaluate(params: &LinearClassifierParams, split: &TestSplit) -> Result<DomainMetric> {
    Ok(DomainMetric {
        domain: split.domain.clone(),
        accuracy: evaluate_top1(params, split.rows.view(), &split.labels)?,
        loss: cross_entropy(params, split.rows.view(), &split.labels)?,
    })
}

/// Run the whole protocol on the current rayon pool.
pub fn run_federation(config: &ExperimentConfig, dataset: &EmbeddingDataset) -> Result<FederationOutput> {
    config.validate()?;
    dataset.validate()?;
    let shards = build_partition(dataset, &config.effective_partition())?;
    run_federation_with_shards(config, dataset, shards)
}

/// As [`run_federation`], with a precomputed partition.
pub fn run_federation_with_shards(
    config: &ExperimentConfig,
    dataset: &EmbeddingDataset,
    shards: Vec<ClientShard>,
) -> Result<FederationOutput> {
    config.validate()?;
    let geometry = if config.ggeur_enabled {
        Some(prepare_geometry(dataset, &shards)?)
    } else {
        None
    };
    let clients: Vec<ClientData> = shards
        .par_iter()
        .map(|shard| build_client_data(dataset, shard, geometry.as_ref(), config))
        .collect::<Result<_>>()?;
    let client_sizes = clients.iter().map(|c| (c.original_count, c.len())).collect();
    for c in &clients {
        log::info!(
            "client {} ({}): {} original, {} training samples",
            c.client_id,
            c.domain,
            c.original_count,
            c.len()
        );
    }

    let tests: Vec<TestSplit> = dataset
        .domains
        .iter()
        .map(|d| TestSplit {
            domain: d.domain.clone(),
            rows: d.test.rows_f64(),
            labels: d.test.labels.clone(),
        })
        .collect();
    let domain_of_client: Vec<usize> = clients
        .iter()
        .map(|c| tests.iter().position(|t| t.domain == c.domain).expect("shard domain exists"))
        .collect();

    let agg = aggregator(config.aggregator);
    let mut global = LinearClassifierParams::zeros(dataset.classes, dataset.dim);
    let mut records = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let updates: Vec<ClientUpdate> = clients
            .par_iter()
            .map(|c| run_local_training(c, &global, config, round))
            .collect::<Result<_>>()?;
        global = agg.aggregate(&updates)?;

        let client_accuracy = updates
            .par_iter()
            .zip(domain_of_client.par_iter())
            .map(|(u, &d)| evaluate_top1(&u.params, tests[d].rows.view(), &tests[d].labels))
            .collect::<Result<Vec<_>>>()?;
        let domains = tests
            .par_iter()
            .map(|t| evaluate(&global, t))
            .collect::<Result<Vec<_>>>()?;
        log::debug!(
            "round {round}: avg accuracy {:.4}",
            domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64
        );
        records.push(RoundRecord {
            round,
            client_accuracy,
            domains,
            params: global.clone(),
        });
    }

    Ok(FederationOutput {
        shards,
        geometry,
        client_sizes,
        records,
    })
}

/// Run on a dedicated pool of `workers` threads.
pub fn run_federation_with_workers(
    config: &ExperimentConfig,
    dataset: &EmbeddingDataset,
    workers: usize,
) -> Result<FederationOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_federation(config, dataset))
}
