//! Client shards with label skew, domain skew or both.
//!
//! Shard indices point into the train split of the shard's domain. Test
//! splits are never partitioned.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::datastore::EmbeddingDataset;
use crate::rng::{substream, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// One domain split across `K` clients with per-class `Dir(β)` proportions.
    DirichletLabel,
    /// One client per domain holding a uniform fraction of that domain.
    DomainPerClient,
    /// One client per domain, per-class counts scaled by a `Dir(β)` column.
    Lds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub beta: f64,
    pub num_clients: usize,
    pub fraction_per_domain: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            mode: PartitionMode::DirichletLabel,
            beta: 0.5,
            num_clients: 10,
            fraction_per_domain: 1.0,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("partition beta must be positive".into()));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if !(self.fraction_per_domain > 0.0 && self.fraction_per_domain <= 1.0) {
            return Err(Error::Config("fraction_per_domain must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Indices of one client into its domain's train split, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub domain: String,
    pub indices: Vec<usize>,
}

/// On-disk partition: `{mode, seed, beta, clients: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub mode: PartitionMode,
    pub seed: u64,
    pub beta: f64,
    pub clients: Vec<ClientShard>,
}

impl PartitionFile {
    pub fn new(spec: &PartitionSpec, clients: Vec<ClientShard>) -> Self {
        Self {
            mode: spec.mode,
            seed: spec.seed,
            beta: spec.beta,
            clients,
        }
    }
}

/// One draw from `Dir(β, …, β)` over `k` outcomes.
///
/// Gamma variates are formed in log space (`Γ(β) = Γ(β+1)·U^{1/β}`), so
/// very small `β` does not underflow every component to zero.
pub fn sample_dirichlet<R: Rng>(rng: &mut R, k: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta + 1.0, 1.0).expect("beta validated positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Integer counts summing to `total`, proportional to `proportions`. Floors
/// first, then one extra unit to the largest fractional parts (lower index
/// first on ties).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn class_pools(labels: &[u32], classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l as usize].push(i);
    }
    pools
}

fn expect_mode(spec: &PartitionSpec, mode: PartitionMode) -> Result<()> {
    spec.validate()?;
    if spec.mode != mode {
        return Err(Error::Config(format!(
            "partition spec has mode {:?}, expected {mode:?}",
            spec.mode
        )));
    }
    Ok(())
}

fn expect_one_client_per_domain(dataset: &EmbeddingDataset, spec: &PartitionSpec) -> Result<()> {
    if dataset.domains.len() != spec.num_clients {
        return Err(Error::Config(format!(
            "{} domains but num_clients = {}; one client per domain is required",
            dataset.domains.len(),
            spec.num_clients
        )));
    }
    Ok(())
}

/// Split the single domain's train split across `K` clients, class by
/// class, with `Dir(β)` proportions. Every train sample is assigned exactly
/// once.
pub fn dirichlet_label_partition(dataset: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_mode(spec, PartitionMode::DirichletLabel)?;
    let [domain] = dataset.domains.as_slice() else {
        return Err(Error::Config(format!(
            "dirichlet_label partitioning needs a single-domain dataset, got {} domains",
            dataset.domains.len()
        )));
    };
    let k = spec.num_clients;
    let mut shards: Vec<ClientShard> = (0..k)
        .map(|client_id| ClientShard {
            client_id,
            domain: domain.domain.clone(),
            indices: Vec::new(),
        })
        .collect();

    for (class, mut pool) in class_pools(&domain.train.labels, dataset.classes).into_iter().enumerate() {
        let mut rng = substream(spec.seed, &[Purpose::DirichletLabel as u64, class as u64]);
        let proportions = sample_dirichlet(&mut rng, k, spec.beta);
        pool.shuffle(&mut rng);
        let counts = largest_remainder(&proportions, pool.len());
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.indices.extend_from_slice(&pool[start..start + count]);
            start += count;
        }
    }
    for s in &mut shards {
        s.indices.sort_unstable();
    }
    Ok(shards)
}

/// Client `k` receives a uniform random `fraction_per_domain` of domain
/// `k`'s train split (count rounded half up).
pub fn domain_partition(dataset: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_mode(spec, PartitionMode::DomainPerClient)?;
    expect_one_client_per_domain(dataset, spec)?;
    Ok(dataset
        .domains
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let n = d.train.len();
            let keep = round_half_up(spec.fraction_per_domain * n as f64).min(n);
            let mut rng = substream(spec.seed, &[Purpose::DomainSubsample as u64, k as u64]);
            let mut indices = index::sample(&mut rng, n, keep).into_vec();
            indices.sort_unstable();
            ClientShard {
                client_id: k,
                domain: d.domain.clone(),
                indices,
            }
        })
        .collect())
}

/// The `K × C` LDS coefficient matrix: column `c` is one `Dir(β)` draw.
pub fn lds_coefficients(spec: &PartitionSpec, classes: usize) -> Result<Array2<f64>> {
    spec.validate()?;
    let k = spec.num_clients;
    let mut coef = Array2::zeros((k, classes));
    for c in 0..classes {
        let mut rng = substream(spec.seed, &[Purpose::LdsCoefficients as u64, c as u64]);
        for (row, v) in sample_dirichlet(&mut rng, k, spec.beta).into_iter().enumerate() {
            coef[[row, c]] = v;
        }
    }
    Ok(coef)
}

/// One client per domain; client `k` keeps `round(coef[k, c] · |class c in
/// domain k|)` random samples of each class of its own domain and the rest
/// are dropped.
pub fn lds_partition(dataset: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_mode(spec, PartitionMode::Lds)?;
    expect_one_client_per_domain(dataset, spec)?;
    let present = |labels: &[u32]| {
        let mut seen = vec![false; dataset.classes];
        for &l in labels {
            seen[l as usize] = true;
        }
        seen
    };
    let reference = present(&dataset.domains[0].train.labels);
    for d in &dataset.domains[1..] {
        if present(&d.train.labels) != reference {
            return Err(Error::InvalidData(format!(
                "domain {} does not share the class set of domain {}",
                d.domain, dataset.domains[0].domain
            )));
        }
    }

    let coef = lds_coefficients(spec, dataset.classes)?;
    let mut shards = Vec::with_capacity(spec.num_clients);
    for (k, d) in dataset.domains.iter().enumerate() {
        let mut indices = Vec::new();
        for (c, pool) in class_pools(&d.train.labels, dataset.classes).into_iter().enumerate() {
            let keep = round_half_up(coef[[k, c]] * pool.len() as f64).min(pool.len());
            let mut rng = substream(spec.seed, &[Purpose::LdsSubsample as u64, k as u64, c as u64]);
            indices.extend(index::sample(&mut rng, pool.len(), keep).into_iter().map(|i| pool[i]));
        }
        indices.sort_unstable();
        shards.push(ClientShard {
            client_id: k,
            domain: d.domain.clone(),
            indices,
        });
    }
    Ok(shards)
}

/// Dispatch on `spec.mode`.
pub fn build_partition(dataset: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.mode {
        PartitionMode::DirichletLabel => dirichlet_label_partition(dataset, spec),
        PartitionMode::DomainPerClient => domain_partition(dataset, spec),
        PartitionMode::Lds => lds_partition(dataset, spec),
    }
}

/// Per-client class counts (`K × C`), the data behind a partition heatmap.
pub fn class_counts(dataset: &EmbeddingDataset, shards: &[ClientShard]) -> Result<Array2<usize>> {
    let mut counts = Array2::zeros((shards.len(), dataset.classes));
    for (row, shard) in shards.iter().enumerate() {
        let domain = dataset.domain(&shard.domain).ok_or_else(|| {
            Error::InvalidData(format!("shard {} refers to unknown domain {}", shard.client_id, shard.domain))
        })?;
        for &i in &shard.indices {
            let label = *domain.train.labels.get(i).ok_or_else(|| {
                Error::InvalidData(format!(
                    "shard {} index {i} outside train split of {}",
                    shard.client_id, shard.domain
                ))
            })?;
            counts[[row, label as usize]] += 1;
        }
    }
    Ok(counts)
}

/// Shards are internally unique, pairwise disjoint per domain and in range.
pub fn check_disjoint(dataset: &EmbeddingDataset, shards: &[ClientShard]) -> Result<()> {
    use std::collections::HashSet;
    let mut seen: HashSet<(&str, usize)> = HashSet::new();
    for s in shards {
        let n = dataset
            .domain(&s.domain)
            .ok_or_else(|| Error::InvalidData(format!("unknown domain {}", s.domain)))?
            .train
            .len();
        for &i in &s.indices {
            if i >= n {
                return Err(Error::InvalidData(format!("index {i} outside {} train split", s.domain)));
            }
            if !seen.insert((s.domain.as_str(), i)) {
                return Err(Error::InvalidData(format!(
                    "index {i} of {} assigned twice (client {})",
                    s.domain, s.client_id
                )));
            }
        }
    }
    Ok(())
}
