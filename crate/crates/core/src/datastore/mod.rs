//! Embedding datasets on disk: one `EMB1` container per domain split plus a
//! JSON manifest, and a synthetic multi-domain generator.

pub mod container;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use container::LabeledEmbeddings;
pub use synth::{synth_generate, synth_ground_truth, Spectrum, SynthTruth, SyntheticSpec};

use crate::error::ContainerError;
use crate::{Error, Result};

/// Train and test embeddings of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub domain: String,
    pub train: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub domains: Vec<DomainSplit>,
}

impl EmbeddingDataset {
    /// Every split has width `dim`, one label per row and labels below `classes`.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidData("dataset dimension must be at least 1".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::InvalidData("dataset has no domains".into()));
        }
        for d in &self.domains {
            for (split, data) in [("train", &d.train), ("test", &d.test)] {
                if data.dim() != self.dim {
                    return Err(Error::InvalidData(format!(
                        "{}/{split}: width {} but dataset dimension is {}",
                        d.domain,
                        data.dim(),
                        self.dim
                    )));
                }
                if data.labels.len() != data.rows.nrows() {
                    return Err(Error::InvalidData(format!(
                        "{}/{split}: {} labels for {} rows",
                        d.domain,
                        data.labels.len(),
                        data.rows.nrows()
                    )));
                }
                if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= self.classes) {
                    return Err(Error::InvalidData(format!(
                        "{}/{split}: label {bad} outside [0, {})",
                        d.domain, self.classes
                    )));
                }
                if let Some(pos) = data.rows.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        row: pos / self.dim,
                        col: pos % self.dim,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSplit> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.domain.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub domain: String,
    pub train_path: String,
    pub test_path: String,
}

/// `{name, dim, classes, domains: [{domain, train_path, test_path}]}`.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub domains: Vec<ManifestDomain>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn file_stem(domain: &str) -> String {
    domain
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn container_error(path: &Path) -> impl FnOnce(ContainerError) -> Error + '_ {
    move |source| Error::Container {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_embeddings(path: &Path, data: &LabeledEmbeddings) -> Result<()> {
    let bytes = container::encode_embeddings(data).map_err(container_error(path))?;
    write_file(path, &bytes)
}

pub fn load_embeddings(path: &Path) -> Result<LabeledEmbeddings> {
    let bytes = read_file(path)?;
    container::decode_embeddings(&bytes).map_err(container_error(path))
}

/// Write the dataset into `dir` (created if needed) and return the manifest path.
pub fn save_dataset(dataset: &EmbeddingDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut domains = Vec::with_capacity(dataset.domains.len());
    for (i, d) in dataset.domains.iter().enumerate() {
        let stem = format!("{i:02}_{}", file_stem(&d.domain));
        let train_path = format!("{stem}.train.emb");
        let test_path = format!("{stem}.test.emb");
        save_embeddings(&dir.join(&train_path), &d.train)?;
        save_embeddings(&dir.join(&test_path), &d.test)?;
        domains.push(ManifestDomain {
            domain: d.domain.clone(),
            train_path,
            test_path,
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        dim: dataset.dim,
        classes: dataset.classes,
        domains,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Load a dataset from its manifest. A directory argument means
/// `<dir>/manifest.json`.
pub fn load_dataset(manifest_path: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let manifest: Manifest = read_json(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for d in &manifest.domains {
        domains.push(DomainSplit {
            domain: d.domain.clone(),
            train: load_embeddings(&base.join(&d.train_path))?,
            test: load_embeddings(&base.join(&d.test_path))?,
        });
    }
    let dataset = EmbeddingDataset {
        name: manifest.name,
        dim: manifest.dim,
        classes: manifest.classes,
        domains,
    };
    dataset.validate()?;
    Ok(dataset)
}
