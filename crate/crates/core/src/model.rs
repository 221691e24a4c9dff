//! Linear softmax classifier on embeddings, trained with momentum SGD.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights (`C × p`) and bias (`C`) of the shared classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifierParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifierParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|x| x.is_finite())
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &Self) {
        self.weights.scaled_add(alpha, &other.weights);
        self.bias.scaled_add(alpha, &other.bias);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights *= alpha;
        self.bias *= alpha;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// Momentum SGD settings. Weight decay applies to weights only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_batch(params: &LinearClassifierParams, batch: ArrayView2<f64>) -> Result<()> {
    if batch.ncols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: batch.ncols(),
        });
    }
    Ok(())
}

/// `X Wᵀ + b`.
pub fn forward(params: &LinearClassifierParams, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch(params, batch)?;
    let mut logits = batch.dot(&params.weights.t());
    logits += &params.bias.view().insert_axis(Axis(0));
    Ok(logits)
}

/// Objective value and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    /// Mean cross-entropy over the batch.
    pub cross_entropy: f64,
    /// `cross_entropy + (weight_decay / 2) ‖W‖²`, the function `grad` differentiates.
    pub objective: f64,
    pub grad: LinearClassifierParams,
}

fn check_labels(classes: usize, rows: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidData(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// In-place row softmax with max subtraction; returns `Σ log p_y` contributions.
fn softmax_rows(logits: &mut Array2<f64>, labels: &[u32]) -> f64 {
    let mut nll = 0.0;
    for (mut row, &y) in logits.outer_iter_mut().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        nll -= (row[y as usize] / sum).ln();
        row /= sum;
    }
    nll
}

/// Mean softmax cross-entropy and gradients; `weight_decay · W` is folded
/// into the weight gradient.
pub fn loss_and_grad(
    params: &LinearClassifierParams,
    batch: ArrayView2<f64>,
    labels: &[u32],
    weight_decay: f64,
) -> Result<LossAndGrad> {
    check_batch(params, batch)?;
    check_labels(params.classes(), batch.nrows(), labels)?;
    let n = batch.nrows();
    if n == 0 {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let mut probs = forward(params, batch)?;
    let cross_entropy = softmax_rows(&mut probs, labels) / n as f64;
    for (mut row, &y) in probs.outer_iter_mut().zip(labels) {
        row[y as usize] -= 1.0;
    }
    probs /= n as f64;
    let mut gw = probs.t().dot(&batch);
    gw.scaled_add(weight_decay, &params.weights);
    let gb = probs.sum_axis(Axis(0));
    let decay = 0.5 * weight_decay * params.weights.iter().map(|w| w * w).sum::<f64>();
    Ok(LossAndGrad {
        cross_entropy,
        objective: cross_entropy + decay,
        grad: LinearClassifierParams {
            weights: gw,
            bias: gb,
        },
    })
}

/// Mean cross-entropy without gradients.
pub fn cross_entropy(params: &LinearClassifierParams, batch: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    check_labels(params.classes(), batch.nrows(), labels)?;
    if batch.nrows() == 0 {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let mut logits = forward(params, batch)?;
    Ok(softmax_rows(&mut logits, labels) / batch.nrows() as f64)
}

/// `v ← μ v + g`, `θ ← θ − η v`.
pub fn sgd_step(
    params: &mut LinearClassifierParams,
    velocity: &mut LinearClassifierParams,
    grads: &LinearClassifierParams,
    config: &SgdConfig,
) {
    velocity.scale(config.momentum);
    velocity.scaled_add(1.0, grads);
    params.scaled_add(-config.learning_rate, velocity);
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate_top1(params: &LinearClassifierParams, rows: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    check_labels(params.classes(), rows.nrows(), labels)?;
    if rows.nrows() == 0 {
        return Err(Error::InvalidData("cannot evaluate on an empty split".into()));
    }
    let logits = forward(params, rows)?;
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y as usize)
        .count();
    Ok(correct as f64 / rows.nrows() as f64)
}
