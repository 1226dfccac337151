//! Classification losses as differentiable graphs: the Halfway loss (two-class
//! and one-against-rest multi-class with cost-sensitive weights), softmax
//! cross-entropy, and a plain MSE baseline.
//!
//! The Halfway loss for output `k` over a batch of `m` samples is
//!
//! ```text
//! γ_ki  = y_ki · out_ki                    y_ki ∈ {−1, +1}
//! γ̄_ki  = γ_ki / max(max_i |γ_ki|, 1e-12)  (per output, per batch)
//! J_k   = (1/m) Σ_i w(y_ki) (γ̄_ki − ½)²
//! w(+1) = 1,  w(−1) = 1/(K−1)
//! ```
//!
//! and the total loss is the mean of `J_k` over the `K` outputs. The gradient
//! flows through the max as well.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::margin::NORMALIZE_GUARD;
use crate::tensor::Tensor;

/// Normalized-margin target.
pub const HALFWAY_TARGET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    Halfway,
    MseBaseline,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax",
            LossKind::Halfway => "halfway",
            LossKind::MseBaseline => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" | "softmax_ce" | "softmax-ce" | "ce" => Ok(LossKind::SoftmaxCe),
            "halfway" | "nmv" => Ok(LossKind::Halfway),
            "mse" | "mse_baseline" => Ok(LossKind::MseBaseline),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }

    /// Label coding the loss is trained with.
    pub fn coding(self) -> LabelCoding {
        match self {
            LossKind::SoftmaxCe => LabelCoding::ZeroOne,
            LossKind::Halfway | LossKind::MseBaseline => LabelCoding::PlusMinusOne,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelCoding {
    /// One-hot `{0,1}^K`.
    ZeroOne,
    /// `+1` at the true class, `−1` elsewhere.
    PlusMinusOne,
}

/// A loss together with its label coding and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub coding: LabelCoding,
    pub classes: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        Ok(LossSpec {
            kind,
            coding: kind.coding(),
            classes,
        })
    }

    /// Builds the scalar loss node for `outputs` (`m×K`) against class indices.
    pub fn build(&self, g: &mut Graph, outputs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let targets = crate::data::encode_labels(labels, self.classes, self.coding)?;
        match self.kind {
            LossKind::SoftmaxCe => softmax_cross_entropy(g, outputs, &targets),
            LossKind::Halfway => halfway_loss(g, outputs, &targets),
            LossKind::MseBaseline => mse_loss(g, outputs, &targets),
        }
    }
}

/// Cost-sensitive weight of a `±1` label among `k` one-against-rest outputs.
pub fn class_weight(y: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("class count must be ≥ 2, got {k}")));
    }
    if y == 1.0 {
        Ok(1.0)
    } else if y == -1.0 {
        Ok(1.0 / (k - 1) as f64)
    } else {
        Err(Error::InvalidArgument(format!("label must be ±1, got {y}")))
    }
}

/// `((K−2)y + K) / (2K−2)`, the label-derived form of [`class_weight`].
pub fn class_weight_closed_form(y: f64, k: usize) -> f64 {
    let k = k as f64;
    ((k - 2.0) * y + k) / (2.0 * k - 2.0)
}

fn check_pm_labels(labels: &Tensor, op: &'static str) -> Result<()> {
    if let Some(bad) = labels.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidArgument(format!("{op}: label {bad} is not ±1")));
    }
    Ok(())
}

/// Per-output Halfway losses `J_k` as a `1×K` node. `labels` is `m×K` in ±1
/// coding and sets `K` for the class weights.
pub fn halfway_loss_per_output(g: &mut Graph, outputs: NodeId, labels: &Tensor) -> Result<NodeId> {
    let k = match labels.shape() {
        [_, k] => *k,
        s => return Err(Error::shape("halfway_loss", format!("labels must be m×K, got {s:?}"))),
    };
    if k < 2 {
        return Err(Error::InvalidArgument(format!("class count must be ≥ 2, got {k}")));
    }
    let weights = labels.map(|y| if y > 0.0 { 1.0 } else { 1.0 / (k - 1) as f64 });
    halfway_weighted(g, outputs, labels, weights)
}

fn halfway_weighted(g: &mut Graph, outputs: NodeId, labels: &Tensor, weights: Tensor) -> Result<NodeId> {
    let out_shape = g.value(outputs).shape().to_vec();
    if out_shape != labels.shape() {
        return Err(Error::shape(
            "halfway_loss",
            format!("outputs {out_shape:?} vs labels {:?}", labels.shape()),
        ));
    }
    let (m, _) = labels.dims2()?;
    if m == 0 {
        return Err(Error::shape("halfway_loss", "empty batch"));
    }
    check_pm_labels(labels, "halfway_loss")?;
    let y = g.constant(labels.clone());
    let gamma = g.mul(outputs, y)?;
    let max_abs = g.max_abs_axis(gamma, 0)?;
    let denom = g.max_scalar(max_abs, NORMALIZE_GUARD);
    let gamma_bar = g.div(gamma, denom)?;
    let centered = g.add_scalar(gamma_bar, -HALFWAY_TARGET);
    let sq = g.square(centered);
    let w = g.constant(weights);
    let weighted = g.mul(sq, w)?;
    g.mean_axis(weighted, 0)
}

/// Multi-class Halfway loss: mean over outputs of the per-output loss.
pub fn halfway_loss(g: &mut Graph, outputs: NodeId, labels: &Tensor) -> Result<NodeId> {
    let per_output = halfway_loss_per_output(g, outputs, labels)?;
    g.mean(per_output)
}

/// Two-class Halfway loss over a single output column (`m` or `m×1`), no
/// class weighting.
pub fn halfway_loss_two_class(g: &mut Graph, outputs: NodeId, labels: &[f64]) -> Result<NodeId> {
    let m = labels.len();
    let outputs = g.reshape(outputs, [m, 1]).map_err(|_| {
        Error::shape("halfway_loss_two_class", format!("outputs do not hold {m} values"))
    })?;
    let labels = Tensor::new([m, 1], labels.to_vec())?;
    let per_output = halfway_weighted(g, outputs, &labels, Tensor::ones([m, 1]))?;
    g.mean(per_output)
}

pub fn softmax_cross_entropy(g: &mut Graph, logits: NodeId, one_hot: &Tensor) -> Result<NodeId> {
    let (m, _) = one_hot.dims2()?;
    for i in 0..m {
        let row = one_hot.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: label row {i} is not one-hot"
            )));
        }
    }
    g.softmax_cross_entropy(logits, one_hot)
}

/// `mean((out − y)²)` with ±1 targets and no normalization.
pub fn mse_loss(g: &mut Graph, outputs: NodeId, targets: &Tensor) -> Result<NodeId> {
    let t = g.constant(targets.clone());
    let diff = g.sub(outputs, t)?;
    let sq = g.square(diff);
    g.mean(sq)
}

fn evaluate(build: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>, outputs: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let out = g.constant(outputs);
    let loss = build(&mut g, out)?;
    g.value(loss).item()
}

/// Value of `J_k` for one output column.
pub fn halfway_loss_output_k(outputs_k: &[f64], labels_k: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("class count must be ≥ 2, got {k}")));
    }
    if outputs_k.len() != labels_k.len() {
        return Err(Error::shape(
            "halfway_loss_output_k",
            format!("{} outputs vs {} labels", outputs_k.len(), labels_k.len()),
        ));
    }
    let m = labels_k.len();
    let labels = Tensor::new([m, 1], labels_k.to_vec())?;
    check_pm_labels(&labels, "halfway_loss_output_k")?;
    let weights = labels.map(|y| if y > 0.0 { 1.0 } else { 1.0 / (k - 1) as f64 });
    let outputs = Tensor::new([m, 1], outputs_k.to_vec())?;
    evaluate(|g, o| halfway_weighted(g, o, &labels, weights), outputs)
}

pub fn halfway_loss_total(outputs: &Tensor, labels: &Tensor) -> Result<f64> {
    evaluate(|g, o| halfway_loss(g, o, labels), outputs.clone())
}

pub fn halfway_loss_two_class_value(outputs: &[f64], labels: &[f64]) -> Result<f64> {
    evaluate(
        |g, o| halfway_loss_two_class(g, o, labels),
        Tensor::vector(outputs.to_vec()),
    )
}

pub fn softmax_cross_entropy_value(logits: &Tensor, one_hot: &Tensor) -> Result<f64> {
    evaluate(|g, o| softmax_cross_entropy(g, o, one_hot), logits.clone())
}
