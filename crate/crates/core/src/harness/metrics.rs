use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Percentage in `[0, 100]`.
    pub top1: f64,
    pub confusion: Vec<ClassCounts>,
}

impl Accuracy {
    /// Top-1 recomputed from the confusion counts.
    pub fn from_counts(confusion: &[ClassCounts]) -> f64 {
        let tp: usize = confusion.iter().map(|c| c.tp).sum();
        let total: usize = confusion.iter().map(|c| c.tp + c.fn_).sum();
        100.0 * tp as f64 / total.max(1) as f64
    }
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Accuracy> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "top1_accuracy",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let classes = predictions
        .iter()
        .chain(labels)
        .map(|&c| c + 1)
        .max()
        .unwrap_or(0)
        .max(classes);
    let mut confusion = vec![ClassCounts::default(); classes];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            correct += 1;
        }
        for (c, counts) in confusion.iter_mut().enumerate() {
            match (p == c, y == c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(Accuracy {
        top1: 100.0 * correct as f64 / predictions.len() as f64,
        confusion,
    })
}

/// A line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Eval(EvalRecord),
    Update(UpdateRecord),
    Partition(PartitionRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    /// Mean over the epoch's updates.
    pub loss_meta: f64,
    pub loss_erm: f64,
    pub loss_total: f64,
    pub balance_entropy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub update: usize,
    pub query_losses: Vec<f64>,
    pub meta: f64,
    pub erm: f64,
    pub total: f64,
    pub meta_grad_norm: f64,
    pub erm_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub epoch: usize,
    pub split_sizes: Vec<usize>,
    pub entropy: f64,
    pub warnings: usize,
}
