//! Classification metrics.
//!
//! F1 convention: for `C = 2` the binary F1 of class 2 (external label 1);
//! for `C > 2` the unweighted mean of per-class F1. A class with no true and
//! no predicted instances scores 0, not 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WeakDataset;
use crate::end_model::EndModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub accuracy: f64,
    /// `confusion[true - 1][pred - 1]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<f64>,
}

/// `2 TP / (2 TP + FP + FN)`, 0 when undefined.
fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn f1_score(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions vs labels",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let c = num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == 0 || p > c || y == 0 || y > c {
            return Err(Error::OutOfRange(format!(
                "prediction {p} / label {y} outside 1..={c}"
            )));
        }
        confusion[y - 1][p - 1] += 1;
    }
    let per_class_f1: Vec<f64> = (0..c)
        .map(|j| {
            let tp = confusion[j][j];
            let fp: usize = (0..c).map(|i| confusion[i][j]).sum::<usize>() - tp;
            let fn_: usize = confusion[j].iter().sum::<usize>() - tp;
            class_f1(tp, fp, fn_)
        })
        .collect();
    let f1 = if c == 2 {
        per_class_f1[1]
    } else {
        per_class_f1.iter().sum::<f64>() / c as f64
    };
    let correct: usize = (0..c).map(|j| confusion[j][j]).sum();
    Ok(Metrics {
        f1,
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        per_class_f1,
    })
}

/// Predict every point of a labeled split and score it.
pub fn evaluate(model: &EndModel, ds: &WeakDataset) -> Result<Metrics> {
    let labels: Vec<usize> = ds
        .points
        .iter()
        .map(|p| {
            p.strong_label
                .ok_or_else(|| Error::MissingStrongLabel(p.id.clone()))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<usize> = ds
        .points
        .par_iter()
        .map(|p| model.argmax_class(&p.features))
        .collect::<Result<_>>()?;
    f1_score(&preds, &labels, ds.num_classes)
}
