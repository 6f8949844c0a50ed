//! Classification metrics over (truth, prediction) label pairs. Toxic is
//! the positive class; macro-F1 averages the per-class F1 of both classes.

use crate::labeling::Label;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no test data to evaluate")]
    NoTestData,
}

/// Confusion counts with Toxic as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierMetrics {
    pub macro_f1: f64,
    pub toxic_precision: f64,
    pub toxic_recall: f64,
    pub toxic_f1: f64,
    pub nontoxic_f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// True when a precision denominator was 0 and reported as 0.
    pub undefined_precision: bool,
    /// Classes missing from the ground truth; their F1 counts as 0.
    pub absent_classes: Vec<Label>,
}

fn f1_parts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64, bool) {
    let undefined = tp + fp == 0;
    let precision = if undefined {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1, undefined)
}

/// Metrics over pooled (truth, prediction) pairs.
pub fn compute_metrics(pairs: &[(Label, Label)]) -> Result<ClassifierMetrics, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoTestData);
    }
    let mut c = Confusion::default();
    for &(truth, pred) in pairs {
        match (truth, pred) {
            (Label::Toxic, Label::Toxic) => c.tp += 1,
            (Label::NonToxic, Label::Toxic) => c.fp += 1,
            (Label::Toxic, Label::NonToxic) => c.fn_ += 1,
            (Label::NonToxic, Label::NonToxic) => c.tn += 1,
        }
    }

    let (toxic_precision, toxic_recall, toxic_f1, toxic_undef) = f1_parts(c.tp, c.fp, c.fn_);
    // NonToxic as positive: swap roles in the confusion matrix
    let (_, _, nontoxic_f1, nontoxic_undef) = f1_parts(c.tn, c.fn_, c.fp);

    let mut absent_classes = Vec::new();
    if c.tp + c.fn_ == 0 {
        absent_classes.push(Label::Toxic);
        log::warn!("no Toxic examples in ground truth; its F1 counts as 0");
    }
    if c.tn + c.fp == 0 {
        absent_classes.push(Label::NonToxic);
        log::warn!("no NonToxic examples in ground truth; its F1 counts as 0");
    }

    Ok(ClassifierMetrics {
        macro_f1: (toxic_f1 + nontoxic_f1) / 2.0,
        toxic_precision,
        toxic_recall,
        toxic_f1,
        nontoxic_f1,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        confusion: c,
        undefined_precision: toxic_undef || nontoxic_undef,
        absent_classes,
    })
}
