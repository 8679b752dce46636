//! Classification metrics, per-class reports, and EDA exports.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, FEATURE_NAMES};
use crate::error::ModelError;

/// Binary confusion counts relative to a designated positive class
/// (default: unstable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub positive: Label,
}

pub fn confusion(
    labels_true: &[Label],
    labels_pred: &[Label],
    positive: Label,
) -> Result<ConfusionMatrix, ModelError> {
    if labels_true.len() != labels_pred.len() {
        return Err(ModelError::LengthMismatch(labels_true.len(), labels_pred.len()));
    }
    if labels_true.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut cm = ConfusionMatrix { tp: 0, fp: 0, tn: 0, fn_: 0, positive };
    for (&t, &p) in labels_true.iter().zip(labels_pred) {
        match (t == positive, p == positive) {
            (true, true) => cm.tp += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// The same matrix seen from the other class's point of view.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            positive: if self.positive == Label::Stable { Label::Unstable } else { Label::Stable },
        }
    }
}

/// Precision/recall/F1 with the zero-denominator convention: report 0 and
/// set the degenerate flag instead of dividing by zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub degenerate: bool,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassMetrics {
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1, support: cm.tp + cm.fn_, degenerate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub model: String,
    pub accuracy: f64,
    pub stable: ClassMetrics,
    pub unstable: ClassMetrics,
    pub n: usize,
}

pub fn classification_report(
    model: &str,
    labels_true: &[Label],
    labels_pred: &[Label],
) -> Result<ClassificationReport, ModelError> {
    let cm = confusion(labels_true, labels_pred, Label::Unstable)?;
    Ok(ClassificationReport {
        model: model.to_string(),
        accuracy: cm.accuracy(),
        unstable: precision_recall_f1(&cm),
        stable: precision_recall_f1(&cm.swapped()),
        n: cm.total(),
    })
}

/// Pearson correlations over the 12 features plus stab: 13×13, symmetric,
/// unit diagonal.
pub fn correlation_matrix(ds: &Dataset) -> Result<Vec<Vec<f64>>, ModelError> {
    let n = ds.len();
    if n < 2 {
        return Err(ModelError::TooFewRows { need: 2, have: n });
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(13);
    let fm = ds.feature_matrix();
    for j in 0..12 {
        columns.push((0..n).map(|i| fm.get(i, j)).collect());
    }
    columns.push(ds.stab_values());

    let nf = n as f64;
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let stds: Vec<f64> = columns
        .iter()
        .zip(&means)
        .map(|(c, &m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf).sqrt())
        .collect();
    for (j, &s) in stds.iter().enumerate() {
        if s <= 0.0 {
            return Err(ModelError::ZeroVariance(j));
        }
    }
    let mut out = vec![vec![0.0; 13]; 13];
    for a in 0..13 {
        out[a][a] = 1.0;
        for b in a + 1..13 {
            let cov: f64 = columns[a]
                .iter()
                .zip(&columns[b])
                .map(|(&x, &y)| (x - means[a]) * (y - means[b]))
                .sum::<f64>()
                / nf;
            let corr = cov / (stds[a] * stds[b]);
            out[a][b] = corr;
            out[b][a] = corr;
        }
    }
    Ok(out)
}

/// Column names for the correlation matrix, in order.
pub fn correlation_columns() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = FEATURE_NAMES.to_vec();
    v.push("stab");
    v
}

/// Order-preserving (feature value, stab) pairs for external plotting.
pub fn scatter_export(ds: &Dataset, feature: &str) -> Result<Vec<(f64, f64)>, ModelError> {
    let idx = FEATURE_NAMES
        .iter()
        .position(|&n| n == feature)
        .ok_or_else(|| ModelError::UnknownFeature(feature.to_string()))?;
    Ok(ds
        .records()
        .iter()
        .map(|r| (r.features()[idx], r.stab))
        .collect())
}
