//! Classification metrics, reconstruction reports and plot-data export.

mod export;
mod recon;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use export::{feature_rows, write_feature_csv, write_loss_csv, write_trace_csv};
pub use recon::{accumulate_cell_errors, reconstruct_epoch, reconstruction_mse_report, ReconEvalOptions, ReconReport};

use crate::error::{Error, Result};

/// Rows are true categories, columns predicted ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() || counts.nrows() < 2 {
            return Err(Error::ShapeMismatch(format!("confusion counts {:?}", counts.dim())));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn true_positives(&self, j: usize) -> u64 {
        self.counts[[j, j]]
    }

    pub fn false_positives(&self, j: usize) -> u64 {
        self.counts.column(j).sum() - self.counts[[j, j]]
    }

    pub fn false_negatives(&self, j: usize) -> u64 {
        self.counts.row(j).sum() - self.counts[[j, j]]
    }

    pub fn true_negatives(&self, j: usize) -> u64 {
        self.total() - self.true_positives(j) - self.false_positives(j) - self.false_negatives(j)
    }

    pub fn support(&self, j: usize) -> u64 {
        self.counts.row(j).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::LengthMismatch { left: self.k(), right: other.k() });
        }
        self.counts += &other.counts;
        Ok(())
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: pred.len() });
    }
    let mut counts = Array2::zeros((k, k));
    for (&t, &p) in truth.iter().zip(pred) {
        if let Some(&label) = [t, p].iter().find(|&&v| v >= k) {
            return Err(Error::LabelOutOfRange { label, k });
        }
        counts[[t, p]] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// One-vs-rest scores for a single category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub support: u64,
    /// 0 when nothing was predicted as this category.
    pub precision: f64,
    /// `None` when the category never occurs.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub const PER_CATEGORY_ACCURACY_NOTE: &str =
    "per-category accuracy is the recall of that category: correctly predicted epochs / true epochs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub note: String,
    pub total: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub categories: Vec<CategoryMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricReport {
    /// Recall of each category, `None` for absent categories.
    pub fn per_category_accuracy(&self) -> Vec<Option<f64>> {
        self.categories.iter().map(|c| c.recall).collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    metrics_named(cm, &[])
}

/// As [`metrics`], labelling categories with `names` where given.
pub fn metrics_named(cm: &ConfusionMatrix, names: &[&str]) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let trace: u64 = (0..cm.k()).map(|j| cm.true_positives(j)).sum();
    let categories: Vec<CategoryMetrics> = (0..cm.k())
        .map(|j| {
            let tp = cm.true_positives(j);
            let support = cm.support(j);
            let precision = ratio(tp, tp + cm.false_positives(j));
            let recall = (support > 0).then(|| ratio(tp, support));
            let f1 = recall.map(|r| if precision + r == 0.0 { 0.0 } else { 2.0 * precision * r / (precision + r) });
            CategoryMetrics {
                name: names.get(j).map_or_else(|| j.to_string(), |s| s.to_string()),
                support,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let scored: Vec<f64> = categories.iter().filter_map(|c| c.f1).collect();
    let macro_f1 = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(MetricReport {
        note: PER_CATEGORY_ACCURACY_NOTE.into(),
        total,
        accuracy: trace as f64 / total as f64,
        macro_f1,
        categories,
        confusion: cm.counts.outer_iter().map(|r| r.to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over the folds that define the value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub name: String,
    pub precision: MeanStd,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub categories: Vec<CategorySummary>,
}

/// Unweighted mean and spread of every metric across folds.
pub fn cv_aggregate(reports: &[MetricReport]) -> Result<CvSummary> {
    let first = reports.first().ok_or(Error::EmptyMatrix)?;
    let k = first.categories.len();
    if let Some(r) = reports.iter().find(|r| r.categories.len() != k) {
        return Err(Error::LengthMismatch { left: r.categories.len(), right: k });
    }
    let collect = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let categories = (0..k)
        .map(|j| CategorySummary {
            name: first.categories[j].name.clone(),
            precision: MeanStd::of(&collect(&|r| Some(r.categories[j].precision))).expect("non-empty"),
            recall: MeanStd::of(&collect(&|r| r.categories[j].recall)),
            f1: MeanStd::of(&collect(&|r| r.categories[j].f1)),
        })
        .collect();
    Ok(CvSummary {
        folds: reports.len(),
        accuracy: MeanStd::of(&collect(&|r| Some(r.accuracy))).expect("non-empty"),
        macro_f1: MeanStd::of(&collect(&|r| Some(r.macro_f1))).expect("non-empty"),
        categories,
    })
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows<F: PartialOrd + Copy>(probs: ndarray::ArrayView2<F>) -> Vec<usize> {
    probs
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
