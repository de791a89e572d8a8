//! Segmentation metrics: confusion matrix, per-class precision/recall/IoU,
//! mean IoU, and the binary Clear-vs-Cloud collapse.
//!
//! Label convention everywhere: 0 = Clear, 1 = Thick cloud, 2 = Thin cloud,
//! 255 = ignore. Ignored pixels are counted separately and never enter the
//! metric formulas.

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;
pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["Clear", "Thick", "Thin"];

/// Rows are ground truth, columns are prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; N_CLASSES]; N_CLASSES],
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates one prediction/truth pair. Truth 255 counts as ignored.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "update_confusion",
                format!("{} predictions vs {} truth pixels", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if t as usize >= N_CLASSES {
                return Err(Error::invalid("update_confusion", format!("truth label {t}")));
            }
            if p as usize >= N_CLASSES {
                return Err(Error::invalid("update_confusion", format!("predicted label {p}")));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Merges another matrix in; accumulation is associative and
    /// commutative, so per-tile matrices can be combined in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                self.counts[t][p] += other.counts[t][p];
            }
        }
        self.ignored += other.ignored;
    }

    pub fn counts(&self) -> &[[u64; N_CLASSES]; N_CLASSES] {
        &self.counts
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Total pixels seen: classified + ignored.
    pub fn pixels(&self) -> u64 {
        self.classified() + self.ignored
    }

    pub fn classified(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    /// True when the class appears in neither truth nor prediction; its
    /// metrics are then defined as 1.0 by convention.
    pub absent: bool,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub class_names: Vec<&'static str>,
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
}

fn metrics_from_counts(counts: &[Vec<u64>], names: &[&'static str]) -> MetricsReport {
    let k = counts.len();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = counts[c][c];
        let fp: u64 = (0..k).map(|t| counts[t][c]).sum::<u64>() - tp;
        let fn_: u64 = counts[c].iter().sum::<u64>() - tp;
        if tp + fp + fn_ == 0 {
            per_class.push(ClassMetrics { precision: 1.0, recall: 1.0, iou: 1.0, absent: true });
            continue;
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        per_class.push(ClassMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            iou: tp as f64 / (tp + fp + fn_) as f64,
            absent: false,
        });
    }
    let miou = per_class.iter().map(|m| m.iou).sum::<f64>() / k as f64;
    MetricsReport { class_names: names.to_vec(), per_class, miou }
}

/// Per-class precision, recall, IoU and their mean IoU. A class absent from
/// both truth and prediction scores 1.0 and is flagged, so tiny evaluations
/// are not poisoned by 0/0.
pub fn class_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let counts: Vec<Vec<u64>> = cm.counts.iter().map(|r| r.to_vec()).collect();
    metrics_from_counts(&counts, &CLASS_NAMES)
}

/// Collapses Thick+Thin into one Cloud class and recomputes the metrics on
/// the merged 2x2 matrix.
pub fn binary_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let collapse = |c: usize| usize::from(c != 0);
    let mut merged = vec![vec![0u64; 2]; 2];
    for t in 0..N_CLASSES {
        for p in 0..N_CLASSES {
            merged[collapse(t)][collapse(p)] += cm.counts[t][p];
        }
    }
    metrics_from_counts(&merged, &["Clear", "Cloud"])
}

/// Plain-text table with one row per class plus the mIoU line.
pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<8} {:>9} {:>9} {:>9}\n", "class", "prec", "rec", "iou"));
    for (name, m) in report.class_names.iter().zip(&report.per_class) {
        let mark = if m.absent { " (absent)" } else { "" };
        out.push_str(&format!(
            "{:<8} {:>9.4} {:>9.4} {:>9.4}{mark}\n",
            name, m.precision, m.recall, m.iou
        ));
    }
    out.push_str(&format!("mIoU {:.4}\n", report.miou));
    out
}

/// One JSON-like machine-readable line for the same numbers.
pub fn report_json_line(report: &MetricsReport) -> String {
    let classes: Vec<String> = report
        .class_names
        .iter()
        .zip(&report.per_class)
        .map(|(name, m)| {
            format!(
                "{{\"class\":\"{name}\",\"precision\":{:.6},\"recall\":{:.6},\"iou\":{:.6},\"absent\":{}}}",
                m.precision, m.recall, m.iou, m.absent
            )
        })
        .collect();
    format!("{{\"miou\":{:.6},\"classes\":[{}]}}", report.miou, classes.join(","))
}
