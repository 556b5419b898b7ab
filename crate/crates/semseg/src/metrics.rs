//! Confusion-matrix accumulation and the IoU metric family. Counts are
//! integers end to end, so per-worker matrices merged after the fact are
//! bit-identical to a sequential pass.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×K pixel counts, rows indexed by ground-truth class and columns by
/// predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::Metric(format!(
                "expected {}x{} counts, got {}",
                n_classes,
                n_classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel of a (prediction, truth) grid pair.
    pub fn accumulate(
        &mut self,
        predicted: ArrayView2<'_, u8>,
        truth: ArrayView2<'_, u8>,
    ) -> Result<()> {
        if predicted.dim() != truth.dim() {
            return Err(Error::Metric(format!(
                "grid dims disagree: {:?} vs {:?}",
                predicted.dim(),
                truth.dim()
            )));
        }
        let k = self.n_classes;
        for (&p, &t) in predicted.iter().zip(truth.iter()) {
            if (p as usize) >= k || (t as usize) >= k {
                return Err(Error::Metric(format!(
                    "label out of range for {k} classes: predicted {p}, truth {t}"
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum; the merge of per-worker matrices.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.n_classes != other.n_classes {
            return Err(Error::Metric(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n_classes, other.n_classes
            )));
        }
        let counts = self
            .counts
            .iter()
            .zip(other.counts.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(ConfusionMatrix {
            n_classes: self.n_classes,
            counts,
        })
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.count(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|t| self.count(t, c)).sum()
    }

    /// Per-class intersection and union counts; IoU = intersection/union.
    pub fn class_counts(&self, c: usize) -> (u64, u64) {
        let tp = self.count(c, c);
        let union = self.row_sum(c) + self.col_sum(c) - tp;
        (tp, union)
    }

    /// IoU per class; `None` marks classes absent from both prediction and
    /// truth (zero union), which are excluded from means.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let (tp, union) = self.class_counts(c);
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        let ious = self.iou_per_class();
        let defined: Vec<f64> = ious.into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Metric("no class has a defined IoU".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Per-class IoU weighted by ground-truth pixel frequency.
    pub fn frequency_weighted_iou(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("empty confusion matrix".into()));
        }
        let mut acc = 0.0f64;
        for c in 0..self.n_classes {
            let t_c = self.row_sum(c);
            if t_c == 0 {
                continue;
            }
            let (tp, union) = self.class_counts(c);
            acc += t_c as f64 * (tp as f64 / union as f64);
        }
        Ok(acc / total as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.n_classes).map(|c| self.count(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

/// Evaluation summary in the column order of the benchmark tables:
/// mIoU, fIoU, then one column per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub miou: f64,
    pub fiou: f64,
    pub pixel_accuracy: f64,
    /// `None` flags classes with zero union (undefined IoU).
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn build_report(cm: &ConfusionMatrix, class_names: &[String]) -> Result<EvalReport> {
    if class_names.len() != cm.n_classes() {
        return Err(Error::Metric(format!(
            "{} class names for a {}-class matrix",
            class_names.len(),
            cm.n_classes()
        )));
    }
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        miou: cm.mean_iou()?,
        fiou: cm.frequency_weighted_iou()?,
        pixel_accuracy: cm.pixel_accuracy()?,
        per_class_iou: cm.iou_per_class(),
    })
}

impl EvalReport {
    /// Aligned plain-text table, values rounded to 2 decimals; undefined
    /// classes render as "-".
    pub fn render_table(&self, method: &str) -> String {
        let mut headers: Vec<String> = vec!["Method".into(), "mIoU".into(), "fIoU".into()];
        headers.extend(self.class_names.iter().cloned());
        let mut values: Vec<String> = vec![
            method.to_string(),
            format!("{:.2}", self.miou),
            format!("{:.2}", self.fiou),
        ];
        values.extend(self.per_class_iou.iter().map(|i| match i {
            Some(v) => format!("{v:.2}"),
            None => "-".to_string(),
        }));
        let widths: Vec<usize> = headers
            .iter()
            .zip(values.iter())
            .map(|(h, v)| h.chars().count().max(v.chars().count()))
            .collect();
        let fmt_row = |cells: &[String]| {
            cells
                .iter()
                .zip(widths.iter())
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", fmt_row(&headers), fmt_row(&values))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
