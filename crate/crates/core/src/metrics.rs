//! Confusion matrices, per-class precision/recall/F1, weight-trajectory
//! summaries and embedding dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::ParamSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict_batch, Backbone};
use crate::trainer::StepTrace;

/// Marker printed for a metric whose denominator is zero.
pub const UNDEFINED: &str = "undefined";

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::contract("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::contract("truth and prediction counts differ"));
        }
        let mut m = ConfusionMatrix::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::contract(format!("class out of range: true {t}, predicted {p}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl ClassReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Self {
        let classes = (0..m.num_classes())
            .map(|c| {
                let tp = m.counts[c][c];
                let precision = ratio(tp, m.predicted(c));
                let recall = ratio(tp, m.support(c));
                let f1 = match (precision, recall) {
                    (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                    (Some(_), Some(_)) => Some(0.0),
                    _ => None,
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: m.support(c),
                }
            })
            .collect();
        ClassReport {
            accuracy: ratio(m.correct(), m.total()).unwrap_or(0.0),
            classes,
        }
    }

    /// Macro averages over classes where the metric is defined.
    pub fn macro_precision(&self) -> Option<f64> {
        macro_mean(self.classes.iter().map(|c| c.precision))
    }

    pub fn macro_recall(&self) -> Option<f64> {
        macro_mean(self.classes.iter().map(|c| c.recall))
    }

    pub fn macro_f1(&self) -> Option<f64> {
        macro_mean(self.classes.iter().map(|c| c.f1))
    }
}

pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: ClassReport,
    /// Penultimate activations in the order of the evaluated indices.
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Classify `indices` of `dataset` with Θ.
pub fn evaluate(backbone: &dyn Backbone, theta: &ParamSet, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let rows = dataset.rows(indices)?;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut embeddings = Vec::with_capacity(indices.len());
    for chunk in rows.chunks(256) {
        for p in predict_batch(backbone, theta, chunk)? {
            predictions.push(p.class());
            embeddings.push(p.embedding);
        }
    }
    let labels = dataset.labels(indices)?;
    let confusion = ConfusionMatrix::from_predictions(&labels, &predictions, backbone.num_classes())?;
    Ok(Evaluation {
        report: ClassReport::from_confusion(&confusion),
        confusion,
        embeddings,
        labels,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSummary {
    /// Last 1-based epoch covered by this row.
    pub epoch: usize,
    pub omega_tr: Vec<f64>,
    pub omega_meta: Vec<f64>,
}

/// Per-class means of the logged ω over consecutive groups of `window` epochs.
pub fn summarize_weight_trajectory(trace: &[StepTrace], window: usize) -> Result<Vec<WeightSummary>> {
    if trace.is_empty() {
        return Err(Error::contract("empty trace"));
    }
    if window == 0 {
        return Err(Error::contract("window must be at least one epoch"));
    }
    let c = trace[0].omega_tr.len();
    let mut out: Vec<WeightSummary> = Vec::new();
    let mut count = 0usize;
    let mut group = usize::MAX;
    for step in trace {
        let g = (step.epoch.max(1) - 1) / window;
        if g != group {
            if let Some(last) = out.last_mut() {
                last.omega_tr.iter_mut().for_each(|v| *v /= count as f64);
                last.omega_meta.iter_mut().for_each(|v| *v /= count as f64);
            }
            out.push(WeightSummary {
                epoch: step.epoch,
                omega_tr: vec![0.0; c],
                omega_meta: vec![0.0; c],
            });
            group = g;
            count = 0;
        }
        let last = out.last_mut().expect("pushed above");
        last.epoch = step.epoch;
        for k in 0..c {
            last.omega_tr[k] += step.omega_tr[k];
            last.omega_meta[k] += step.omega_meta[k];
        }
        count += 1;
    }
    if let Some(last) = out.last_mut() {
        last.omega_tr.iter_mut().for_each(|v| *v /= count as f64);
        last.omega_meta.iter_mut().for_each(|v| *v /= count as f64);
    }
    Ok(out)
}

fn class_columns(prefix: &str, c: usize) -> String {
    (0..c).map(|k| format!(",{prefix}_c{k}")).collect()
}

/// One row per iteration.
pub fn trace_csv(trace: &[StepTrace], num_classes: usize) -> String {
    let mut s = format!(
        "iter,epoch{}{},mce,meta_loss,hypergrad_norm\n",
        class_columns("omega_tr", num_classes),
        class_columns("omega_meta", num_classes)
    );
    for t in trace {
        write!(s, "{},{}", t.iteration, t.epoch).unwrap();
        for v in t.omega_tr.iter().chain(&t.omega_meta) {
            write!(s, ",{v:.17e}").unwrap();
        }
        writeln!(s, ",{:.17e},{:.17e},{:.17e}", t.mce, t.meta_loss, t.hypergrad_norm).unwrap();
    }
    s
}

pub fn weight_summary_csv(rows: &[WeightSummary], num_classes: usize) -> String {
    let mut s = format!(
        "epoch{}{}\n",
        class_columns("omega_tr", num_classes),
        class_columns("omega_meta", num_classes)
    );
    for r in rows {
        write!(s, "{}", r.epoch).unwrap();
        for v in r.omega_tr.iter().chain(&r.omega_meta) {
            write!(s, ",{v:.17e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn embeddings_csv(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<String> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract("embedding and label counts differ"));
    }
    let h = embeddings.first().map_or(0, Vec::len);
    let mut s: String = (0..h).map(|k| format!("dim_{k},")).collect();
    s.push_str("label\n");
    for (e, l) in embeddings.iter().zip(labels) {
        if e.len() != h {
            return Err(Error::contract("embeddings have differing widths"));
        }
        for v in e {
            write!(s, "{v:.16e},").unwrap();
        }
        writeln!(s, "{l}").unwrap();
    }
    Ok(s)
}

pub fn dump_embeddings(embeddings: &[Vec<f64>], labels: &[usize], path: &Path) -> Result<()> {
    fs::write(path, embeddings_csv(embeddings, labels)?)?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.4}"))
}

/// Accuracy, then precision / recall / F1 per class, one row per method.
pub fn report_table(rows: &[(String, ClassReport)], class_names: &[&str]) -> String {
    let mut s = format!("{:<12} {:>10}", "Method", "Accuracy");
    for name in class_names {
        for m in ["P", "R", "F1"] {
            write!(s, " {:>10}", format!("{name}-{m}")).unwrap();
        }
    }
    s.push('\n');
    for (method, r) in rows {
        write!(s, "{method:<12} {:>10.4}", r.accuracy).unwrap();
        for c in &r.classes {
            for v in [c.precision, c.recall, c.f1] {
                write!(s, " {:>10}", cell(v)).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

pub fn report_csv(rows: &[(String, ClassReport)], class_names: &[&str]) -> String {
    let mut s = String::from("method,accuracy");
    for name in class_names {
        let name = name.to_lowercase();
        write!(s, ",{name}_precision,{name}_recall,{name}_f1").unwrap();
    }
    s.push('\n');
    let csv_cell = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.17e}"));
    for (method, r) in rows {
        write!(s, "{method},{:.17e}", r.accuracy).unwrap();
        for c in &r.classes {
            for v in [c.precision, c.recall, c.f1] {
                write!(s, ",{}", csv_cell(v)).unwrap();
            }
        }
        s.push('\n');
    }
    s
}
