//! Confusion matrices, per-class precision/recall/F-beta and their averages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{class_index, validate_class_order, GestureLabel};
use crate::model::{argmax, ClassifierModel};
use crate::prep::Dataset;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<GestureLabel>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<GestureLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        validate_class_order(&classes)?;
        if counts.len() != classes.len() || counts.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::Evaluation(format!(
                "confusion counts must be {0}x{0}",
                classes.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[GestureLabel] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Writes the matrix with a header of predicted-class slugs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().map(|c| c.slug().to_string()));
        w.write_record(&header)?;
        for (label, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![label.slug().to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn confusion(
    predictions: &[GestureLabel],
    truths: &[GestureLabel],
    class_order: &[GestureLabel],
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truths.len()
        )));
    }
    validate_class_order(class_order)?;
    let c = class_order.len();
    let mut counts = vec![vec![0u64; c]; c];
    let index = |l| class_index(l, class_order).map_err(|e| Error::Evaluation(e.to_string()));
    for (&p, &t) in predictions.iter().zip(truths) {
        counts[index(t)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: class_order.to_vec(),
        counts,
    })
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    ratio((1.0 + b2) * precision * recall, b2 * precision + recall).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: GestureLabel,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub support: u64,
    /// Set when any of the three ratios hit 0/0 and were defined as 0.
    #[serde(default)]
    pub ill_defined: bool,
}

impl ClassMetrics {
    pub fn from_scores(label: GestureLabel, precision: f64, recall: f64, support: u64, beta: f64) -> Self {
        Self {
            label,
            precision,
            recall,
            f_beta: f_beta(precision, recall, beta),
            support,
            ill_defined: false,
        }
    }
}

pub fn per_class_metrics(m: &ConfusionMatrix, beta: f64) -> Vec<ClassMetrics> {
    (0..m.classes.len())
        .map(|i| {
            let tp = m.get(i, i) as f64;
            let (precision, p_bad) = ratio(tp, m.column_sum(i) as f64);
            let (recall, r_bad) = ratio(tp, m.row_sum(i) as f64);
            let b2 = beta * beta;
            let (f, f_bad) = ratio((1.0 + b2) * precision * recall, b2 * precision + recall);
            let ill_defined = p_bad || r_bad || f_bad;
            if ill_defined {
                log::warn!("{}: metric is ill-defined (0/0), reported as 0", m.classes[i]);
            }
            ClassMetrics {
                label: m.classes[i],
                precision,
                recall,
                f_beta: f,
                support: m.row_sum(i),
                ill_defined,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

pub fn macro_average(rows: &[ClassMetrics]) -> Result<Averages> {
    if rows.is_empty() {
        return Err(Error::Evaluation("no classes to average".into()));
    }
    let n = rows.len() as f64;
    Ok(Averages {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f_beta: rows.iter().map(|r| r.f_beta).sum::<f64>() / n,
    })
}

pub fn weighted_average(rows: &[ClassMetrics]) -> Result<Averages> {
    let total: u64 = rows.iter().map(|r| r.support).sum();
    if total == 0 {
        return Err(Error::Evaluation("total support is zero".into()));
    }
    let t = total as f64;
    let w = |f: fn(&ClassMetrics) -> f64| rows.iter().map(|r| f(r) * r.support as f64).sum::<f64>() / t;
    Ok(Averages {
        precision: w(|r| r.precision),
        recall: w(|r| r.recall),
        f_beta: w(|r| r.f_beta),
    })
}

/// Averages over globally pooled TP/FP/FN counts.
pub fn micro_average(m: &ConfusionMatrix, beta: f64) -> Result<Averages> {
    let c = m.classes.len();
    let tp = m.trace() as f64;
    let fp: f64 = (0..c).map(|j| (m.column_sum(j) - m.get(j, j)) as f64).sum();
    let fn_: f64 = (0..c).map(|i| (m.row_sum(i) - m.get(i, i)) as f64).sum();
    if tp + fp == 0.0 {
        return Err(Error::Evaluation("empty confusion matrix".into()));
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(Averages {
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta),
    })
}

pub fn aggregate(per_class: &[ClassMetrics], m: &ConfusionMatrix, beta: f64) -> Result<(Averages, Averages, Averages)> {
    Ok((micro_average(m, beta)?, macro_average(per_class)?, weighted_average(per_class)?))
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Evaluation("empty confusion matrix".into()));
    }
    Ok(m.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub micro: Averages,
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub total_support: u64,
    pub beta: f64,
}

impl ClassificationReport {
    pub fn from_confusion(m: &ConfusionMatrix, beta: f64) -> Result<Self> {
        let per_class = per_class_metrics(m, beta);
        let (micro, macro_avg, weighted) = aggregate(&per_class, m, beta)?;
        Ok(Self {
            total_support: m.total(),
            per_class,
            micro,
            macro_avg,
            weighted,
            beta,
        })
    }

    /// Builds a report from per-class rows alone.
    ///
    /// With one label per sample, pooled TP equals Σ recall·support and
    /// every sample is predicted exactly once, so all three micro figures
    /// equal the support-weighted recall.
    pub fn from_rows(per_class: Vec<ClassMetrics>, beta: f64) -> Result<Self> {
        let macro_avg = macro_average(&per_class)?;
        let weighted = weighted_average(&per_class)?;
        let acc = weighted.recall;
        Ok(Self {
            total_support: per_class.iter().map(|r| r.support).sum(),
            per_class,
            micro: Averages {
                precision: acc,
                recall: acc,
                f_beta: acc,
            },
            macro_avg,
            weighted,
            beta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

pub fn render_report(report: &ClassificationReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Text => Ok(render_text(report)),
    }
}

fn render_text(report: &ClassificationReport) -> String {
    let score = if report.beta == 1.0 {
        "F1-score".to_string()
    } else {
        format!("F{}-score", report.beta)
    };
    let width = report
        .per_class
        .iter()
        .map(|r| r.label.name().len())
        .chain([16])
        .max()
        .unwrap_or(16);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}", "Class Label", "Precision", "Recall", score, "Support");
    let mut line = |name: &str, p: f64, r: f64, f: f64, s: u64| {
        let _ = writeln!(out, "{name:<width$}  {p:>9.2}  {r:>6.2}  {f:>8.2}  {s:>7}");
    };
    for row in &report.per_class {
        line(row.label.name(), row.precision, row.recall, row.f_beta, row.support);
    }
    for (name, a) in [
        ("Micro average", report.micro),
        ("Macro average", report.macro_avg),
        ("Weighted average", report.weighted),
    ] {
        line(name, a.precision, a.recall, a.f_beta, report.total_support);
    }
    out
}

/// Runs inference over a dataset and returns the argmax labels.
pub fn predict_labels(model: &ClassifierModel, data: &dyn Dataset) -> Result<Vec<GestureLabel>> {
    (0..data.len())
        .map(|i| {
            let t = data.tensor(i)?;
            let f = model.features(t.view())?;
            let p = model.head.predict(f.view().insert_axis(ndarray::Axis(0)));
            Ok(model.class_order[argmax(p.row(0).iter().copied())])
        })
        .collect()
}

/// Writes `report.json`, `report.txt` and `confusion.csv` into `dir`.
pub fn write_report_files(report: &ClassificationReport, m: &ConfusionMatrix, dir: &Path) -> Result<()> {
    for (name, fmt) in [("report.json", ReportFormat::Json), ("report.txt", ReportFormat::Text)] {
        let path = dir.join(name);
        fs::write(&path, render_report(report, fmt)?).map_err(|e| Error::io(&path, e))?;
    }
    m.write_csv(&dir.join("confusion.csv"))
}
