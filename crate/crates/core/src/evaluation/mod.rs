//! Confusion matrices, per-class and averaged metrics, fold-ensemble
//! aggregation, misclassification analysis, prediction and header audits.

pub mod audit;
pub mod plots;
pub mod predict;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingestion::LabelSet;

pub use audit::{audit_consistency, AuditEntry, AuditInput, AuditReport, AuditStatus};
pub use predict::{ensemble_probabilities, predict_volume, Prediction};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("label index {index} outside the {classes}-class profile")]
    LabelOutOfRange { index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("reports mix label sets {0} and {1}")]
    MixedLabelSets(LabelSet, LabelSet),
    #[error("no reports to aggregate")]
    NoReports,
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocessing::PreprocessError),
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub label_set: LabelSet,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(label_set: LabelSet) -> Self {
        let c = label_set.num_classes();
        Self {
            label_set,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    /// CSV with a header row of predicted labels and one row per truth.
    pub fn to_csv(&self) -> String {
        let names = self.label_set.classes();
        let mut s = String::from("true\\predicted");
        for n in names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(names[i]);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(label_set: LabelSet, pairs: &[(usize, usize)]) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::zeros(label_set);
    let classes = cm.classes();
    for &(t, p) in pairs {
        for index in [t, p] {
            if index >= classes {
                return Err(EvalError::LabelOutOfRange { index, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label_set: LabelSet,
    pub n_samples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Support-weighted averages; the headline numbers.
    pub weighted: Averages,
    pub macro_avg: Averages,
    /// Classes with no ground-truth samples; their metrics are 0.
    pub zero_support: Vec<String>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let n = cm.total();
    if n == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let c = cm.classes();
    let names = cm.label_set.classes();
    let mut per_class = Vec::with_capacity(c);
    let mut zero_support = Vec::new();
    for k in 0..c {
        let tp = cm.counts[k][k];
        let support: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = (0..c).map(|t| cm.counts[t][k]).sum();
        let (precision, recall, f1) = if support == 0 {
            zero_support.push(names[k].to_string());
            (0.0, 0.0, 0.0)
        } else {
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        };
        per_class.push(ClassMetrics {
            label: names[k].to_string(),
            support,
            precision,
            recall,
            f1,
        });
    }
    let avg = |weight: &dyn Fn(&ClassMetrics) -> f64| {
        let total: f64 = per_class.iter().map(weight).sum();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| weight(m) * f(m)).sum::<f64>() / total;
        Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        }
    };
    Ok(MetricsReport {
        label_set: cm.label_set,
        n_samples: n,
        accuracy: ratio(cm.trace(), n),
        weighted: avg(&|m| m.support as f64),
        macro_avg: avg(&|_| 1.0),
        per_class,
        zero_support,
        confusion: cm.clone(),
    })
}

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 7] = [
    "accuracy",
    "precision_weighted",
    "recall_weighted",
    "f1_weighted",
    "precision_macro",
    "recall_macro",
    "f1_macro",
];

impl MetricsReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "accuracy" => self.accuracy,
            "precision_weighted" => self.weighted.precision,
            "recall_weighted" => self.weighted.recall,
            "f1_weighted" => self.weighted.f1,
            "precision_macro" => self.macro_avg.precision,
            "recall_macro" => self.macro_avg.recall,
            "f1_macro" => self.macro_avg.f1,
            _ => return None,
        })
    }
}

/// Fold statistics of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldStat {
    pub name: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation across folds (0 for one fold).
    pub sd: f64,
    /// Normal-approximation 95% interval of the mean, clamped to [0, 1].
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl FoldStat {
    /// `"99.50% (99.29%-99.71%)"`: mean with the min-max fold range.
    pub fn display_range(&self) -> String {
        format_with_range(self.mean, self.min, self.max)
    }

    pub fn display_ci(&self) -> String {
        format_with_range(self.mean, self.ci95_low, self.ci95_high)
    }
}

pub fn format_with_range(mean: f64, lo: f64, hi: f64) -> String {
    format!("{:.2}% ({:.2}%-{:.2}%)", 100.0 * mean, 100.0 * lo, 100.0 * hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub label_set: LabelSet,
    pub k: usize,
    pub stats: Vec<FoldStat>,
    pub aggregate: ConfusionMatrix,
    pub folds: Vec<MetricsReport>,
}

impl EnsembleReport {
    pub fn stat(&self, name: &str) -> Option<&FoldStat> {
        self.stats.iter().find(|s| s.name == name)
    }
}

pub fn ensemble_metrics(reports: &[MetricsReport]) -> Result<EnsembleReport, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if let Some(r) = reports.iter().find(|r| r.label_set != first.label_set) {
        return Err(EvalError::MixedLabelSets(first.label_set, r.label_set));
    }
    let k = reports.len();
    let stats = METRIC_NAMES
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = reports.iter().map(|r| r.metric(name).unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / k as f64;
            let sd = if k > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
            } else {
                0.0
            };
            let half = 1.96 * sd / (k as f64).sqrt();
            FoldStat {
                name: name.to_string(),
                mean,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                sd,
                ci95_low: (mean - half).clamp(0.0, 1.0),
                ci95_high: (mean + half).clamp(0.0, 1.0),
            }
        })
        .collect();
    let mut aggregate = ConfusionMatrix::zeros(first.label_set);
    for r in reports {
        aggregate.add(&r.confusion);
    }
    Ok(EnsembleReport {
        label_set: first.label_set,
        k,
        stats,
        aggregate,
        folds: reports.to_vec(),
    })
}

/// A per-series outcome used to attach examples to confusion cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPrediction {
    pub patient_id: String,
    pub study_uid: String,
    pub series_uid: String,
    pub true_index: usize,
    pub predicted_index: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisclassificationEntry {
    pub true_label: String,
    pub predicted_label: String,
    pub true_index: usize,
    pub predicted_index: usize,
    pub count: u64,
    pub examples: Vec<String>,
}

pub const MAX_EXAMPLES: usize = 5;

/// Off-diagonal cells by descending count, ties by (true, predicted).
pub fn misclassification_report(cm: &ConfusionMatrix, predictions: &[SeriesPrediction]) -> Vec<MisclassificationEntry> {
    let names = cm.label_set.classes();
    let mut out = Vec::new();
    for t in 0..cm.classes() {
        for p in 0..cm.classes() {
            let count = cm.counts[t][p];
            if t == p || count == 0 {
                continue;
            }
            let mut examples: Vec<String> = predictions
                .iter()
                .filter(|s| s.true_index == t && s.predicted_index == p)
                .map(|s| s.series_uid.clone())
                .collect();
            examples.sort();
            examples.dedup();
            examples.truncate(MAX_EXAMPLES);
            out.push(MisclassificationEntry {
                true_label: names[t].to_string(),
                predicted_label: names[p].to_string(),
                true_index: t,
                predicted_index: p,
                count,
                examples,
            });
        }
    }
    out.sort_by(|a, b| b.count.cmp(&a.count).then((a.true_index, a.predicted_index).cmp(&(b.true_index, b.predicted_index))));
    out
}

/// Table-style text summary of a cross-validated run.
pub fn summary_table(title: &str, e: &EnsembleReport) -> String {
    let mut s = String::new();
    writeln!(s, "# {title}").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "{} folds, {} test classifications ({} profile)", e.k, e.aggregate.total(), e.label_set).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "Fold mean with min-max fold range:").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "| Averaging | Accuracy | Precision | Recall | F1 Score |").unwrap();
    writeln!(s, "|---|---|---|---|---|").unwrap();
    let cell = |n: &str| e.stat(n).map(FoldStat::display_range).unwrap_or_default();
    for (scheme, suffix) in [("weighted", "weighted"), ("macro", "macro")] {
        writeln!(
            s,
            "| {scheme} | {} | {} | {} | {} |",
            cell("accuracy"),
            cell(&format!("precision_{suffix}")),
            cell(&format!("recall_{suffix}")),
            cell(&format!("f1_{suffix}"))
        )
        .unwrap();
    }
    writeln!(s).unwrap();
    writeln!(s, "Normal-approximation 95% interval of the fold mean:").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "| Metric | Mean (95% CI) | SD |").unwrap();
    writeln!(s, "|---|---|---|").unwrap();
    for st in &e.stats {
        writeln!(s, "| {} | {} | {:.4} |", st.name, st.display_ci(), st.sd).unwrap();
    }
    writeln!(s).unwrap();
    writeln!(s, "Per-fold weighted F1: {}", e.folds.iter().map(|f| format!("{:.4}", f.weighted.f1)).collect::<Vec<_>>().join(", ")).unwrap();
    let zero: Vec<&str> = e.folds.iter().flat_map(|f| f.zero_support.iter().map(String::as_str)).collect();
    if !zero.is_empty() {
        writeln!(s, "Zero-support classes in some fold (metrics set to 0): {}", zero.join(", ")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_by_hand() {
        let cm = ConfusionMatrix {
            label_set: LabelSet::Body,
            counts: vec![
                vec![8, 2, 0, 0, 0],
                vec![1, 9, 0, 0, 0],
                vec![0; 5],
                vec![0; 5],
                vec![0; 5],
            ],
        };
        let r = compute_metrics(&cm).unwrap();
        assert!((r.per_class[0].precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.8).abs() < 1e-12);
        assert!((r.accuracy - 17.0 / 20.0).abs() < 1e-12);
        assert_eq!(r.zero_support, vec!["T2FS", "DWI", "ADC"]);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(compute_metrics(&ConfusionMatrix::zeros(LabelSet::Brain)), Err(EvalError::EmptyMatrix)));
        let cm = confusion_matrix(LabelSet::Body, &[]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(confusion_matrix(LabelSet::Brain, &[(0, 4)]), Err(EvalError::LabelOutOfRange { .. })));
    }

    #[test]
    fn range_format() {
        assert_eq!(format_with_range(0.995, 0.9929, 0.9971), "99.50% (99.29%-99.71%)");
    }

    #[test]
    fn ensemble_arithmetic() {
        let mk = |f1_hits: u64| {
            let mut cm = ConfusionMatrix::zeros(LabelSet::Body);
            for k in 0..5 {
                cm.counts[k][k] = 40;
            }
            cm.counts[3][2] = 200 - f1_hits;
            compute_metrics(&cm).unwrap()
        };
        let reports: Vec<_> = [200, 190, 195].into_iter().map(mk).collect();
        let e = ensemble_metrics(&reports).unwrap();
        let acc = e.stat("accuracy").unwrap();
        let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
        assert!((acc.mean - mean).abs() < 1e-12);
        assert!(acc.min <= acc.mean && acc.mean <= acc.max);
        assert_eq!(e.aggregate.total(), reports.iter().map(|r| r.n_samples).sum::<u64>());
        let single = ensemble_metrics(&reports[..1]).unwrap();
        assert_eq!(single.stat("f1_weighted").unwrap().mean, reports[0].weighted.f1);
    }
}
