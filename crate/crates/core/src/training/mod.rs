//! Patient-level splitting, cross-validation planning, and the training
//! loop with best-validation-accuracy checkpointing.

mod adam;
mod cv;
mod dataset;
mod trainer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ingestion::StudyRecord;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

pub use adam::Adam;
pub use cv::{run_cross_validation, CvOptions, CvResult, FoldResult};
pub use dataset::{PreparedDataset, Sample};
pub use trainer::{evaluate_samples, train_fold, FoldOutcome};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("need at least 3 patients, found {0}")]
    TooFewPatients(usize),
    #[error("cannot build {k} folds from {pool} patients")]
    TooFewForK { pool: usize, k: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss in fold {fold}, epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { fold: usize, epoch: usize, batch: usize, detail: String },
    #[error("fold {fold} is empty: {detail}")]
    EmptyFold { fold: usize, detail: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocessing::PreprocessError),
    #[error(transparent)]
    Ingest(#[from] crate::ingestion::IngestError),
    #[error("cannot write {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// (train, validation, test).
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.70, 0.10, 0.20],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(TrainingError::InvalidConfig(format!(
                "ratios {:?} must be non-negative and sum to 1 (sum is {sum})",
                self.ratios
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Unique patient IDs of a manifest, sorted.
pub fn unique_patients(studies: &[StudyRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = studies.iter().map(|s| s.patient_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

pub fn split_patients(studies: &[StudyRecord], spec: &SplitSpec) -> Result<PatientSplit, TrainingError> {
    split_ids(&unique_patients(studies), spec)
}

/// Seeded shuffle of the sorted unique IDs, then contiguous cuts at
/// `round(n * r_train)` and `round(n * (r_train + r_val))`.
pub fn split_ids(ids: &[String], spec: &SplitSpec) -> Result<PatientSplit, TrainingError> {
    spec.validate()?;
    let mut ids: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if n < 3 {
        return Err(TrainingError::TooFewPatients(n));
    }
    SeededRng::new(spec.seed).shuffle(&mut ids);
    let [rt, rv, _] = spec.ratios;
    let a = ((n as f64 * rt).round() as usize).min(n);
    let b = ((n as f64 * (rt + rv)).round() as usize).clamp(a, n);
    let test = ids.split_off(b);
    let validation = ids.split_off(a);
    Ok(PatientSplit {
        train: ids,
        validation,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
    pub test: Vec<String>,
}

impl FoldPlan {
    /// Describes the first leakage or partition violation found.
    pub fn check(&self) -> Result<(), String> {
        let test: BTreeSet<&String> = self.test.iter().collect();
        let mut seen_val: BTreeSet<&String> = BTreeSet::new();
        let mut pool: Option<BTreeSet<&String>> = None;
        for f in &self.folds {
            let tr: BTreeSet<&String> = f.train.iter().collect();
            let va: BTreeSet<&String> = f.validation.iter().collect();
            if tr.len() != f.train.len() || va.len() != f.validation.len() {
                return Err(format!("fold {} repeats a patient", f.fold_id));
            }
            if let Some(p) = tr.intersection(&va).next() {
                return Err(format!("fold {}: {p} in both train and validation", f.fold_id));
            }
            if let Some(p) = tr.union(&va).find(|p| test.contains(*p)) {
                return Err(format!("fold {}: {p} also in test", f.fold_id));
            }
            let union: BTreeSet<&String> = tr.union(&va).copied().collect();
            match &pool {
                None => pool = Some(union),
                Some(p) if *p != union => return Err(format!("fold {} covers a different pool", f.fold_id)),
                _ => {}
            }
            if self.k > 1 {
                if let Some(p) = va.iter().find(|p| seen_val.contains(*p)) {
                    return Err(format!("{p} validates in two folds"));
                }
                seen_val.extend(va);
            }
        }
        if self.k > 1 && pool.as_ref().is_some_and(|p| *p != seen_val) {
            return Err("validation chunks do not cover the pool".into());
        }
        Ok(())
    }
}

/// Seeded shuffle of the sorted pool, then `k` contiguous validation chunks
/// whose sizes differ by at most one (the first `n % k` get the extra).
pub fn make_folds(pool: &[String], k: usize, seed: u64) -> Result<Vec<Fold>, TrainingError> {
    let mut ids: Vec<String> = pool.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if k == 0 || n < k {
        return Err(TrainingError::TooFewForK { pool: n, k });
    }
    SeededRng::new(seed).shuffle(&mut ids);
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let validation = ids[start..start + len].to_vec();
        let train = ids[..start].iter().chain(&ids[start + len..]).cloned().collect();
        folds.push(Fold {
            fold_id: i,
            train,
            validation,
        });
        start += len;
    }
    Ok(folds)
}

/// Folds over train+validation with the test split held fixed. With
/// `k == 1` the split's own train/validation sets form the single fold.
pub fn plan_folds(split: &PatientSplit, k: usize, seed: u64) -> Result<FoldPlan, TrainingError> {
    let folds = if k == 1 {
        vec![Fold {
            fold_id: 0,
            train: split.train.clone(),
            validation: split.validation.clone(),
        }]
    } else {
        let pool: Vec<String> = split.train.iter().chain(&split.validation).cloned().collect();
        make_folds(&pool, k, derive_seed(seed, &[0xf01d]))?
    };
    Ok(FoldPlan {
        k,
        folds,
        test: split.test.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: 1e-4,
            epochs: 25,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("beta1/beta2 must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

/// Earliest epoch with the highest validation accuracy.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.validation_accuracy > b.validation_accuracy) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

/// Mean cross-entropy of a (B, C) logit tensor.
pub fn compute_loss(logits: &Tensor, labels: &[usize]) -> Result<f64, TrainingError> {
    Ok(cross_entropy(logits, labels)?.0)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), TrainingError> {
    let c = logits.shape()[1];
    let b = labels.len();
    assert_eq!(logits.shape()[0], b, "one label per logit row");
    let mut grad = Vec::with_capacity(b * c);
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        if l >= c {
            return Err(TrainingError::LabelOutOfRange { label: l, classes: c });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - row[l];
        for (j, v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            grad.push((p - if j == l { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    Ok((total / b as f64, Tensor::new(vec![b, c], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:04}")).collect()
    }

    #[test]
    fn reference_cohort_split_sizes() {
        let s = split_ids(&ids(1234), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (864, 123, 247));
        let s = split_ids(&ids(10), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        assert!(matches!(split_ids(&ids(2), &SplitSpec::default()), Err(TrainingError::TooFewPatients(2))));
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let spec = SplitSpec {
            ratios: [0.7, 0.1, 0.1],
            seed: 0,
        };
        let e = spec.validate().unwrap_err().to_string();
        assert!(e.contains("ratios"), "{e}");
    }

    #[test]
    fn fold_sizes() {
        let f = make_folds(&ids(11), 5, 3).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(|f| f.validation.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(matches!(make_folds(&ids(3), 5, 0), Err(TrainingError::TooFewForK { .. })));
        let split = split_ids(&ids(20), &SplitSpec::default()).unwrap();
        let plan = plan_folds(&split, 1, 0).unwrap();
        assert_eq!(plan.folds[0].validation, split.validation);
        plan.check().unwrap();
    }

    #[test]
    fn best_epoch_earliest_tie() {
        let h: Vec<EpochRecord> = [0.5, 0.9, 0.9, 0.8]
            .iter()
            .enumerate()
            .map(|(epoch, &a)| EpochRecord {
                epoch,
                train_loss: 1.0,
                validation_accuracy: a,
            })
            .collect();
        assert_eq!(best_epoch(&h), Some(1));
    }

    #[test]
    fn loss_cases() {
        let uniform = Tensor::new(vec![1, 5], vec![0.3; 5]);
        assert!((compute_loss(&uniform, &[2]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let sat = Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]);
        assert!(compute_loss(&sat, &[0]).unwrap() < 1e-9);
        assert!(matches!(compute_loss(&sat, &[3]), Err(TrainingError::LabelOutOfRange { .. })));
    }
}
