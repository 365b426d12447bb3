use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::ingestion::{load_series, LabelSet, StudyRecord};
use crate::preprocessing::{preprocess_pipeline, PreprocessConfig};
use crate::tensor::Tensor;

use super::TrainingError;

/// One labeled, preprocessed series.
#[derive(Clone, Debug)]
pub struct Sample {
    pub patient_id: String,
    pub study_uid: String,
    pub series_uid: String,
    pub label: usize,
    /// `(1, Z, Y, X)`.
    pub input: Arc<Tensor>,
}

/// Preprocessed tensors for every labeled series of a manifest, held in
/// memory and shared read-only across folds.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub label_set: LabelSet,
    pub preprocess: PreprocessConfig,
    pub samples: Vec<Sample>,
    pub patients: Vec<String>,
    pub skipped_unlabeled: usize,
}

impl PreparedDataset {
    pub fn prepare(
        root: &Path,
        studies: &[StudyRecord],
        label_set: LabelSet,
        cfg: &PreprocessConfig,
    ) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let mut todo = Vec::new();
        let mut skipped = 0;
        for st in studies {
            for se in &st.series {
                match se.label {
                    Some(l) if l.label_set() == label_set => todo.push((st, se, l.class_index())),
                    _ => skipped += 1,
                }
            }
        }
        let samples = todo
            .par_iter()
            .map(|(st, se, label)| {
                let v = load_series(root, &se.locator)?;
                Ok(Sample {
                    patient_id: st.patient_id.clone(),
                    study_uid: st.study_uid.clone(),
                    series_uid: se.series_uid.clone(),
                    label: *label,
                    input: Arc::new(preprocess_pipeline(&v, cfg)?),
                })
            })
            .collect::<Result<Vec<_>, TrainingError>>()?;
        if skipped > 0 {
            log::warn!("{skipped} series without a {label_set} label were left out");
        }
        let patients = studies
            .iter()
            .map(|s| s.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            label_set,
            preprocess: cfg.clone(),
            samples,
            patients,
            skipped_unlabeled: skipped,
        })
    }

    /// Samples of the given patients, in dataset order.
    pub fn select(&self, patients: &[String]) -> Vec<&Sample> {
        let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
        self.samples.iter().filter(|s| set.contains(s.patient_id.as_str())).collect()
    }
}

/// Stacks `(1, Z, Y, X)` inputs into an NCDHW batch.
pub(crate) fn batch_of(samples: &[&Sample]) -> Tensor {
    let parts: Vec<&Tensor> = samples.iter().map(|s| s.input.as_ref()).collect();
    Tensor::stack(&parts)
}
