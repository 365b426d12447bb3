use crate::ingestion::{SequenceLabel, SeriesVolume};
use crate::model::{argmax, softmax_rows, CheckpointMeta, Model};
use crate::preprocessing::{preprocess_pipeline, PreprocessConfig};
use crate::tensor::Tensor;

use super::EvalError;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: SequenceLabel,
    pub probabilities: Vec<f64>,
}

/// Mean of per-model softmax rows. The running mean keeps an ensemble of
/// identical models bitwise equal to a single one.
pub fn ensemble_probabilities(models: &[&Model], batch: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut mean: Vec<Vec<f64>> = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let probs = softmax_rows(&m.infer(batch)?);
        if i == 0 {
            mean = probs;
            continue;
        }
        let n = (i + 1) as f64;
        for (acc, row) in mean.iter_mut().zip(probs) {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += (p - *a) / n;
            }
        }
    }
    Ok(mean)
}

/// Checks that checkpoints agree on label set and preprocessing, and that
/// preprocessing matches `cfg`.
pub fn check_compatible(metas: &[&CheckpointMeta], cfg: &PreprocessConfig) -> Result<(), EvalError> {
    let first = metas
        .first()
        .ok_or_else(|| EvalError::FingerprintMismatch("no checkpoints given".into()))?;
    for m in metas {
        if m.label_set != first.label_set {
            return Err(EvalError::FingerprintMismatch(format!(
                "label sets {} and {} differ",
                first.label_set, m.label_set
            )));
        }
        if m.model_config.num_classes != first.label_set.num_classes() {
            return Err(EvalError::FingerprintMismatch(format!(
                "model has {} outputs for the {} profile",
                m.model_config.num_classes, first.label_set
            )));
        }
        if m.preprocess_fingerprint != cfg.fingerprint() {
            return Err(EvalError::FingerprintMismatch(format!(
                "checkpoint preprocessing {} differs from {}",
                m.preprocess_fingerprint,
                cfg.fingerprint()
            )));
        }
    }
    Ok(())
}

/// Preprocesses `v` and averages softmax outputs over the checkpoints;
/// ties go to the lowest class index.
pub fn predict_volume(
    checkpoints: &[(Model, CheckpointMeta)],
    v: &SeriesVolume,
    cfg: &PreprocessConfig,
) -> Result<Prediction, EvalError> {
    let metas: Vec<&CheckpointMeta> = checkpoints.iter().map(|(_, m)| m).collect();
    check_compatible(&metas, cfg)?;
    let label_set = metas[0].label_set;
    let x = preprocess_pipeline(v, cfg)?;
    let [z, y, xx] = cfg.input_shape();
    let batch = x.reshape(vec![1, 1, z, y, xx]);
    let models: Vec<&Model> = checkpoints.iter().map(|(m, _)| m).collect();
    let probabilities = ensemble_probabilities(&models, &batch)?.remove(0);
    let label = label_set.label(argmax(&probabilities)).expect("argmax within profile");
    Ok(Prediction { label, probabilities })
}
