use crate::evaluation::SeriesPrediction;
use crate::model::layers::Mode;
use crate::model::{argmax, build_model, softmax_rows, Model, ModelConfig};
use crate::rng::{derive_seed, SeededRng};

use super::adam::Adam;
use super::dataset::{batch_of, PreparedDataset, Sample};
use super::{cross_entropy, EpochRecord, Fold, TrainConfig, TrainingError};

const EVAL_BATCH: usize = 8;

#[derive(Clone)]
pub struct FoldOutcome {
    pub fold_id: usize,
    /// Weights from the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Softmax predictions for samples, batched.
pub fn evaluate_samples(model: &Model, samples: &[&Sample]) -> Result<Vec<SeriesPrediction>, TrainingError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let probs = softmax_rows(&model.infer(&batch_of(chunk))?);
        for (s, p) in chunk.iter().zip(probs) {
            out.push(SeriesPrediction {
                patient_id: s.patient_id.clone(),
                study_uid: s.study_uid.clone(),
                series_uid: s.series_uid.clone(),
                true_index: s.label,
                predicted_index: argmax(&p),
                probabilities: p,
            });
        }
    }
    Ok(out)
}

fn accuracy(preds: &[SeriesPrediction]) -> f64 {
    preds.iter().filter(|p| p.true_index == p.predicted_index).count() as f64 / preds.len() as f64
}

/// Trains one fold for exactly `epochs` epochs and keeps the weights of the
/// earliest epoch with the highest validation accuracy.
pub fn train_fold(
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PreparedDataset,
) -> Result<FoldOutcome, TrainingError> {
    train_cfg.validate()?;
    let train = data.select(&fold.train);
    let val = data.select(&fold.validation);
    let empty = |what: &str| TrainingError::EmptyFold {
        fold: fold.fold_id,
        detail: format!("no labeled {what} series"),
    };
    if train.is_empty() {
        return Err(empty("training"));
    }
    if val.is_empty() {
        return Err(empty("validation"));
    }
    let cfg = model_cfg.clone().with_seed(derive_seed(model_cfg.seed, &[fold.fold_id as u64]));
    let mut model = build_model(&cfg)?;
    let mut opt = Adam::new(train_cfg);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derived(train_cfg.seed, &[fold.fold_id as u64, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            model.zero_grad();
            let logits = model.forward(&batch_of(&batch), Mode::Train)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    fold: fold.fold_id,
                    epoch,
                    batch: bi,
                    detail: format!("loss {loss} for series {:?}", batch.iter().map(|s| &s.series_uid).collect::<Vec<_>>()),
                });
            }
            model.backward(grad);
            opt.step(&mut model);
            loss_sum += loss * batch.len() as f64;
        }
        let acc = accuracy(&evaluate_samples(&model, &val)?);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            validation_accuracy: acc,
        };
        log::info!(
            "fold {} epoch {}: loss {:.5} validation accuracy {:.4}",
            fold.fold_id,
            epoch,
            rec.train_loss,
            acc
        );
        if best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            best = Some((epoch, acc, model.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_validation_accuracy, model) = best.expect("at least one epoch");
    Ok(FoldOutcome {
        fold_id: fold.fold_id,
        model,
        best_epoch,
        best_validation_accuracy,
        history,
    })
}
