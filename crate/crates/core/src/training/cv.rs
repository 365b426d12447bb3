use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::evaluation::{compute_metrics, confusion_matrix, ensemble_metrics, EnsembleReport, MetricsReport, SeriesPrediction};
use crate::model::{save_checkpoint, ModelConfig, OptimizerInfo, TrainingInfo};

use super::trainer::{evaluate_samples, train_fold};
use super::{EpochRecord, FoldPlan, PreparedDataset, TrainConfig, TrainingError};

#[derive(Clone, Debug, Default)]
pub struct CvOptions {
    /// Folds trained concurrently; 0 means the rayon default.
    pub jobs: usize,
    /// When set, per-fold artifacts are written under this directory.
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    pub predictions: Vec<SeriesPrediction>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub ensemble: EnsembleReport,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainingError + '_ {
    move |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainingError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), TrainingError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for it in items {
        serde_json::to_writer(&mut f, it).expect("serializable");
        f.write_all(b"\n").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Trains every fold of `plan`, scores each fold's best checkpoint on the
/// fixed test patients, and aggregates the fold reports. Results are
/// returned in fold order; with a run directory, each fold's artifacts are
/// written as soon as that fold finishes.
pub fn run_cross_validation(
    data: &PreparedDataset,
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvResult, TrainingError> {
    if let Err(e) = plan.check() {
        return Err(TrainingError::InvalidConfig(format!("fold plan: {e}")));
    }
    if model_cfg.num_classes != data.label_set.num_classes() {
        return Err(TrainingError::InvalidConfig(format!(
            "model.num_classes {} but the {} profile has {} classes",
            model_cfg.num_classes,
            data.label_set,
            data.label_set.num_classes()
        )));
    }
    let test = data.select(&plan.test);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| TrainingError::InvalidConfig(format!("thread pool: {e}")))?;

    let run_fold = |fold: &super::Fold| -> Result<FoldResult, TrainingError> {
        let outcome = train_fold(fold, model_cfg, train_cfg, data)?;
        let predictions = evaluate_samples(&outcome.model, &test)?;
        let pairs: Vec<(usize, usize)> = predictions.iter().map(|p| (p.true_index, p.predicted_index)).collect();
        let metrics = compute_metrics(&confusion_matrix(data.label_set, &pairs)?)?;
        if let Some(dir) = &opts.run_dir {
            let fdir = dir.join(format!("fold{}", fold.fold_id));
            fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
            let info = TrainingInfo {
                fold_id: fold.fold_id,
                best_epoch: outcome.best_epoch,
                best_validation_accuracy: outcome.best_validation_accuracy,
                label_set: data.label_set,
                preprocess: data.preprocess.clone(),
                optimizer: OptimizerInfo {
                    name: "adam".into(),
                    learning_rate: train_cfg.learning_rate,
                    beta1: train_cfg.beta1,
                    beta2: train_cfg.beta2,
                    eps: train_cfg.eps,
                },
            };
            save_checkpoint(&fdir.join("checkpoint.ckpt"), &outcome.model, &info)?;
            write_jsonl(&fdir.join("history.jsonl"), &outcome.history)?;
            write_jsonl(&fdir.join("test_predictions.jsonl"), &predictions)?;
            write_json(&fdir.join("metrics.json"), &metrics)?;
        }
        log::info!(
            "fold {} done: best epoch {} (validation {:.4}), test weighted F1 {:.4}",
            fold.fold_id,
            outcome.best_epoch,
            outcome.best_validation_accuracy,
            metrics.weighted.f1
        );
        Ok(FoldResult {
            fold_id: fold.fold_id,
            best_epoch: outcome.best_epoch,
            best_validation_accuracy: outcome.best_validation_accuracy,
            history: outcome.history,
            metrics,
            predictions,
        })
    };
    let folds: Vec<FoldResult> = pool.install(|| plan.folds.par_iter().map(run_fold).collect::<Result<_, _>>())?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.metrics.clone()).collect();
    let ensemble = ensemble_metrics(&reports)?;
    if let Some(dir) = &opts.run_dir {
        write_json(&dir.join("ensemble.json"), &ensemble)?;
        let csv = dir.join("confusion.csv");
        fs::write(&csv, ensemble.aggregate.to_csv()).map_err(io_err(&csv))?;
    }
    Ok(CvResult {
        plan: plan.clone(),
        folds,
        ensemble,
    })
}
