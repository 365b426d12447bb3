//! End-to-end operations shared by the CLI and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::evaluation::{
    compute_metrics, confusion_matrix, ensemble_metrics, misclassification_report, predict_volume, summary_table,
    audit_consistency, AuditInput, AuditReport, EnsembleReport, EvalError, MetricsReport, MisclassificationEntry,
    Prediction, SeriesPrediction,
};
use crate::evaluation::plots::{confusion_svg, fold_bars_svg};
use crate::ingestion::{
    build_manifest, infer_label_from_headers, load_series, load_volume_file, read_label_sidecar, read_manifest,
    IngestError, LabelSet, LabelSource, RuleTable, StudyRecord, LABELS_FILE, MANIFEST_FILE,
};
use crate::model::{load_checkpoint, CheckpointMeta, Model, ModelError};
use crate::training::{
    plan_folds, run_cross_validation, split_patients, CvOptions, CvResult, FoldPlan, PreparedDataset, TrainingError,
};

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Input(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Label source for scanning a root: its `labels.jsonl` when present,
/// otherwise the default rule table of the profile.
pub fn default_label_source(root: &Path, label_set: LabelSet) -> Result<LabelSource, IngestError> {
    let sidecar = root.join(LABELS_FILE);
    if sidecar.is_file() {
        let labels = read_label_sidecar(&sidecar, label_set)?;
        return Ok(LabelSource::Sidecar { label_set, labels });
    }
    Ok(LabelSource::Rules(RuleTable::default_for(label_set)))
}

/// Studies for a run: an explicit manifest, `<root>/manifest.jsonl`, or a
/// fresh scan of the root.
pub fn load_studies(root: &Path, manifest: Option<&Path>, label_set: LabelSet) -> Result<Vec<StudyRecord>, PipelineError> {
    let default = root.join(MANIFEST_FILE);
    let path = manifest.map(Path::to_path_buf).or_else(|| default.is_file().then_some(default));
    let mut studies = match path {
        Some(p) => read_manifest(&p)?,
        None => build_manifest(root, &default_label_source(root, label_set)?)?,
    };
    for s in &mut studies {
        for e in &mut s.series {
            if e.label.is_some_and(|l| l.label_set() != label_set) {
                e.label = None;
            }
        }
        s.flag_missing(label_set);
    }
    Ok(studies)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub studies: usize,
    pub patients: usize,
    pub samples: usize,
    pub skipped_unlabeled: usize,
}

/// Everything needed to reproduce a run, written as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub model_fingerprint: String,
    pub preprocess_fingerprint: String,
    pub dataset: DatasetSummary,
    pub plan: FoldPlan,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub result: CvResult,
}

/// Prepares the dataset, splits by patient, plans folds and trains them.
/// Artifacts go to `<paths.run_dir>/<run_id>/`.
pub fn train_run(cfg: &RunConfig, jobs: usize) -> Result<TrainRun, PipelineError> {
    cfg.validate()?;
    let root = cfg
        .paths
        .data_root
        .clone()
        .ok_or_else(|| PipelineError::Input("no data root: set paths.data_root or MRISEQ_DATA_ROOT".into()))?;
    if !root.is_dir() {
        return Err(PipelineError::Input(format!("data root {} is not a directory", root.display())));
    }
    let studies = load_studies(&root, cfg.paths.manifest.as_deref(), cfg.label_set)?;
    let data = PreparedDataset::prepare(&root, &studies, cfg.label_set, &cfg.preprocess)?;
    let split = split_patients(&studies, &cfg.split)?;
    let plan = plan_folds(&split, cfg.k, cfg.split.seed)?;
    let run_dir = cfg.paths.run_dir.join(&cfg.run_id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let record = RunRecord {
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        model_fingerprint: cfg.model.fingerprint(),
        preprocess_fingerprint: cfg.preprocess.fingerprint(),
        dataset: DatasetSummary {
            studies: studies.len(),
            patients: data.patients.len(),
            samples: data.samples.len(),
            skipped_unlabeled: data.skipped_unlabeled,
        },
        plan: plan.clone(),
    };
    let text = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    write_text(&run_dir.join(RUN_FILE), &text)?;
    log::info!(
        "run {}: {} samples from {} patients, {} folds, {} test patients",
        cfg.run_id,
        data.samples.len(),
        data.patients.len(),
        plan.k,
        plan.test.len()
    );
    let opts = CvOptions {
        jobs,
        run_dir: Some(run_dir.clone()),
    };
    let result = run_cross_validation(&data, &plan, &cfg.model, &cfg.train, &opts)?;
    Ok(TrainRun { run_dir, record, result })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunEvaluation {
    pub run_id: String,
    pub folds: Vec<MetricsReport>,
    pub ensemble: EnsembleReport,
    pub misclassifications: Vec<MisclassificationEntry>,
}

/// Recomputes all metrics of a finished run from its stored test
/// predictions.
pub fn evaluate_run(run_dir: &Path) -> Result<RunEvaluation, PipelineError> {
    let record: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
    let mut folds = Vec::new();
    let mut all = Vec::new();
    for f in &record.plan.folds {
        let path = run_dir.join(format!("fold{}", f.fold_id)).join("test_predictions.jsonl");
        let preds: Vec<SeriesPrediction> = read_jsonl(&path)?;
        let pairs: Vec<(usize, usize)> = preds.iter().map(|p| (p.true_index, p.predicted_index)).collect();
        folds.push(compute_metrics(&confusion_matrix(record.config.label_set, &pairs)?)?);
        all.extend(preds);
    }
    let ensemble = ensemble_metrics(&folds)?;
    let misclassifications = misclassification_report(&ensemble.aggregate, &all);
    Ok(RunEvaluation {
        run_id: record.run_id,
        folds,
        ensemble,
        misclassifications,
    })
}

/// Markdown report of a run; identical inputs give identical bytes.
pub fn render_report(ev: &RunEvaluation) -> String {
    let mut s = summary_table(&format!("Run {}", ev.run_id), &ev.ensemble);
    s.push_str("\nAggregate confusion matrix (rows: true, columns: predicted):\n\n```\n");
    s.push_str(&ev.ensemble.aggregate.to_csv());
    s.push_str("```\n\nMisclassifications (all folds):\n\n");
    if ev.misclassifications.is_empty() {
        s.push_str("none\n");
    }
    for m in &ev.misclassifications {
        s.push_str(&format!(
            "- {} -> {}: {} (e.g. {})\n",
            m.true_label,
            m.predicted_label,
            m.count,
            m.examples.join(", ")
        ));
    }
    s
}

/// Writes `report.md` and, with `plots`, `confusion.svg` and `folds.svg`
/// into the run directory. Returns the written paths.
pub fn write_report(run_dir: &Path, plots: bool) -> Result<(RunEvaluation, Vec<PathBuf>), PipelineError> {
    let ev = evaluate_run(run_dir)?;
    let mut written = vec![run_dir.join(REPORT_FILE)];
    write_text(&written[0], &render_report(&ev))?;
    if plots {
        let c = run_dir.join("confusion.svg");
        write_text(&c, &confusion_svg(&ev.ensemble.aggregate))?;
        let f = run_dir.join("folds.svg");
        write_text(&f, &fold_bars_svg(&ev.ensemble))?;
        written.extend([c, f]);
    }
    Ok((ev, written))
}

/// Fold checkpoints of a run directory, in fold order.
pub fn run_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let record: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
    Ok(record
        .plan
        .folds
        .iter()
        .map(|f| run_dir.join(format!("fold{}", f.fold_id)).join("checkpoint.ckpt"))
        .collect())
}

pub fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<(Model, CheckpointMeta)>, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::Input("no checkpoints given".into()));
    }
    paths.iter().map(|p| load_checkpoint(p).map_err(PipelineError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub label: String,
    pub class_index: usize,
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
    pub checkpoints: usize,
}

impl PredictOutput {
    fn new(p: &Prediction, checkpoints: usize) -> Self {
        Self {
            label: p.label.value().to_string(),
            class_index: p.label.class_index(),
            classes: p.label.label_set().classes().iter().map(|c| c.to_string()).collect(),
            probabilities: p.probabilities.clone(),
            checkpoints,
        }
    }
}

/// Ensemble prediction for one NIfTI volume, preprocessed with the
/// checkpoints' own configuration.
pub fn predict_file(checkpoints: &[(Model, CheckpointMeta)], volume: &Path) -> Result<PredictOutput, PipelineError> {
    let cfg = checkpoints[0].1.training.preprocess.clone();
    let v = load_volume_file(volume)?;
    let p = predict_volume(checkpoints, &v, &cfg)?;
    Ok(PredictOutput::new(&p, checkpoints.len()))
}

/// Predicts every series of a manifest and compares with the label the
/// header rules infer.
pub fn audit_studies(
    root: &Path,
    studies: &[StudyRecord],
    checkpoints: &[(Model, CheckpointMeta)],
    rules: &RuleTable,
) -> Result<AuditReport, PipelineError> {
    use rayon::prelude::*;
    let cfg = checkpoints[0].1.training.preprocess.clone();
    let series: Vec<_> = studies.iter().flat_map(|s| &s.series).collect();
    let inputs = series
        .par_iter()
        .map(|e| -> Result<AuditInput, PipelineError> {
            let v = load_series(root, &e.locator)?;
            let p = predict_volume(checkpoints, &v, &cfg)?;
            Ok(AuditInput {
                series_uid: e.series_uid.clone(),
                predicted: p.label,
                probabilities: p.probabilities,
                header: infer_label_from_headers(&e.headers, rules),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(audit_consistency(&inputs))
}
