use std::path::Path;

use mriseq::config::RunConfig;
use mriseq::ingestion::{LabelSet, RuleTable};
use mriseq::phantom::{generate_dataset, PhantomSpec};
use mriseq::pipeline::{
    audit_studies, evaluate_run, load_checkpoints, load_studies, predict_file, run_checkpoints, train_run, write_report,
};

fn small_config(data: &Path, runs: &Path) -> RunConfig {
    let mut cfg = RunConfig::template("smoke", LabelSet::Body, "micro-densenet").unwrap();
    cfg.preprocess.target_spacing = [6.0, 6.0, 7.8];
    cfg.paths.data_root = Some(data.to_path_buf());
    cfg.paths.run_dir = runs.to_path_buf();
    cfg.override_seed(21);
    cfg.k = 2;
    cfg.train.epochs = 4;
    cfg.train.learning_rate = 1e-3;
    cfg
}

#[test]
fn train_evaluate_report_predict_audit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut spec = PhantomSpec::default_body(21);
    spec.shape_xy = [24, 32];
    spec.shape_z = [8, 12];
    let ds = generate_dataset(&spec, &data, 10, 1, 0.0).unwrap();
    let cfg = small_config(&data, &dir.path().join("runs"));
    let run = train_run(&cfg, 1).unwrap();

    assert_eq!(run.result.folds.len(), 2);
    for f in &run.result.folds {
        let first = f.history[0].train_loss;
        let last = f.history.last().unwrap().train_loss;
        assert!(last < first, "fold {}: loss {first} -> {last}", f.fold_id);
    }

    // Stored predictions reproduce the in-memory metrics.
    let ev = evaluate_run(&run.run_dir).unwrap();
    assert_eq!(ev.ensemble, run.result.ensemble);
    let (_, written) = write_report(&run.run_dir, true).unwrap();
    assert_eq!(written.len(), 3);
    let report = std::fs::read_to_string(&written[0]).unwrap();
    assert!(report.contains("weighted"));
    assert!(std::fs::read_to_string(&written[1]).unwrap().starts_with("<svg"));

    let cks = load_checkpoints(&run_checkpoints(&run.run_dir).unwrap()).unwrap();
    assert_eq!(cks.len(), 2);
    let series = &ds.studies[0].series[0];
    let path = match &series.locator {
        mriseq::ingestion::VolumeLocator::Nifti { path } => data.join(path),
        other => panic!("unexpected locator {other:?}"),
    };
    let p = predict_file(&cks, &path).unwrap();
    assert_eq!(p.checkpoints, 2);
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let studies = load_studies(&data, None, LabelSet::Body).unwrap();
    let audit = audit_studies(&data, &studies, &cks, &RuleTable::default_body()).unwrap();
    let n: usize = studies.iter().map(|s| s.series.len()).sum();
    assert_eq!(audit.agree + audit.disagree + audit.header_unknown, n);
    assert_eq!(audit.entries.len(), n);
    assert_eq!(audit.header_unknown, 0);
}

#[test]
fn training_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut spec = PhantomSpec::default_body(5);
    spec.shape_xy = [16, 20];
    spec.shape_z = [8, 8];
    generate_dataset(&spec, &data, 6, 1, 0.0).unwrap();
    let mut cfg = small_config(&data, &dir.path().join("runs"));
    cfg.train.epochs = 1;
    cfg.run_id = "a".into();
    let a = train_run(&cfg, 1).unwrap();
    cfg.run_id = "b".into();
    let b = train_run(&cfg, 2).unwrap();
    assert_eq!(a.result.plan, b.result.plan);
    assert_eq!(a.result.ensemble, b.result.ensemble);
}
