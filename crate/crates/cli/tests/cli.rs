use std::path::Path;
use std::process::{Command, Output};

use mriseq::config::RunConfig;
use mriseq::ingestion::LabelSet;
use mriseq::model::{save_checkpoint, build_model, ModelConfig, OptimizerInfo, TrainingInfo};
use mriseq::phantom::{generate_dataset, PhantomSpec};
use mriseq::preprocessing::PreprocessConfig;

fn mriseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mriseq"))
        .args(args)
        .env_remove("MRISEQ_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_phantom(dir: &Path) {
    let mut spec = PhantomSpec::default_body(3);
    spec.shape_xy = [16, 20];
    spec.shape_z = [8, 10];
    generate_dataset(&spec, dir, 4, 1, 0.0).unwrap();
}

#[test]
fn ingest_synthetic_root() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let out = dir.path().join("scan.jsonl");
    let o = mriseq(&["--quiet", "ingest", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(lines, 4);
}

#[test]
fn ingest_empty_dir_is_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = mriseq(&["ingest", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unreadable_rules_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let rules = dir.path().join("no_such_rules.toml");
    let o = mriseq(&["ingest", dir.path().to_str().unwrap(), "--rules", rules.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_rules.toml"), "{}", stderr(&o));
}

#[test]
fn bad_ratios_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::template("r", LabelSet::Body, "micro-densenet").unwrap();
    cfg.split.ratios = [0.6, 0.1, 0.2];
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    let o = mriseq(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ratios"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::template("r", LabelSet::Body, "micro-densenet").unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml_string().replace("batch_size", "batchsize")).unwrap();
    let o = mriseq(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
}

#[test]
fn config_template_round_trips() {
    let o = mriseq(&["config", "--preset", "micro-resnet"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::from_toml_str(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.to_toml_string(), text);
}

#[test]
fn predict_prints_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let mut pre = PreprocessConfig::default();
    pre.target_shape = [32, 32, 16];
    pre.target_spacing = [6.0, 6.0, 7.8];
    let model = build_model(&ModelConfig::micro_densenet(5).with_seed(1)).unwrap();
    let info = TrainingInfo {
        fold_id: 0,
        best_epoch: 0,
        best_validation_accuracy: 0.0,
        label_set: LabelSet::Body,
        preprocess: pre,
        optimizer: OptimizerInfo {
            name: "adam".into(),
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    };
    let ck = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &model, &info).unwrap();
    let adc = dir.path().join("P0001/P0001.1").read_dir().unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".nii.gz"))
        .max()
        .unwrap();
    let o = mriseq(&["predict", adc.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["label"].is_string());
    let p: Vec<f64> = v["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(p.len(), 5);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
}

#[test]
fn missing_checkpoint_is_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = mriseq(&["predict", "x.nii.gz", "--checkpoint", dir.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
