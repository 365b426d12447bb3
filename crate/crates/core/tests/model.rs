mod common;

use common::oracles::{densenet_param_oracle, resnet_param_oracle};
use common::random_input;

use mriseq::model::layers::Mode;
use mriseq::model::{
    build_model, load_checkpoint, load_checkpoint_expecting, save_checkpoint, softmax_rows, Family, ModelConfig,
    ModelError, OptimizerInfo, TrainingInfo,
};
use mriseq::ingestion::LabelSet;
use mriseq::preprocessing::PreprocessConfig;
use mriseq::tensor::Tensor;

#[test]
fn micro_densenet_parameter_count_matches_oracle() {
    let cfg = ModelConfig::micro_densenet(5);
    let m = build_model(&cfg).unwrap();
    assert_eq!(m.parameter_count(), densenet_param_oracle(&cfg));
    let r = ModelConfig::micro_resnet(5);
    assert_eq!(build_model(&r).unwrap().parameter_count(), resnet_param_oracle(&r));
}

#[test]
fn presets_have_canonical_layer_counts() {
    let d = build_model(&ModelConfig::densenet121(5)).unwrap();
    assert_eq!(d.block_counts(), vec![6, 12, 24, 16]);
    assert_eq!(d.parameter_count(), densenet_param_oracle(&ModelConfig::densenet121(5)));
    let r50 = build_model(&ModelConfig::resnet50(5)).unwrap();
    assert_eq!(r50.block_counts(), vec![3, 4, 6, 3]);
    assert_eq!(r50.parameter_count(), resnet_param_oracle(&ModelConfig::resnet50(5)));
    let r101 = build_model(&ModelConfig::resnet101(5)).unwrap();
    assert_eq!(r101.block_counts(), vec![3, 4, 23, 3]);
}

#[test]
fn forward_shapes_and_errors() {
    let cfg = ModelConfig::micro_densenet(5);
    let m = build_model(&cfg).unwrap();
    let x = random_input([16, 32, 32], 2, 1);
    let y = m.infer(&x).unwrap();
    assert_eq!(y.shape(), &[2, 5]);
    assert!(y.is_finite());
    for row in softmax_rows(&y) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let three = Tensor::zeros(vec![1, 3, 16, 32, 32]);
    assert!(matches!(m.infer(&three), Err(ModelError::ShapeMismatch { .. })));
    let r = build_model(&ModelConfig::micro_resnet(4)).unwrap();
    assert_eq!(r.infer(&x).unwrap().shape(), &[2, 4]);
}

#[test]
fn duplicated_rows_give_identical_logits() {
    let m = build_model(&ModelConfig::micro_densenet(5)).unwrap();
    let one = random_input([16, 32, 32], 1, 3);
    let two = Tensor::stack(&[&one.clone().reshape(vec![1, 16, 32, 32]), &one.clone().reshape(vec![1, 16, 32, 32])]);
    let y = m.infer(&two).unwrap();
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn initialization_is_seeded() {
    let cfg = ModelConfig::micro_densenet(5).with_seed(11);
    let a = build_model(&cfg).unwrap();
    let b = build_model(&cfg).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let c = build_model(&cfg.clone().with_seed(12)).unwrap();
    assert_ne!(a.checksum(), c.checksum());
    let mut m = a.clone();
    m.for_each_param(|name, p| {
        if name == "class_layers.out.bias" || name.ends_with("norm0.bias") {
            assert!(p.value.iter().all(|&v| v == 0.0));
        }
        if name.ends_with("norm0.weight") {
            assert!(p.value.iter().all(|&v| v == 1.0));
        }
    });
}

fn info() -> TrainingInfo {
    TrainingInfo {
        fold_id: 0,
        best_epoch: 3,
        best_validation_accuracy: 0.75,
        label_set: LabelSet::Body,
        preprocess: PreprocessConfig::default(),
        optimizer: OptimizerInfo {
            name: "adam".into(),
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ModelConfig::micro_densenet(5).with_seed(4);
    let mut m = build_model(&cfg).unwrap();
    // Move the norm running statistics away from their defaults.
    m.forward(&random_input([16, 32, 32], 2, 5), Mode::Train).unwrap();
    let meta = save_checkpoint(&path, &m, &info()).unwrap();
    assert_eq!(meta.training.best_epoch, 3);
    let (loaded, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta, meta2);
    let probe = random_input([16, 32, 32], 2, 6);
    let a = m.infer(&probe).unwrap();
    let b = loaded.infer(&probe).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    assert!(matches!(
        load_checkpoint_expecting(&path, &ModelConfig::micro_densenet(4)),
        Err(ModelError::FingerprintMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::CorruptCheckpoint(_))));
}

#[test]
fn resnet_family_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.ckpt");
    let cfg = ModelConfig::micro_resnet(5);
    assert_eq!(cfg.family, Family::Resnet);
    let m = build_model(&cfg).unwrap();
    save_checkpoint(&path, &m, &info()).unwrap();
    let (loaded, _) = load_checkpoint_expecting(&path, &cfg).unwrap();
    let probe = random_input([16, 32, 32], 1, 7);
    assert_eq!(m.infer(&probe).unwrap(), loaded.infer(&probe).unwrap());
}

#[test]
fn gradient_check_micro_densenet() {
    let report = common::gradient_check(24, 1e-3, 2);
    assert!(report.checked >= 20, "only {} parameters checked", report.checked);
    assert!(report.worst < 1e-3, "worst relative error {}", report.worst);
}
