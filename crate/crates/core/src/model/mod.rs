//! 3-D classification networks (DenseNet and bottleneck ResNet families),
//! built from a [`ModelConfig`], plus the checkpoint container.

pub mod checkpoint;
pub mod layers;
mod nets;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fingerprint::fingerprint;
use crate::tensor::Tensor;
use layers::{Layer, Mode, Param, Sequential, StateVisitor};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, OptimizerInfo, TrainingInfo};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Densenet,
    Resnet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Dense layers per block, or bottleneck units per stage.
    pub block_layers: Vec<usize>,
    /// DenseNet only.
    pub growth_rate: usize,
    pub init_features: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// (Z, Y, X).
    pub input_shape: [usize; 3],
    pub seed: u64,
}

/// Architecture identity: everything except the seed.
#[derive(Serialize)]
struct Architecture<'a> {
    family: Family,
    block_layers: &'a [usize],
    growth_rate: usize,
    init_features: usize,
    num_classes: usize,
    in_channels: usize,
    input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn densenet121(num_classes: usize) -> Self {
        Self {
            family: Family::Densenet,
            block_layers: vec![6, 12, 24, 16],
            growth_rate: 32,
            init_features: 64,
            num_classes,
            in_channels: 1,
            input_shape: [36, 256, 256],
            seed: 0,
        }
    }

    pub fn resnet50(num_classes: usize) -> Self {
        Self {
            family: Family::Resnet,
            block_layers: vec![3, 4, 6, 3],
            ..Self::densenet121(num_classes)
        }
    }

    pub fn resnet101(num_classes: usize) -> Self {
        Self {
            family: Family::Resnet,
            block_layers: vec![3, 4, 23, 3],
            ..Self::densenet121(num_classes)
        }
    }

    /// Desk-scale DenseNet used by the test and acceptance suites.
    pub fn micro_densenet(num_classes: usize) -> Self {
        Self {
            family: Family::Densenet,
            block_layers: vec![2, 2],
            growth_rate: 16,
            init_features: 32,
            num_classes,
            in_channels: 1,
            input_shape: [16, 32, 32],
            seed: 0,
        }
    }

    pub fn micro_resnet(num_classes: usize) -> Self {
        Self {
            family: Family::Resnet,
            block_layers: vec![1, 1],
            init_features: 4,
            ..Self::micro_densenet(num_classes)
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        Some(match name {
            "densenet121" => Self::densenet121(num_classes),
            "resnet50" => Self::resnet50(num_classes),
            "resnet101" => Self::resnet101(num_classes),
            "micro-densenet" => Self::micro_densenet(num_classes),
            "micro-resnet" => Self::micro_resnet(num_classes),
            _ => return None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_input_shape(mut self, shape: [usize; 3]) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&Architecture {
            family: self.family,
            block_layers: &self.block_layers,
            growth_rate: self.growth_rate,
            init_features: self.init_features,
            num_classes: self.num_classes,
            in_channels: self.in_channels,
            input_shape: self.input_shape,
        })
    }

    /// Number of stride-2 stages: stem conv, stem pool, and one between
    /// consecutive blocks.
    pub fn downsampling_stages(&self) -> usize {
        2 + self.block_layers.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return bad(format!("block_layers {:?} must be non-empty with entries >= 1", self.block_layers));
        }
        if self.init_features == 0 || self.in_channels == 0 {
            return bad("init_features and in_channels must be positive".into());
        }
        if self.family == Family::Densenet && self.growth_rate == 0 {
            return bad("growth_rate must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} has an empty axis", self.input_shape));
        }
        self.z_downsampling().map(|_| ())
    }

    /// Per stage, whether Z is strided. A stage needs at least 2 voxels on
    /// an axis to downsample it; Z falls back to stride 1, while a
    /// collapsing in-plane axis is a config error.
    pub fn z_downsampling(&self) -> Result<Vec<bool>, ModelError> {
        let stages = self.downsampling_stages();
        let [mut z, mut y, mut x] = self.input_shape;
        let mut plan = Vec::with_capacity(stages);
        for s in 0..stages {
            // DenseNet transitions floor; convs and max pools ceil.
            let floor = self.family == Family::Densenet && s >= 2;
            let next = |n: usize| if floor { n / 2 } else { n.div_ceil(2) };
            for (axis, n) in [("Y", &mut y), ("X", &mut x)] {
                if *n < 2 {
                    return Err(ModelError::InvalidConfig(format!(
                        "input_shape {:?} collapses on {axis} before downsampling stage {} of {stages}",
                        self.input_shape,
                        s + 1
                    )));
                }
                *n = next(*n);
            }
            let down = z >= 2;
            if down {
                z = next(z);
            }
            plan.push(down);
        }
        Ok(plan)
    }
}

/// A built network with its config.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    net: Sequential,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let z_down = cfg.z_downsampling()?;
    Ok(Model {
        config: cfg.clone(),
        net: nets::build(cfg, &z_down),
    })
}

struct Collect<F: FnMut(&str, &mut Param)>(F);

impl<F: FnMut(&str, &mut Param)> StateVisitor for Collect<F> {
    fn param(&mut self, name: &str, p: &mut Param) {
        (self.0)(name, p)
    }
    fn buffer(&mut self, _: &str, _: &[usize], _: &mut [f64]) {}
}

/// Named state entry: parameters and buffers in visiting order.
pub struct StateEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let [z, y, xx] = self.config.input_shape;
        let s = x.shape();
        let expected = vec![s.first().copied().unwrap_or(0).max(1), self.config.in_channels, z, y, xx];
        if s.len() != 5 || s[0] == 0 || s[1..] != expected[1..] {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        Ok(self.net.forward(x.clone(), mode))
    }

    /// Inference-mode forward pass; safe to call concurrently.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        Ok(self.net.infer(x.clone()))
    }

    /// Accumulates parameter gradients from `d loss / d logits`.
    pub fn backward(&mut self, grad_logits: Tensor) {
        self.net.backward(grad_logits);
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(|_, p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    pub fn for_each_param(&mut self, f: impl FnMut(&str, &mut Param)) {
        self.net.visit("", &mut Collect(f));
    }

    pub fn visit(&mut self, v: &mut dyn StateVisitor) {
        self.net.visit("", v);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param(|_, p| n += p.value.len());
        n
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.clone().for_each_param(|name, _| names.push(name.to_string()));
        names
    }

    /// All parameters and buffers, in visiting order.
    pub fn state(&self) -> Vec<StateEntry> {
        struct Dump(Vec<StateEntry>);
        impl StateVisitor for Dump {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.0.push(StateEntry {
                    name: name.to_string(),
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                });
            }
            fn buffer(&mut self, name: &str, shape: &[usize], data: &mut [f64]) {
                self.0.push(StateEntry {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    values: data.to_vec(),
                });
            }
        }
        let mut d = Dump(Vec::new());
        self.clone().net.visit("", &mut d);
        d.0
    }

    /// Overwrites parameters and buffers by name; every entry must match.
    pub fn load_state(&mut self, entries: Vec<StateEntry>) -> Result<(), ModelError> {
        struct Load {
            map: BTreeMap<String, StateEntry>,
            err: Option<String>,
        }
        impl Load {
            fn take(&mut self, name: &str, shape: &[usize], dst: &mut [f64]) {
                match self.map.remove(name) {
                    Some(e) if e.shape == shape && e.values.len() == dst.len() => dst.copy_from_slice(&e.values),
                    Some(e) => {
                        self.err.get_or_insert(format!("{name}: shape {:?}, expected {shape:?}", e.shape));
                    }
                    None => {
                        self.err.get_or_insert(format!("missing tensor {name}"));
                    }
                }
            }
        }
        impl StateVisitor for Load {
            fn param(&mut self, name: &str, p: &mut Param) {
                let shape = p.shape.clone();
                self.take(name, &shape, &mut p.value);
            }
            fn buffer(&mut self, name: &str, shape: &[usize], data: &mut [f64]) {
                self.take(name, shape, data);
            }
        }
        let mut l = Load {
            map: entries.into_iter().map(|e| (e.name.clone(), e)).collect(),
            err: None,
        };
        self.net.visit("", &mut l);
        if let Some(e) = l.err {
            return Err(ModelError::CorruptCheckpoint(e));
        }
        if let Some(name) = l.map.keys().next() {
            return Err(ModelError::CorruptCheckpoint(format!("unexpected tensor {name}")));
        }
        Ok(())
    }

    /// Order-sensitive checksum over all parameter values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.state() {
            for v in e.values {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Hash of the relu masks and pool winners from the last
    /// [`Model::forward`]; equal signatures mean the same linear region.
    pub fn activation_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325;
        self.net.fold_pattern(&mut h);
        h
    }

    /// Units per dense block or residual stage, read back from the built
    /// network's parameter names.
    pub fn block_counts(&self) -> Vec<usize> {
        let mut counts: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for name in self.parameter_names() {
            let parts: Vec<&str> = name.split('.').collect();
            let (block, unit) = match self.config.family {
                Family::Densenet => {
                    let Some(b) = parts.iter().find_map(|p| p.strip_prefix("denseblock")) else { continue };
                    let Some(u) = parts.iter().find_map(|p| p.strip_prefix("denselayer")) else { continue };
                    (b.parse().ok(), u.parse().ok())
                }
                Family::Resnet => match parts.as_slice() {
                    [l, u, ..] if l.starts_with("layer") => (l[5..].parse().ok(), u.parse().ok()),
                    _ => continue,
                },
            };
            if let (Some(b), Some(u)) = (block, unit) {
                counts.entry(b).or_default().insert(u);
            }
        }
        counts.into_values().map(|s| s.len()).collect()
    }
}

/// Row-wise softmax of a (B, C) tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rule() {
        let cfg = ModelConfig {
            block_layers: vec![1, 1, 1],
            ..ModelConfig::micro_densenet(5)
        }
        .with_input_shape([2, 8, 8]);
        assert_eq!(cfg.downsampling_stages(), 4);
        assert!(matches!(build_model(&cfg), Err(ModelError::InvalidConfig(_))));
        let z = ModelConfig::micro_densenet(5).with_input_shape([2, 16, 16]).z_downsampling().unwrap();
        assert_eq!(z, vec![true, false, false]);
        assert_eq!(ModelConfig::densenet121(5).z_downsampling().unwrap(), vec![true; 5]);
    }

    #[test]
    fn fingerprint_ignores_seed() {
        let a = ModelConfig::micro_densenet(5);
        assert_eq!(a.fingerprint(), a.clone().with_seed(9).fingerprint());
        assert_ne!(a.fingerprint(), ModelConfig::micro_densenet(4).fingerprint());
    }

    #[test]
    fn softmax_and_argmax() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 3.0, 3.0]);
        let p = softmax_rows(&t);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p[0]), 1);
    }
}
