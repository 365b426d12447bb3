//! TOML run configuration with strict key checking.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ingestion::LabelSet;
use crate::model::ModelConfig;
use crate::preprocessing::PreprocessConfig;
use crate::training::{SplitSpec, TrainConfig};

/// Default data root when a config leaves `paths.data_root` unset.
pub const DATA_ROOT_ENV: &str = "MRISEQ_DATA_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    /// Existing manifest; when absent, `<data_root>/manifest.jsonl` is used
    /// if present, otherwise one is built by scanning the data root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            manifest: None,
            run_dir: default_run_dir(),
        }
    }
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub label_set: LabelSet,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
}

impl RunConfig {
    /// Starting point for a config file: the given model preset with a
    /// preprocessing grid that matches its input shape.
    pub fn template(run_id: &str, label_set: LabelSet, preset: &str) -> Result<Self, ConfigError> {
        let model = ModelConfig::preset(preset, label_set.num_classes())
            .ok_or_else(|| ConfigError::Invalid(format!("unknown model preset '{preset}'")))?;
        let mut preprocess = PreprocessConfig::default();
        let [z, y, x] = model.input_shape;
        if model.input_shape != preprocess.input_shape() {
            preprocess.target_shape = [x, y, z];
            preprocess.target_spacing = [
                1.5 * 256.0 / x as f64,
                1.5 * 256.0 / y as f64,
                7.8 * 36.0 / z as f64,
            ];
        }
        Ok(Self {
            run_id: run_id.to_string(),
            label_set,
            k: default_k(),
            paths: PathsConfig::default(),
            preprocess,
            model,
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parses, validates and resolves relative paths against the config
    /// file's directory; an unset data root falls back to `MRISEQ_DATA_ROOT`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim().to_string(),
        })?;
        cfg.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if self.paths.data_root.is_none() {
            self.paths.data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        }
        self.paths.data_root = self.paths.data_root.as_deref().map(abs);
        self.paths.manifest = self.paths.manifest.as_deref().map(abs);
        self.paths.run_dir = abs(&self.paths.run_dir);
    }

    /// Sets every seed (model init, shuffling, split) to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.run_id.trim().is_empty() || self.run_id.contains(['/', '\\']) {
            return inv(format!("run_id '{}' must be a non-empty directory name", self.run_id));
        }
        if let Err(e) = self.split.validate() {
            return inv(format!("split: {e}"));
        }
        if let Err(e) = self.preprocess.validate() {
            return inv(format!("preprocess: {e}"));
        }
        if let Err(e) = self.model.validate() {
            return inv(format!("model: {e}"));
        }
        if let Err(e) = self.train.validate() {
            return inv(format!("train: {e}"));
        }
        if self.k == 0 {
            return inv("k must be at least 1".into());
        }
        if self.model.num_classes != self.label_set.num_classes() {
            return inv(format!(
                "model.num_classes is {} but label_set '{}' has {} classes",
                self.model.num_classes,
                self.label_set,
                self.label_set.num_classes()
            ));
        }
        if self.model.in_channels != 1 {
            return inv(format!("model.in_channels must be 1, got {}", self.model.in_channels));
        }
        if self.model.input_shape != self.preprocess.input_shape() {
            return inv(format!(
                "model.input_shape {:?} (Z, Y, X) does not match preprocess.target_shape {:?} (X, Y, Z)",
                self.model.input_shape, self.preprocess.target_shape
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> RunConfig {
        RunConfig::template("r1", LabelSet::Body, "micro-densenet").unwrap()
    }

    #[test]
    fn template_is_valid_and_round_trips() {
        let c = micro();
        c.validate().unwrap();
        assert_eq!(c.preprocess.target_shape, [32, 32, 16]);
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), text);
        RunConfig::template("r", LabelSet::Brain, "densenet121").unwrap().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = micro().to_toml_string().replace("epochs =", "epochz =");
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
    }

    #[test]
    fn ratio_errors_name_ratios() {
        let mut c = micro();
        c.split.ratios = [0.6, 0.1, 0.2];
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("ratios"), "{e}");
    }

    #[test]
    fn shape_and_class_mismatches() {
        let mut c = micro();
        c.model.num_classes = 4;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.preprocess.target_shape = [32, 32, 8];
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_override_and_paths() {
        let mut c = micro();
        c.paths.data_root = Some("data".into());
        c.override_seed(42);
        assert_eq!((c.model.seed, c.train.seed, c.split.seed), (42, 42, 42));
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.paths.data_root.as_deref(), Some(Path::new("/cfg/data")));
        assert_eq!(c.paths.run_dir, Path::new("/cfg/runs"));
    }
}
