use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vioc_core::infer::InferenceConfig;
use vioc_core::models::AdapterConfig;
use vioc_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            unseen_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Sidecar-file stubs read from the image root.
    Stub,
    /// A long-running process speaking the JSON line protocol.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub backend: Backend,
    /// Program and arguments for the `process` backend.
    pub command: Vec<String>,
    /// Image/text mismatch of the stub encoder, in `[0, 1)`.
    pub stub_noise: f64,
    /// Response cache for the `process` backend; `VIOC_CACHE_DIR` overrides it.
    pub cache_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub models: AdapterConfig,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            command: Vec::new(),
            stub_noise: 0.0,
            cache_dir: None,
            models: AdapterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    pub tau_d: f64,
    pub tau_c: f64,
    /// Parallel images during inference; 0 uses every core.
    pub workers: usize,
    pub use_prompts: bool,
    pub use_ocr: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            tau_d: d.tau_d,
            tau_c: d.tau_c,
            workers: 0,
            use_prompts: d.use_prompts,
            use_ocr: d.use_ocr,
        }
    }
}

/// The JSON pipeline configuration. Relative paths are resolved against the
/// directory holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    pub image_root: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub adapters: AdapterSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus);
        resolve(&mut config.image_root);
        resolve(&mut config.output_dir);
        if let Some(s) = config.synonyms.as_mut() {
            resolve(s);
        }
        if let Some(c) = config.adapters.cache_dir.as_mut() {
            resolve(c);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [("tau_d", self.inference.tau_d), ("tau_c", self.inference.tau_c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.adapters.stub_noise) {
            return Err(CliError::Config("stub_noise must lie in [0, 1)".into()));
        }
        if self.adapters.backend == Backend::Process && self.adapters.command.is_empty() {
            return Err(CliError::Config("the process backend needs a command".into()));
        }
        if self.adapters.models.embedding_dim == 0 {
            return Err(CliError::Config("embedding_dim must be positive".into()));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn normalized_corpus(&self) -> PathBuf {
        self.output_dir.join("corpus.normalized.jsonl")
    }

    pub fn split_file(&self) -> PathBuf {
        self.output_dir.join("split.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }

    pub fn train_log(&self) -> PathBuf {
        self.output_dir.join("train_log.jsonl")
    }

    pub fn predictions(&self, partition: &str) -> PathBuf {
        self.output_dir.join(format!("predictions.{partition}.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"corpus": "raw.jsonl", "image_root": "/abs/images", "output_dir": "out"}"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.corpus, dir.path().join("raw.jsonl"));
        assert_eq!(c.image_root, PathBuf::from("/abs/images"));
        assert_eq!(c.inference.tau_d, 0.95);
        assert_eq!(c.inference.tau_c, 0.5);
        assert_eq!(c.split.unseen_fraction, 0.2);
        assert_eq!(c.train.learning_rate, 0.0005);
        assert_eq!(c.train.batch_size, 512);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"corpus": "a", "image_root": "b", "output_dir": "c", "tau": 1}"#).unwrap();
        assert!(PipelineConfig::load(&path).is_err());
        std::fs::write(
            &path,
            r#"{"corpus": "a", "image_root": "b", "output_dir": "c", "inference": {"tau_d": 2.0}}"#,
        )
        .unwrap();
        assert!(PipelineConfig::load(&path).unwrap().validate().is_err());
    }
}
