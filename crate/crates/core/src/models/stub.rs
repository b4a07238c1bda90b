//! Deterministic stand-ins for the frozen models.
//!
//! A stub "image" `X.img` is described by sidecar files next to it:
//!
//! | file               | contents                                              | required |
//! |--------------------|-------------------------------------------------------|----------|
//! | `X.img.txt`        | hidden description the image depicts                  | yes      |
//! | `X.img.ocr.json`   | `[{"text": ..., "confidence": ...}]` in reading order | no       |
//! | `X.img.caption.txt`| caption returned instead of the description           | no       |
//! | `X.img.vqa.json`   | `{"attribute": "answer"}` used to answer prompts       | no       |
//!
//! The text encoder is a bag of hashed character trigrams and words,
//! L2-normalized. The image encoder embeds the hidden description with the
//! same function, then optionally rotates it away by a fixed angle so that
//! `cos(image, description) = 1 - noise` exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    check_text, prompt_attribute, AdapterConfig, AdapterError, CaptionModel, DetectedText,
    DualEncoder, ImageRef, OcrEngine, FALLBACK_ANSWER,
};
use crate::digest;
use crate::embedding::EmbeddingVector;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_MAX_TEXT_CHARS: usize = 2048;

#[derive(Debug, Clone)]
pub struct StubModels {
    root: PathBuf,
    config: AdapterConfig,
    noise: f64,
    max_text_chars: usize,
}

impl StubModels {
    /// Stub models reading sidecars relative to `root`, with the default
    /// model ids and embedding width.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            config: AdapterConfig::default(),
            noise: 0.0,
            max_text_chars: DEFAULT_MAX_TEXT_CHARS,
        }
    }

    pub fn with_config(mut self, config: AdapterConfig) -> Self {
        assert!(config.embedding_dim > 0, "embedding_dim must be positive");
        self.config = config;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(dim > 0, "embedding_dim must be positive");
        self.config.embedding_dim = dim;
        self
    }

    /// Image/text mismatch. Must lie in `[0, 1)`.
    pub fn with_noise(mut self, noise: f64) -> Self {
        assert!((0.0..1.0).contains(&noise), "noise must lie in [0, 1)");
        self.noise = noise;
        self
    }

    pub fn with_max_text_chars(mut self, limit: usize) -> Self {
        self.max_text_chars = limit;
        self
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    fn image_path(&self, image: &ImageRef) -> PathBuf {
        self.root.join(image.as_str())
    }

    fn sidecar(&self, image: &ImageRef, suffix: &str) -> PathBuf {
        let mut path = self.image_path(image).into_os_string();
        path.push(suffix);
        PathBuf::from(path)
    }

    fn unreadable(image: &ImageRef, reason: impl std::fmt::Display) -> AdapterError {
        AdapterError::ImageUnreadable {
            image: image.to_string(),
            reason: reason.to_string(),
        }
    }

    fn read_optional(&self, image: &ImageRef, suffix: &str) -> Result<Option<String>, AdapterError> {
        let path = self.sidecar(image, suffix);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Self::unreadable(image, format!("{}: {e}", path.display()))),
        }
    }

    /// The hidden description; its absence makes the image unreadable.
    pub fn description(&self, image: &ImageRef) -> Result<String, AdapterError> {
        if image.as_str().trim().is_empty() || image.as_str().contains("://") {
            return Err(Self::unreadable(image, "not a local stub image"));
        }
        match self.read_optional(image, ".txt")? {
            Some(text) if !text.trim().is_empty() => Ok(text.trim().to_string()),
            Some(_) => Err(Self::unreadable(image, "empty description")),
            None => Err(Self::unreadable(image, "missing description sidecar")),
        }
    }

    fn parse_json<T: serde::de::DeserializeOwned>(
        &self,
        image: &ImageRef,
        suffix: &str,
    ) -> Result<Option<T>, AdapterError> {
        self.read_optional(image, suffix)?
            .map(|text| serde_json::from_str(&text).map_err(|e| Self::unreadable(image, format!("{suffix}: {e}"))))
            .transpose()
    }

    fn rotate(&self, image: &ImageRef, description: &str, base: EmbeddingVector) -> Result<EmbeddingVector, AdapterError> {
        if self.noise == 0.0 {
            return Ok(base);
        }
        let e: Vec<f64> = base.as_slice().iter().map(|&v| f64::from(v)).collect();
        let mut rng = ChaCha8Rng::from_seed(digest::sha256_parts(&[
            b"stub-image-noise",
            image.as_str().as_bytes(),
            description.as_bytes(),
        ]));
        // Draw directions until one is not parallel to `e`; the first draw
        // practically always works.
        loop {
            let mut u: Vec<f64> = (0..e.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let along: f64 = u.iter().zip(&e).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(&e).for_each(|(a, b)| *a -= along * b);
            let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            // e and u/|u| are orthonormal, so cos(e + s*u, e) = 1/sqrt(1 + s^2).
            let s = ((1.0 - self.noise).powi(-2) - 1.0).sqrt();
            let rotated: Vec<f32> = e
                .iter()
                .zip(&u)
                .map(|(a, b)| (a + s * b / norm) as f32)
                .collect();
            return EmbeddingVector::new(rotated)
                .and_then(|v| v.normalized())
                .map_err(|err| AdapterError::Unavailable(err.to_string()));
        }
    }
}

/// Hashed bag of character trigrams (over the space-padded text) and whole
/// words, each feature contributing `±1` to one coordinate.
pub fn ngram_embedding(text: &str, dim: usize) -> Result<EmbeddingVector, AdapterError> {
    let lowered = text.trim().to_lowercase();
    let padded: Vec<char> = format!(" {} ", lowered.split_whitespace().collect::<Vec<_>>().join(" "))
        .chars()
        .collect();
    let mut values = vec![0f32; dim];
    let mut add = |kind: &[u8], feature: &str| {
        let h = digest::u64_of(&[kind, feature.as_bytes()]);
        let index = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        values[index] += sign;
    };
    for window in padded.windows(3) {
        add(b"tri", &window.iter().collect::<String>());
    }
    for word in lowered.split_whitespace() {
        add(b"word", word);
    }
    EmbeddingVector::new(values)
        .and_then(|v| v.normalized())
        .map_err(|e| AdapterError::Unavailable(format!("degenerate stub embedding: {e}")))
}

impl DualEncoder for StubModels {
    fn model_id(&self) -> &str {
        &self.config.dual_encoder_id
    }

    fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        check_text(text, self.max_text_chars)?;
        ngram_embedding(text, self.config.embedding_dim)
    }

    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector, AdapterError> {
        let description = self.description(image)?;
        let base = ngram_embedding(&description, self.config.embedding_dim)?;
        self.rotate(image, &description, base)
    }
}

impl CaptionModel for StubModels {
    fn model_id(&self) -> &str {
        &self.config.caption_model_id
    }

    fn generate(&self, image: &ImageRef, prompt: Option<&str>) -> Result<String, AdapterError> {
        let description = self.description(image)?;
        let Some(prompt) = prompt else {
            return Ok(match self.read_optional(image, ".caption.txt")? {
                Some(caption) if !caption.trim().is_empty() => caption.trim().to_string(),
                _ => description,
            });
        };
        let answers: BTreeMap<String, String> = self.parse_json(image, ".vqa.json")?.unwrap_or_default();
        let answer = prompt_attribute(prompt)
            .map(|attribute| attribute.trim().to_lowercase())
            .and_then(|attribute| answers.into_iter().find(|(k, _)| k.trim().to_lowercase() == attribute))
            .map(|(_, answer)| answer)
            .unwrap_or_else(|| FALLBACK_ANSWER.to_string());
        Ok(answer)
    }
}

impl OcrEngine for StubModels {
    fn model_id(&self) -> &str {
        &self.config.ocr_engine_id
    }

    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectedText>, AdapterError> {
        self.description(image)?;
        Ok(self.parse_json(image, ".ocr.json")?.unwrap_or_default())
    }
}

/// Sidecar contents for one stub image.
#[derive(Debug, Clone, Default)]
pub struct StubImage {
    pub description: String,
    pub caption: Option<String>,
    pub ocr: Vec<DetectedText>,
    pub answers: BTreeMap<String, String>,
}

impl StubImage {
    /// Write `image_ref` (an empty placeholder file) and its sidecars under `root`.
    pub fn write(&self, root: &Path, image_ref: &str) -> std::io::Result<()> {
        let path = root.join(image_ref);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let sidecar = |suffix: &str| {
            let mut p = path.clone().into_os_string();
            p.push(suffix);
            PathBuf::from(p)
        };
        std::fs::write(&path, b"")?;
        std::fs::write(sidecar(".txt"), &self.description)?;
        if let Some(caption) = &self.caption {
            std::fs::write(sidecar(".caption.txt"), caption)?;
        }
        if !self.ocr.is_empty() {
            std::fs::write(sidecar(".ocr.json"), serde_json::to_string_pretty(&self.ocr)?)?;
        }
        if !self.answers.is_empty() {
            std::fs::write(sidecar(".vqa.json"), serde_json::to_string_pretty(&self.answers)?)?;
        }
        Ok(())
    }
}
