//! Contracts for the frozen external models.
//!
//! Three models are consumed and never trained: a dual encoder that maps
//! images and text into one shared space, a caption model that can also
//! answer prompts about an image, and an OCR engine. Each is a trait so the
//! pipeline can run against the deterministic [`stub::StubModels`] or a
//! real model behind the JSON protocol in [`protocol`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub mod protocol;
pub mod stub;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("adapter unavailable: {0}")]
    Unavailable(String),
    #[error("input of {len} characters exceeds the adapter limit of {limit}")]
    InputTooLong { len: usize, limit: usize },
    #[error("image {image:?} unreadable: {reason}")]
    ImageUnreadable { image: String, reason: String },
    #[error("invalid adapter input: {0}")]
    InvalidInput(String),
}

/// Path or URL of a product image, as written in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn new(image: impl Into<String>) -> Self {
        Self(image.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ImageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageRef {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// A text token as reported by the OCR engine, before thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedText {
    pub text: String,
    pub confidence: f64,
}

/// A detected token that survived the confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    /// Lowercased and trimmed.
    pub text: String,
    pub confidence: f64,
    /// Index in the engine's detection order, used to find adjacent tokens.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnswer {
    pub attribute: String,
    pub value: String,
    pub raw_response: String,
}

impl PromptAnswer {
    pub fn is_fallback(&self) -> bool {
        self.value == FALLBACK_ANSWER
    }
}

/// Identifiers of the three frozen models and the shared embedding width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dual_encoder_id: String,
    pub caption_model_id: String,
    pub ocr_engine_id: String,
    pub embedding_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            dual_encoder_id: "stub-ngram-encoder".into(),
            caption_model_id: "stub-sidecar-captioner".into(),
            ocr_engine_id: "stub-sidecar-ocr".into(),
            embedding_dim: stub::DEFAULT_DIM,
        }
    }
}

pub const PROMPT_TEMPLATE: &str = "Question: What is the {attribute} of the product? Answer:";

/// Value recorded when the model has no answer for an attribute.
pub const FALLBACK_ANSWER: &str = "unknown";

pub fn render_prompt(attribute: &str) -> String {
    PROMPT_TEMPLATE.replace("{attribute}", attribute)
}

/// Inverse of [`render_prompt`]; `None` if `prompt` does not follow the template.
pub fn prompt_attribute(prompt: &str) -> Option<&str> {
    let (head, tail) = PROMPT_TEMPLATE.split_once("{attribute}")?;
    prompt.strip_prefix(head)?.strip_suffix(tail)
}

/// First line, trimmed, lowercased, trailing punctuation removed. An empty
/// result becomes [`FALLBACK_ANSWER`].
pub fn clean_answer(raw: &str) -> String {
    let first = raw.lines().next().unwrap_or("");
    let cleaned = first
        .trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_string();
    if cleaned.is_empty() {
        FALLBACK_ANSWER.to_string()
    } else {
        cleaned
    }
}

pub(crate) fn check_text(text: &str, limit: usize) -> Result<(), AdapterError> {
    if text.trim().is_empty() {
        return Err(AdapterError::InvalidInput("empty text".into()));
    }
    let len = text.chars().count();
    if len > limit {
        return Err(AdapterError::InputTooLong { len, limit });
    }
    Ok(())
}

/// Frozen image/text encoder pair sharing one embedding space.
pub trait DualEncoder: Send + Sync {
    fn model_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, AdapterError>;

    fn encode_image(&self, image: &ImageRef) -> Result<EmbeddingVector, AdapterError>;
}

/// Frozen image-to-text model, optionally steered by a prompt.
pub trait CaptionModel: Send + Sync {
    fn model_id(&self) -> &str;

    /// Greedy generation for `image`, conditioned on `prompt` when given.
    fn generate(&self, image: &ImageRef, prompt: Option<&str>) -> Result<String, AdapterError>;

    fn caption(&self, image: &ImageRef) -> Result<String, AdapterError> {
        let caption = self.generate(image, None)?;
        if caption.trim().is_empty() {
            return Err(AdapterError::Unavailable(format!(
                "{} returned an empty caption for {image}",
                self.model_id()
            )));
        }
        Ok(caption)
    }

    /// Ask the templated question for `attribute` and clean the answer.
    fn answer_prompt(&self, image: &ImageRef, attribute: &str) -> Result<PromptAnswer, AdapterError> {
        if attribute.trim().is_empty() {
            return Err(AdapterError::InvalidInput("empty attribute".into()));
        }
        let raw_response = self.generate(image, Some(&render_prompt(attribute)))?;
        Ok(PromptAnswer {
            attribute: attribute.to_string(),
            value: clean_answer(&raw_response),
            raw_response,
        })
    }
}

pub trait OcrEngine: Send + Sync {
    fn model_id(&self) -> &str;

    /// Every token the engine detects, in detection order.
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectedText>, AdapterError>;

    /// Detected tokens passed through [`threshold_tokens`].
    fn ocr_tokens(&self, image: &ImageRef, tau_c: f64) -> Result<Vec<OcrToken>, AdapterError> {
        check_tau_c(tau_c)?;
        Ok(threshold_tokens(self.detect(image)?, tau_c))
    }
}

pub(crate) fn check_tau_c(tau_c: f64) -> Result<(), AdapterError> {
    if (0.0..=1.0).contains(&tau_c) {
        Ok(())
    } else {
        Err(AdapterError::InvalidInput(format!("tau_c {tau_c} outside [0, 1]")))
    }
}

/// Keep tokens with confidence strictly above `tau_c`, lowercased and
/// trimmed. Tokens with empty text or a confidence outside `[0, 1]` are
/// skipped. Positions refer to the unfiltered detection order.
pub fn threshold_tokens(detected: Vec<DetectedText>, tau_c: f64) -> Vec<OcrToken> {
    detected
        .into_iter()
        .enumerate()
        .filter_map(|(position, d)| {
            let text = d.text.trim().to_lowercase();
            let valid = !text.is_empty() && (0.0..=1.0).contains(&d.confidence);
            (valid && d.confidence > tau_c).then_some(OcrToken {
                text,
                confidence: d.confidence,
                position,
            })
        })
        .collect()
}

/// The three frozen models used by training and inference.
#[derive(Clone)]
pub struct Adapters {
    pub encoder: Arc<dyn DualEncoder>,
    pub captioner: Arc<dyn CaptionModel>,
    pub ocr: Arc<dyn OcrEngine>,
}

impl Adapters {
    /// One object serving all three roles.
    pub fn from_single<M>(models: M) -> Self
    where
        M: DualEncoder + CaptionModel + OcrEngine + 'static,
    {
        let models = Arc::new(models);
        Self {
            encoder: models.clone(),
            captioner: models.clone(),
            ocr: models,
        }
    }

    /// Check the encoder against the configured shared-space width by
    /// embedding a probe string.
    pub fn check_shared_space(&self, config: &AdapterConfig) -> Result<(), AdapterError> {
        let probe = self.encoder.encode_text("shared space probe")?;
        if self.encoder.dim() != config.embedding_dim || probe.dim() != config.embedding_dim {
            return Err(AdapterError::Unavailable(format!(
                "encoder {} reports dim {} (probe {}), configured {}",
                self.encoder.model_id(),
                self.encoder.dim(),
                probe.dim(),
                config.embedding_dim
            )));
        }
        Ok(())
    }
}

impl std::fmt::Debug for Adapters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Adapters")
            .field("encoder", &self.encoder.model_id())
            .field("captioner", &self.captioner.model_id())
            .field("ocr", &self.ocr.model_id())
            .finish()
    }
}
