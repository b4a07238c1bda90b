//! Zero-shot inference: decode aspects from an image embedding, then correct
//! them with prompt answers and OCR tokens.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect::{normalize_attribute, parse_aspects_lenient, Aspect, AspectSet};
use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::models::{AdapterError, Adapters, CaptionModel, DualEncoder, ImageRef, OcrToken};
use crate::train::{DecoderCheckpoint, TrainError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid inference configuration: {0}")]
    InvalidConfig(String),
    #[error("attribute vocabulary is empty")]
    EmptyVocabulary,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Decoder(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Similarity above which a prompt answer replaces the decoded value outright.
    pub tau_d: f64,
    /// OCR confidence a token must exceed to become a candidate.
    pub tau_c: f64,
    /// Attribute names asked about with the prompt template, sorted.
    pub attribute_vocabulary: Vec<String>,
    pub use_prompts: bool,
    pub use_ocr: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau_d: 0.95,
            tau_c: 0.5,
            attribute_vocabulary: Vec::new(),
            use_prompts: true,
            use_ocr: true,
        }
    }
}

impl InferenceConfig {
    pub fn with_vocabulary<I: IntoIterator<Item = S>, S: AsRef<str>>(vocabulary: I) -> Self {
        let mut attribute_vocabulary: Vec<String> =
            vocabulary.into_iter().map(|a| normalize_attribute(a.as_ref())).collect();
        attribute_vocabulary.sort();
        attribute_vocabulary.dedup();
        Self {
            attribute_vocabulary,
            ..Self::default()
        }
    }

    /// Decoder output only, with no correction evidence.
    pub fn uncorrected(mut self) -> Self {
        self.use_prompts = false;
        self.use_ocr = false;
        self
    }

    pub fn validate(&self) -> Result<(), InferError> {
        for (name, v) in [("tau_d", self.tau_d), ("tau_c", self.tau_c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(InferError::InvalidConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.attribute_vocabulary.is_empty() {
            return Err(InferError::EmptyVocabulary);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Decoder,
    Prompt,
    Ocr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// The attribute was answered by a prompt.
    SeenAttribute,
    /// No prompt answer; only OCR evidence applies.
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: String,
    pub source: Source,
    /// Cosine to the decoded value; `None` if the candidate could not be embedded.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub decoded: Aspect,
    pub branch: Branch,
    /// Cosine between the decoded and prompted values on the seen-attribute branch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prompt_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub candidates: Vec<Candidate>,
    pub chosen: Aspect,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFailure {
    pub attribute: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    pub entries: Vec<TraceEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub malformed: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub prompt_errors: Vec<PromptFailure>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ocr_error: Option<String>,
}

/// Decoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub raw: String,
    pub aspects: AspectSet,
    pub malformed: Vec<String>,
}

/// Greedy decode of the projected image embedding, parsed leniently.
pub fn decode_aspects(
    image: &ImageRef,
    checkpoint: &DecoderCheckpoint,
    encoder: &dyn DualEncoder,
) -> Result<Decoded, InferError> {
    let embedding = encoder.encode_image(image)?;
    let raw = checkpoint.decode(&embedding)?;
    let (aspects, malformed) = parse_aspects_lenient(&raw);
    Ok(Decoded {
        raw,
        aspects,
        malformed,
    })
}

/// Ask the prompt template once per vocabulary attribute. Fallback answers
/// are dropped; adapter errors are collected per attribute.
pub fn collect_prompt_answers(
    image: &ImageRef,
    captioner: &dyn CaptionModel,
    vocabulary: &[String],
) -> Result<(AspectSet, Vec<PromptFailure>), InferError> {
    if vocabulary.is_empty() {
        return Err(InferError::EmptyVocabulary);
    }
    let mut answers = AspectSet::new();
    let mut failures = Vec::new();
    for attribute in vocabulary {
        let failure = |error: String| PromptFailure {
            attribute: attribute.clone(),
            error,
        };
        match captioner.answer_prompt(image, attribute) {
            Ok(answer) if answer.is_fallback() => {}
            Ok(answer) => match Aspect::new(attribute, &answer.value) {
                Ok(aspect) if !answers.contains_attribute(attribute) => answers.insert(aspect),
                Ok(_) => {}
                Err(e) => failures.push(failure(e.to_string())),
            },
            Err(e) => failures.push(failure(e.to_string())),
        }
    }
    Ok((answers, failures))
}

/// OCR candidates: every token, then every two-token phrase whose tokens
/// were detected consecutively.
pub fn ocr_candidates(tokens: &[OcrToken]) -> Vec<String> {
    let singles = tokens.iter().map(|t| t.text.clone());
    let phrases = tokens
        .windows(2)
        .filter(|w| w[1].position == w[0].position + 1)
        .map(|w| format!("{} {}", w[0].text, w[1].text));
    singles.chain(phrases).collect()
}

struct Embedder<'a> {
    encoder: &'a dyn DualEncoder,
    cache: HashMap<String, Option<EmbeddingVector>>,
}

impl Embedder<'_> {
    fn get(&mut self, text: &str) -> Option<EmbeddingVector> {
        if let Some(hit) = self.cache.get(text) {
            return hit.clone();
        }
        let v = self.encoder.encode_text(text).ok();
        self.cache.insert(text.to_string(), v.clone());
        v
    }

    fn cosine(&mut self, anchor: &EmbeddingVector, text: &str) -> Option<f64> {
        self.get(text).and_then(|v| cosine_similarity(anchor, &v).ok())
    }
}

/// Fuse decoder output with prompt answers and OCR tokens.
///
/// For each decoded aspect: when its attribute was answered by a prompt and
/// the two values are more than `tau_d` similar, the answer is taken.
/// Otherwise the decoded value is replaced by the most similar candidate
/// among the prompt answer (if any) and the OCR candidates. With no
/// candidates the decoded aspect is kept. Ties go to the earliest candidate;
/// candidates that cannot be embedded are skipped.
pub fn correct_aspects(
    decoded: &AspectSet,
    prompted: &AspectSet,
    ocr: &[OcrToken],
    config: &InferenceConfig,
    encoder: &dyn DualEncoder,
) -> (AspectSet, CorrectionTrace) {
    let mut embedder = Embedder {
        encoder,
        cache: HashMap::new(),
    };
    let ocr_pool = ocr_candidates(ocr);
    let mut out = AspectSet::new();
    let mut trace = CorrectionTrace::default();
    for a_d in decoded.iter() {
        let anchor = embedder.get(a_d.value());
        let prompt = prompted.get(a_d.attribute());
        let branch = if prompt.is_some() {
            Branch::SeenAttribute
        } else {
            Branch::ZeroShot
        };
        let mut entry = TraceEntry {
            decoded: a_d.clone(),
            branch,
            prompt_similarity: None,
            candidates: Vec::new(),
            chosen: a_d.clone(),
            source: Source::Decoder,
        };
        let mut pool: Vec<(String, Source)> = Vec::new();
        if let Some(a_p) = prompt {
            entry.prompt_similarity = anchor.as_ref().and_then(|v| embedder.cosine(v, a_p.value()));
            if entry.prompt_similarity.is_some_and(|s| s > config.tau_d) {
                entry.chosen = a_d.with_value(a_p.value()).expect("non-empty value");
                entry.source = Source::Prompt;
            } else {
                pool.push((a_p.value().to_string(), Source::Prompt));
            }
        }
        if entry.source == Source::Decoder {
            pool.extend(ocr_pool.iter().map(|c| (c.clone(), Source::Ocr)));
        }
        if let Some(anchor) = &anchor {
            let mut best: Option<(f64, usize)> = None;
            for (i, (value, source)) in pool.iter().enumerate() {
                let similarity = embedder.cosine(anchor, value);
                if let Some(s) = similarity {
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, i));
                    }
                }
                entry.candidates.push(Candidate {
                    value: value.clone(),
                    source: *source,
                    similarity,
                });
            }
            if let Some((_, i)) = best {
                entry.chosen = a_d.with_value(&pool[i].0).expect("non-empty value");
                entry.source = pool[i].1;
            }
        }
        out.insert(entry.chosen.clone());
        trace.entries.push(entry);
    }
    (out, trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub aspects: AspectSet,
    pub decoded: String,
    pub trace: CorrectionTrace,
}

/// Decode, gather evidence and correct for one image. An unreadable image
/// fails the product; prompt and OCR failures are recorded in the trace.
pub fn infer_product(
    image: &ImageRef,
    checkpoint: &DecoderCheckpoint,
    adapters: &Adapters,
    config: &InferenceConfig,
) -> Result<Prediction, InferError> {
    config.validate()?;
    let decoded = decode_aspects(image, checkpoint, adapters.encoder.as_ref())?;
    let (prompted, prompt_errors) = if config.use_prompts {
        collect_prompt_answers(image, adapters.captioner.as_ref(), &config.attribute_vocabulary)?
    } else {
        (AspectSet::new(), Vec::new())
    };
    let (tokens, ocr_error) = if config.use_ocr {
        match adapters.ocr.ocr_tokens(image, config.tau_c) {
            Ok(tokens) => (tokens, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        }
    } else {
        (Vec::new(), None)
    };
    let (aspects, mut trace) = correct_aspects(
        &decoded.aspects,
        &prompted,
        &tokens,
        config,
        adapters.encoder.as_ref(),
    );
    trace.malformed = decoded.malformed;
    trace.prompt_errors = prompt_errors;
    trace.ocr_error = ocr_error;
    Ok(Prediction {
        aspects,
        decoded: decoded.raw,
        trace,
    })
}

/// [`infer_product`] over many images on `workers` threads (0 picks the
/// default), returning results in input order.
pub fn infer_batch(
    images: &[ImageRef],
    checkpoint: &DecoderCheckpoint,
    adapters: &Adapters,
    config: &InferenceConfig,
    workers: usize,
) -> Result<Vec<Result<Prediction, InferError>>, InferError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| InferError::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| {
        images
            .par_iter()
            .map(|image| infer_product(image, checkpoint, adapters, config))
            .collect()
    }))
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub aspects: Vec<Aspect>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decoded: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<CorrectionTrace>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl PredictionRow {
    pub fn from_result(id: impl Into<String>, result: &Result<Prediction, InferError>) -> Self {
        match result {
            Ok(p) => Self {
                id: id.into(),
                aspects: p.aspects.as_slice().to_vec(),
                decoded: Some(p.decoded.clone()),
                trace: Some(p.trace.clone()),
                error: None,
            },
            Err(e) => Self {
                id: id.into(),
                aspects: Vec::new(),
                decoded: None,
                trace: None,
                error: Some(e.to_string()),
            },
        }
    }
}
