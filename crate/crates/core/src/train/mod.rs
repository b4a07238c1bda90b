//! Text-only training of the projector and prefix decoder.
//!
//! Each training product becomes the text `"<aspects> | <caption>"`, which is
//! embedded by the frozen text encoder. The projector maps that embedding to
//! a prefix, and the decoder learns to emit the aspect string after it. No
//! image embedding is used here; at inference the image embedding from the
//! same shared space takes the text embedding's place.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect::serialize_aspects;
use crate::data::ProductRecord;
use crate::digest::sha256_hex;
use crate::embedding::EmbeddingVector;
use crate::models::{AdapterError, Adapters, DualEncoder, ImageRef};

mod checkpoint;
mod gru;
mod optim;
mod projector;
mod tokenizer;

pub use checkpoint::{CheckpointMeta, DecoderCheckpoint};
pub use gru::{DecoderShape, GruDecoder};
pub use optim::{clip_global_norm, AdamW};
pub use projector::{project, Projector, ProjectorShape};
pub use tokenizer::CharTokenizer;

/// Separates the aspect string from the caption in training texts.
pub const TEXT_SEPARATOR: &str = " | ";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("product {id}: {source}")]
    Adapter {
        id: String,
        #[source]
        source: AdapterError,
    },
    #[error("product {id} has no aspects")]
    EmptyAspects { id: String },
    #[error("product {id} has an empty caption")]
    CaptionMissing { id: String },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (gradient norm {grad_norm})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norm: f64,
    },
    #[error("embedding has dimension {got}, projector expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub prefix_len: usize,
    pub optimizer: String,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Standard deviation of Gaussian noise added to text embeddings.
    pub embedding_noise_std: f64,
    pub decoder_dim: usize,
    pub hidden_dim: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 512,
            max_epochs: 100,
            early_stop_patience: 3,
            prefix_len: 10,
            optimizer: "adamw".into(),
            weight_decay: 0.01,
            grad_clip: 1.0,
            embedding_noise_std: 0.0,
            decoder_dim: 32,
            hidden_dim: 128,
            max_decode_len: 160,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::InvalidConfig(msg.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.prefix_len == 0 {
            return fail("batch_size, max_epochs and prefix_len must be at least 1");
        }
        if self.decoder_dim == 0 || self.hidden_dim == 0 || self.max_decode_len == 0 {
            return fail("decoder dimensions must be at least 1");
        }
        if self.optimizer != "adamw" {
            return Err(TrainError::InvalidConfig(format!(
                "unsupported optimizer {:?}",
                self.optimizer
            )));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.embedding_noise_std >= 0.0) {
            return fail("weight_decay, grad_clip and embedding_noise_std must be non-negative");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(&[&serde_json::to_vec(self).expect("config serializes")])
    }
}

/// The text-side training input for a product: its serialized aspects, the
/// separator, then the caption.
pub fn build_training_text(record: &ProductRecord, caption: &str) -> Result<String, TrainError> {
    if record.gold_aspects.is_empty() {
        return Err(TrainError::EmptyAspects { id: record.id.clone() });
    }
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(TrainError::CaptionMissing { id: record.id.clone() });
    }
    Ok(format!(
        "{}{TEXT_SEPARATOR}{caption}",
        serialize_aspects(&record.gold_aspects)
    ))
}

/// Decoder target for a product: its aspect string followed by the end token.
pub fn target_ids(record: &ProductRecord) -> Vec<u32> {
    let mut ids = CharTokenizer.encode(&serialize_aspects(&record.gold_aspects));
    ids.push(CharTokenizer::EOS);
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub encoder_text: String,
    pub embedding: EmbeddingVector,
    pub target_ids: Vec<u32>,
}

/// Caption every product, build its training text and embed it. Runs in
/// parallel; the output order follows `records`.
pub fn prepare_examples(records: &[ProductRecord], adapters: &Adapters) -> Result<Vec<TrainingExample>, TrainError> {
    records
        .par_iter()
        .map(|record| {
            let adapter = |source| TrainError::Adapter {
                id: record.id.clone(),
                source,
            };
            let caption = adapters
                .captioner
                .caption(&ImageRef::new(record.image_ref.clone()))
                .map_err(adapter)?;
            let encoder_text = build_training_text(record, &caption)?;
            let embedding = adapters.encoder.encode_text(&encoder_text).map_err(adapter)?;
            Ok(TrainingExample {
                id: record.id.clone(),
                encoder_text,
                embedding,
                target_ids: target_ids(record),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean token loss on the validation examples, or on the training
    /// examples when there are none.
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: DecoderCheckpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

fn embedding_matrix<'a>(examples: impl ExactSizeIterator<Item = &'a TrainingExample>) -> Array2<f32> {
    let rows: Vec<_> = examples.map(|e| ndarray::aview1(e.embedding.as_slice())).collect();
    ndarray::stack(Axis(0), &rows).expect("equal widths")
}

/// Batched projection in `f32`: `[batch, prefix_len, decoder_dim]`.
fn project_batch(projector: &Projector, embeddings: &Array2<f32>) -> Array3<f32> {
    let shape = projector.shape();
    let flat = embeddings.dot(&projector.weight.t()) + &projector.bias;
    flat.into_shape_with_order((embeddings.nrows(), shape.prefix_len, shape.decoder_dim))
        .expect("rows divide evenly")
}

struct Model {
    projector: Projector,
    decoder: GruDecoder,
}

impl Model {
    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = vec![
            self.projector.weight.as_slice_mut().expect("standard layout"),
            self.projector.bias.as_slice_mut().expect("standard layout"),
        ];
        out.extend(self.decoder.tensors_mut());
        out
    }

    fn mean_loss(&self, examples: &[TrainingExample], batch_size: usize) -> f64 {
        let (sum, tokens) = examples
            .chunks(batch_size)
            .map(|chunk| {
                let prefixes = project_batch(&self.projector, &embedding_matrix(chunk.iter()));
                let targets: Vec<_> = chunk.iter().map(|e| e.target_ids.clone()).collect();
                let r = self.decoder.run_batch(prefixes.view(), &targets, false);
                (r.loss_sum, r.tokens)
            })
            .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        sum / tokens.max(1) as f64
    }
}

/// Train from scratch, or continue from `resume`. Optimizer moments are not
/// stored in checkpoints, so a resumed run starts them from zero.
pub fn train_decoder(
    train: &[TrainingExample],
    val: &[TrainingExample],
    config: &TrainConfig,
    resume: Option<DecoderCheckpoint>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let first = train.first().ok_or(TrainError::EmptyTrainingSet)?;
    let embedding_dim = first.embedding.dim();
    if let Some(bad) = train.iter().chain(val).find(|e| e.embedding.dim() != embedding_dim) {
        return Err(TrainError::DimensionMismatch {
            expected: embedding_dim,
            got: bad.embedding.dim(),
        });
    }
    if let Some(bad) = train.iter().chain(val).find(|e| e.target_ids.is_empty()) {
        return Err(TrainError::EmptyAspects { id: bad.id.clone() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tokenizer = CharTokenizer;
    let projector_shape = ProjectorShape {
        embedding_dim,
        prefix_len: config.prefix_len,
        decoder_dim: config.decoder_dim,
    };
    let decoder_shape = DecoderShape {
        vocab_size: tokenizer.vocab_size(),
        input_dim: config.decoder_dim,
        hidden_dim: config.hidden_dim,
    };
    let (mut model, start_epoch, mut best) = match resume {
        Some(ckpt) => {
            if ckpt.projector.shape() != projector_shape || ckpt.decoder.shape() != decoder_shape {
                return Err(TrainError::Checkpoint(
                    "checkpoint shapes do not match the training configuration".into(),
                ));
            }
            if ckpt.meta.config_digest != config.digest() {
                warn!("resuming with a training configuration that differs from the checkpoint's");
            }
            let epoch = ckpt.meta.epoch;
            let model = Model {
                projector: ckpt.projector.clone(),
                decoder: ckpt.decoder.clone(),
            };
            (model, epoch + 1, Some(ckpt))
        }
        None => {
            let model = Model {
                projector: Projector::random(projector_shape, &mut rng),
                decoder: GruDecoder::random(decoder_shape, &mut rng),
            };
            (model, 1, None)
        }
    };
    // Keep the shuffling stream independent of whether this run resumed.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ start_epoch as u64);

    let selection = if val.is_empty() { train } else { val };
    let noise = Normal::new(0.0f32, config.embedding_noise_std as f32)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let started = Instant::now();

    for epoch in start_epoch..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let mut embeddings = embedding_matrix(batch.iter().map(|&i| &train[i]));
            if config.embedding_noise_std > 0.0 {
                embeddings.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            let prefixes = project_batch(&model.projector, &embeddings);
            let targets: Vec<_> = batch.iter().map(|&i| train[i].target_ids.clone()).collect();
            let result = model.decoder.run_batch(prefixes.view(), &targets, true);
            let (mut decoder_grads, d_prefix) = result.grads.expect("gradients requested");
            let d_flat = d_prefix
                .into_shape_with_order((batch.len(), projector_shape.rows()))
                .expect("contiguous");
            let mut d_weight = d_flat.t().dot(&embeddings);
            let mut d_bias = d_flat.sum_axis(Axis(0));
            let mut grads: Vec<&mut [f32]> = vec![
                d_weight.as_slice_mut().expect("standard layout"),
                d_bias.as_slice_mut().expect("standard layout"),
            ];
            grads.extend(decoder_grads.tensors_mut());
            let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
            let batch_loss = result.loss_sum / result.tokens as f64;
            if !batch_loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    loss: batch_loss,
                    grad_norm,
                });
            }
            let grads: Vec<&[f32]> = grads.into_iter().map(|g| &*g).collect();
            optimizer.update(&mut model.tensors_mut(), &grads);
            loss_sum += result.loss_sum;
            tokens += result.tokens;
        }
        let val_loss = model.mean_loss(selection, config.batch_size);
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / tokens as f64,
            val_loss,
            lr: optimizer.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}",
            entry.train_loss, entry.val_loss
        );
        log.push(entry);
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
                grad_norm: f64::NAN,
            });
        }
        if best.as_ref().is_none_or(|b| val_loss < b.meta.val_loss) {
            since_best = 0;
            best = Some(DecoderCheckpoint {
                projector: model.projector.clone(),
                decoder: model.decoder.clone(),
                meta: CheckpointMeta {
                    tokenizer_id: tokenizer.id().into(),
                    config_digest: config.digest(),
                    epoch,
                    val_loss,
                    train_config: config.clone(),
                },
            });
        } else {
            since_best += 1;
            if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let checkpoint = best.ok_or_else(|| {
        TrainError::InvalidConfig(format!(
            "no epochs to run: resumed at epoch {start_epoch} with max_epochs {}",
            config.max_epochs
        ))
    })?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        stopped_early,
    })
}

/// Embed `text` with the frozen encoder and decode it greedily.
pub fn reconstruct(text: &str, checkpoint: &DecoderCheckpoint, encoder: &dyn DualEncoder) -> Result<String, TrainError> {
    let embedding = encoder.encode_text(text).map_err(|source| TrainError::Adapter {
        id: "<text>".into(),
        source,
    })?;
    checkpoint.decode(&embedding)
}
