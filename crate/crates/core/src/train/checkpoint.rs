use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::gru::{DecoderShape, GruDecoder};
use super::projector::{project, Projector, ProjectorShape};
use super::tokenizer::CharTokenizer;
use super::{TrainConfig, TrainError};
use crate::embedding::EmbeddingVector;

const MAGIC: &[u8; 8] = b"VIOCCKPT";
const VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tokenizer_id: String,
    pub config_digest: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    projector: ProjectorShape,
    decoder: DecoderShape,
}

/// Trained projector and decoder.
///
/// On disk: the magic `VIOCCKPT`, a little-endian `u32` version, a `u64`
/// header length and a JSON header, then the projector weight and bias and
/// a `u64`-counted decoder parameter blob, all as little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCheckpoint {
    pub projector: Projector,
    pub decoder: GruDecoder,
    pub meta: CheckpointMeta,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.extend(values.iter().flat_map(|v| v.to_le_bytes()));
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.0.len() < n {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TrainError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl DecoderCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            projector: self.projector.shape(),
            decoder: self.decoder.shape(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_f32s(&mut out, self.projector.weight().as_slice().expect("standard layout"));
        put_f32s(&mut out, self.projector.bias().as_slice().expect("standard layout"));
        let blob = self.decoder.tensors().concat();
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        put_f32s(&mut out, &blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader(bytes);
        if r.take(8)? != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = usize::try_from(r.u64()?).map_err(|_| TrainError::Checkpoint("header too large".into()))?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("bad header: {e}")))?;
        if header.meta.tokenizer_id != CharTokenizer::ID {
            return Err(TrainError::Checkpoint(format!(
                "unknown tokenizer {:?}",
                header.meta.tokenizer_id
            )));
        }
        let ps = header.projector;
        let weight = r.f32s(ps.rows() * ps.embedding_dim)?;
        let bias = r.f32s(ps.rows())?;
        let projector = Projector::new(
            Array2::from_shape_vec((ps.rows(), ps.embedding_dim), weight)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?,
            Array1::from(bias),
            ps.prefix_len,
        )?;
        let blob_len = usize::try_from(r.u64()?).map_err(|_| TrainError::Checkpoint("blob too large".into()))?;
        let decoder = GruDecoder::from_flat(header.decoder, &r.f32s(blob_len)?)?;
        if !r.0.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", r.0.len())));
        }
        if decoder.shape().input_dim != ps.decoder_dim {
            return Err(TrainError::Checkpoint("projector and decoder widths differ".into()));
        }
        if decoder.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Checkpoint("non-finite decoder parameters".into()));
        }
        Ok(Self {
            projector,
            decoder,
            meta: header.meta,
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(name);
        let mut file = std::fs::File::create(&tmp).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector.shape().embedding_dim
    }

    /// Greedy text for an embedding from the shared space.
    pub fn decode(&self, embedding: &EmbeddingVector) -> Result<String, TrainError> {
        let prefix = project(embedding, &self.projector)?.mapv(|v| v as f32);
        let ids = self
            .decoder
            .greedy(&prefix, CharTokenizer::EOS, self.meta.train_config.max_decode_len);
        Ok(CharTokenizer.decode(&ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint() -> DecoderCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = TrainConfig {
            prefix_len: 2,
            decoder_dim: 3,
            hidden_dim: 4,
            ..TrainConfig::default()
        };
        DecoderCheckpoint {
            projector: Projector::random(
                ProjectorShape {
                    embedding_dim: 5,
                    prefix_len: 2,
                    decoder_dim: 3,
                },
                &mut rng,
            ),
            decoder: GruDecoder::random(
                DecoderShape {
                    vocab_size: CharTokenizer.vocab_size(),
                    input_dim: 3,
                    hidden_dim: 4,
                },
                &mut rng,
            ),
            meta: CheckpointMeta {
                tokenizer_id: CharTokenizer::ID.into(),
                config_digest: config.digest(),
                epoch: 7,
                val_loss: 0.123456789,
                train_config: config,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ckpt.save(&path).unwrap();
        let loaded = DecoderCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let e = EmbeddingVector::new(vec![0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
        assert_eq!(loaded.decode(&e).unwrap(), ckpt.decode(&e).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = checkpoint().to_bytes();
        assert!(DecoderCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DecoderCheckpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(DecoderCheckpoint::from_bytes(&extra).is_err());
    }
}
