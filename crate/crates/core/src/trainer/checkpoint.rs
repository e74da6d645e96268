use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NamedTensors;
use crate::decoder::{DecoderConfig, DecoderParams};
use crate::error::{FormatError, Result};
use crate::io::container::{decode_frame, encode_frame, Section};
use crate::io::{read_bytes, write_atomic, ClassEntry, ClassVocabulary};
use crate::linalg::Matrix;
use crate::losses::LossReport;
use crate::scalar::Scalar;

use super::config::TrainConfig;

/// Trained head plus everything needed to evaluate or resume it.
///
/// The alignment projections are the head's own `image_proj` and
/// `query_proj` tensors, so they travel inside `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub vocab: ClassVocabulary,
    pub params: DecoderParams<T>,
    pub final_loss: Option<LossReport>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn decoder(&self) -> &DecoderConfig {
        &self.config.decoder
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    vocabulary: Vec<ClassEntry>,
    final_loss: Option<LossReport>,
    tensors: Vec<TensorEntry>,
}

/// Tensors are stored as little-endian `f64`, so `f32` and `f64` heads both
/// round-trip exactly.
pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let tensors = ckpt.params.tensors();
    let mut payload = Vec::with_capacity(ckpt.params.parameter_count() * 8);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        });
        for v in m.as_slice() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        vocabulary: ckpt.vocab.entries().to_vec(),
        final_loss: ckpt.final_loss,
        tensors: entries,
    };
    encode_frame(Section::Checkpoint, &header, &payload)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, tensors) = decode_frame(bytes, Section::Checkpoint, |h: &CheckpointHeader, p| {
        let mut tensors = NamedTensors::new();
        for e in &h.tensors {
            let n = e
                .rows
                .checked_mul(e.cols)
                .ok_or_else(|| FormatError::Inconsistent(format!("tensor {} is too large", e.name)))?;
            let values = p.f64s(n)?.into_iter().map(T::of).collect();
            let m = Matrix::new(e.rows, e.cols, values).expect("reader returned rows * cols values");
            if tensors.insert(e.name.clone(), m).is_some() {
                return Err(FormatError::Inconsistent(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(tensors)
    })?;
    let vocab = ClassVocabulary::try_from(header.vocabulary)
        .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    let params = DecoderParams::from_tensors(&header.config.decoder, tensors)
        .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    Ok(Checkpoint {
        config: header.config,
        vocab,
        params,
        final_loss: header.final_loss,
    })
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_bytes(path)?)
}
