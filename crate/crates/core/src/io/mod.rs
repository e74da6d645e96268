//! Embedding containers, class vocabularies and the synthetic stand-in for
//! the text and image encoders.

pub mod container;
pub mod encoder;
pub mod synth;
pub mod vocab;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use container::{read_query_bank, read_samples, write_query_bank, write_samples};
pub use encoder::{BankTextEncoder, TextEncoder};
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticDataset};
pub use vocab::{split_seen_unseen, ClassEntry, ClassVocabulary};

/// One image: its spatial tokens (`N x d_in`) and its sorted, distinct label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T> {
    pub tokens: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn new(tokens: Matrix<T>, mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self { tokens, labels }
    }
}

/// Records sharing a vocabulary and token shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    pub vocab: ClassVocabulary,
    pub records: Vec<SampleRecord<T>>,
    pub synth: Option<SynthConfig>,
}

impl<T: Scalar> SampleSet<T> {
    /// `(tokens per image, token dim)`, or `None` for an empty set.
    pub fn token_shape(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| r.tokens.shape())
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.token_shape();
        for (i, r) in self.records.iter().enumerate() {
            let (n, d) = r.tokens.shape();
            if n == 0 || d == 0 {
                return Err(Error::Argument(format!("record {i} has an empty token matrix")));
            }
            if Some(r.tokens.shape()) != shape {
                return Err(Error::dim("sample set", shape.unwrap_or_default(), r.tokens.shape()));
            }
            if let Some(&bad) = r.labels.iter().find(|&&l| l >= self.vocab.len()) {
                return Err(Error::Argument(format!(
                    "record {i} label {bad} out of range for {} classes",
                    self.vocab.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Synthetic,
}

/// Per-class text embeddings (`C x d_text`), one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBankSource<T> {
    pub vocab: ClassVocabulary,
    pub embeddings: Matrix<T>,
    pub provenance: Provenance,
    pub synth: Option<SynthConfig>,
}

impl<T: Scalar> QueryBankSource<T> {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.rows() != self.vocab.len() {
            return Err(Error::Argument(format!(
                "query bank has {} rows for {} classes",
                self.embeddings.rows(),
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Rows for the given vocabulary indices.
    pub fn rows_for(&self, classes: &[usize]) -> Result<Matrix<T>> {
        self.embeddings.select_rows(classes)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
