//! Text-embedding sources for rendered prompts.

use crate::error::{Error, Result};
use crate::io::vocab::ClassVocabulary;
use crate::linalg::Matrix;
use crate::prompt::RenderedPrompt;
use crate::scalar::Scalar;

/// Maps a rendered prompt to a text embedding.
pub trait TextEncoder<T: Scalar> {
    fn dim(&self) -> usize;

    fn encode(&self, prompt: &RenderedPrompt) -> Result<Vec<T>>;
}

/// Encodes a prompt as the L2-normalized mean of the per-class embeddings of
/// its source labels.
///
/// This emulates a contrastive text encoder on synthetic data: a multi-label
/// prompt lands near the centroid of its classes. Labels missing from the
/// bank are an error, which keeps classes outside the bank (for example,
/// unseen classes during training) from leaking in.
#[derive(Debug, Clone)]
pub struct BankTextEncoder<'a, T> {
    vocab: &'a ClassVocabulary,
    embeddings: &'a Matrix<T>,
    rows: Vec<usize>,
}

impl<'a, T: Scalar> BankTextEncoder<'a, T> {
    /// `rows[i]` is the embedding row of `vocab` class `classes[i]`; only
    /// those classes can be encoded.
    pub fn new(vocab: &'a ClassVocabulary, embeddings: &'a Matrix<T>, classes: &[usize]) -> Result<Self> {
        if embeddings.rows() != classes.len() {
            return Err(Error::Argument(format!(
                "{} embedding rows for {} classes",
                embeddings.rows(),
                classes.len()
            )));
        }
        let mut rows = vec![usize::MAX; vocab.len()];
        for (row, &c) in classes.iter().enumerate() {
            if c >= vocab.len() {
                return Err(Error::Argument(format!("class {c} outside vocabulary")));
            }
            rows[c] = row;
        }
        Ok(Self { vocab, embeddings, rows })
    }
}

impl<T: Scalar> TextEncoder<T> for BankTextEncoder<'_, T> {
    fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn encode(&self, prompt: &RenderedPrompt) -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); self.dim()];
        for label in &prompt.labels {
            let class = self
                .vocab
                .index_of(label)
                .filter(|&c| self.rows[c] != usize::MAX)
                .ok_or_else(|| Error::Protocol(format!("label {label:?} is not available to the text encoder")))?;
            for (a, &v) in acc.iter_mut().zip(self.embeddings.row(self.rows[class])) {
                *a = *a + v;
            }
        }
        let norm = acc.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::of(1e-12) {
            for a in acc.iter_mut() {
                *a = *a / norm;
            }
        }
        Ok(acc)
    }
}
