//! Hashed, signed character-trigram embedding of definition text.
//!
//! Text is lowercased and runs of whitespace collapse to one space (leading
//! and trailing whitespace dropped). Every window of three consecutive
//! characters is hashed with FNV-1a over its UTF-8 bytes; the hash modulo
//! `dim` picks a bucket and the top hash bit picks the sign. The count
//! vector is L2-normalized. Text with no trigrams, or whose counts cancel,
//! maps to the first basis vector.

use crate::hash::fnv1a64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values`; a zero vector becomes the first basis vector.
    pub fn from_values(mut values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty embedding");
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { values }
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[i] = 1.0;
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Dot product of two unit vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::Dimension(a.dim(), b.dim()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        TrigramEmbedder { dim: 128 }
    }
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        TrigramEmbedder { dim }
    }
}

pub fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl TextEmbedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let norm = normalize_text(text);
        let chars: Vec<char> = norm.chars().collect();
        let mut counts = vec![0.0; self.dim];
        let mut buf = String::new();
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a64(buf.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            counts[(h % self.dim as u64) as usize] += sign;
        }
        EmbeddingVector::from_values(counts)
    }
}
