use std::collections::BTreeMap;

use thiserror::Error;

use super::{BackendError, Usage};

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// Unit-length vectors, in input order.
    pub vectors: Vec<Vec<f64>>,
    pub usage: Usage,
}

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("text {0} in the batch is empty")]
    EmptyText(usize),
    #[error("embedding backend returned {got} vectors for {expected} texts")]
    Shape { expected: usize, got: usize },
    #[error("embedding {0} has zero norm")]
    ZeroVector(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Dot product; equals cosine similarity for unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw vectors as produced by the model, not necessarily normalized.
    fn embed_raw(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, Usage), BackendError>;

    fn embed(&self, texts: &[String]) -> Result<Embeddings, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText(i));
        }
        let (raw, usage) = self.embed_raw(texts)?;
        if raw.len() != texts.len() {
            return Err(EmbedError::Shape {
                expected: texts.len(),
                got: raw.len(),
            });
        }
        let vectors = raw
            .iter()
            .enumerate()
            .map(|(i, v)| normalize(v).ok_or(EmbedError::ZeroVector(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Embeddings { vectors, usage })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Local, dependency-free embedder: signed feature hashing of lowercase word
/// unigrams and bigrams. Deterministic across runs and platforms.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dims: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dims: 512 }
    }
}

impl HashingEmbedder {
    pub fn new(dims: usize) -> Self {
        Self { dims: dims.max(8) }
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dims];
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let idx = (h % self.dims as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign * weight;
        };
        for t in &tokens {
            add(t, 1.0);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if tokens.is_empty() {
            add(text, 1.0);
        }
        v
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn embed_raw(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, Usage), BackendError> {
        let tokens: u64 = texts.iter().map(|t| super::estimate_tokens(t) as u64).sum();
        Ok((
            texts.iter().map(|t| self.vector(t)).collect(),
            Usage::new(tokens, 0),
        ))
    }
}

/// Fixed text → vector table, for tests and calibrated fixtures. Unknown texts
/// go to the fallback embedder when one is configured and fail otherwise.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    table: BTreeMap<String, Vec<f64>>,
    fallback: Option<HashingEmbedder>,
}

impl TableEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: HashingEmbedder) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn insert(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.table.insert(text.into(), vector);
        self
    }
}

impl EmbeddingBackend for TableEmbedder {
    fn name(&self) -> &str {
        "table"
    }

    fn embed_raw(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, Usage), BackendError> {
        texts
            .iter()
            .map(|t| match (self.table.get(t), &self.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(fb)) => Ok(fb.vector(t)),
                (None, None) => Err(BackendError::Rejected(format!("no embedding for {t:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| (v, Usage::default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_batch_rejected() {
        assert_eq!(HashingEmbedder::default().embed(&[]), Err(EmbedError::EmptyBatch));
    }

    #[test]
    fn identical_inputs_identical_vectors() {
        let e = HashingEmbedder::default();
        let out = e
            .embed(&["load adapter weights".into(), "load adapter weights".into()])
            .unwrap();
        assert_eq!(out.vectors[0], out.vectors[1]);
    }

    #[test]
    fn related_texts_score_higher() {
        let e = HashingEmbedder::default();
        let out = e
            .embed(&[
                "web ui for training large language models".into(),
                "training ui for language models".into(),
                "kubernetes autoscaling router".into(),
            ])
            .unwrap();
        assert!(cosine(&out.vectors[0], &out.vectors[1]) > cosine(&out.vectors[0], &out.vectors[2]));
    }

    proptest! {
        #[test]
        fn unit_norm(text in "[a-z ]{1,80}[a-z]") {
            let out = HashingEmbedder::default().embed(&[text]).unwrap();
            let norm: f64 = out.vectors[0].iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
