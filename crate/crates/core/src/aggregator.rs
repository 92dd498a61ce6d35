//! Path-to-label similarity bias, softmax and negative log-likelihood.
//!
//! The path text of a pair is embedded once and compared against every
//! relation label embedding. The resulting bias vector is added to the
//! network logits before the softmax. With no path the bias is all zero.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Embedder;
use crate::path_reasoner::{split_words, SymbolicContext};

/// Probability floor used by [`loss`].
pub const PROBABILITY_FLOOR: f64 = 1e-12;

static CLAMPED_LOSSES: AtomicU64 = AtomicU64::new(0);

/// How many losses have hit [`PROBABILITY_FLOOR`] in this process.
pub fn clamp_count() -> u64 {
    CLAMPED_LOSSES.load(Ordering::Relaxed)
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("relation vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate relation label `{0}`")]
    DuplicateLabel(String),
    #[error("length mismatch: {left} logits vs {right} bias entries")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("gold index {gold} outside {len} relations")]
    GoldOutOfRange { gold: usize, len: usize },
}

pub type Result<T, E = AggregateError> = std::result::Result<T, E>;

/// Ordered relation labels with their encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationVocabulary {
    labels: Vec<String>,
    encodings: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl RelationVocabulary {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// Row `i` of the encoded label matrix.
    pub fn encoding(&self, i: usize) -> &[f64] {
        &self.encodings[i]
    }

    /// Build from pre-computed label encodings.
    pub fn from_encodings(labels: Vec<String>, encodings: Vec<Vec<f64>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(AggregateError::EmptyVocabulary);
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(AggregateError::DuplicateLabel(l.clone()));
            }
        }
        Ok(RelationVocabulary {
            labels,
            encodings,
            index,
        })
    }
}

/// Text a relation label is embedded as: `hasTradename` → `has tradename`.
pub fn verbalize_relation(label: &str) -> String {
    split_words(label)
}

pub fn encode_relations(labels: &[String], backend: &dyn Embedder) -> Result<RelationVocabulary> {
    let encodings = labels
        .iter()
        .map(|l| backend.embed(&verbalize_relation(l)))
        .collect();
    RelationVocabulary::from_encodings(labels.to_vec(), encodings)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// `λ·max_sim` on the most similar relation, zero elsewhere.
    #[default]
    OneHot,
    /// `λ·sim_r` on every relation.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasResult {
    pub bias: Vec<f64>,
    pub best_relation: Option<usize>,
    pub best_similarity: f64,
    pub mode: BiasMode,
    pub weight: f64,
}

impl BiasResult {
    pub fn zero(len: usize, mode: BiasMode, weight: f64) -> Self {
        BiasResult {
            bias: vec![0.0; len],
            best_relation: None,
            best_similarity: 0.0,
            mode,
            weight,
        }
    }
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Bias for an already encoded path text.
pub fn bias_from_encoding(
    vocab: &RelationVocabulary,
    path_encoding: &[f64],
    mode: BiasMode,
    weight: f64,
) -> BiasResult {
    let sims: Vec<f64> = vocab
        .encodings
        .iter()
        .map(|r| cosine(r, path_encoding))
        .collect();
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    let bias = match mode {
        BiasMode::OneHot => {
            let mut b = vec![0.0; sims.len()];
            b[best] = weight * sims[best];
            b
        }
        BiasMode::Full => sims.iter().map(|s| weight * s).collect(),
    };
    BiasResult {
        bias,
        best_relation: Some(best),
        best_similarity: sims[best],
        mode,
        weight,
    }
}

/// Compare the joined path text of `context` with every relation label.
pub fn bias_score(
    vocab: &RelationVocabulary,
    context: &SymbolicContext,
    backend: &dyn Embedder,
    mode: BiasMode,
    weight: f64,
) -> BiasResult {
    if context.is_empty() {
        return BiasResult::zero(vocab.len(), mode, weight);
    }
    let penc = backend.embed(&context.joined_verbalization());
    bias_from_encoding(vocab, &penc, mode, weight)
}

/// `softmax(logits + bias)` with max-subtraction.
pub fn predict(logits: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != bias.len() {
        return Err(AggregateError::LengthMismatch {
            left: logits.len(),
            right: bias.len(),
        });
    }
    let scores: Vec<f64> = logits.iter().zip(bias).map(|(l, b)| l + b).collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AggregateError::NonFinite(i));
    }
    Ok(softmax(&scores))
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln p[gold]`, with the probability floored at [`PROBABILITY_FLOOR`].
pub fn loss(probabilities: &[f64], gold: usize) -> Result<f64> {
    let p = *probabilities
        .get(gold)
        .ok_or(AggregateError::GoldOutOfRange {
            gold,
            len: probabilities.len(),
        })?;
    if p < PROBABILITY_FLOOR {
        CLAMPED_LOSSES.fetch_add(1, Ordering::Relaxed);
        log::warn!("gold probability {p:e} clamped to {PROBABILITY_FLOOR:e}");
        return Ok(-PROBABILITY_FLOOR.ln());
    }
    Ok(-p.ln())
}

/// Sum of per-instance losses over a corpus.
pub fn batch_loss<'a>(items: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<f64> {
    items.into_iter().map(|(p, g)| loss(p, g)).sum()
}
