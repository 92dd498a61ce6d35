//! Sentence and path encoding.
//!
//! Tokens become `[word vector ; position vector]`, where the position
//! vector is one of three learned rows (head, tail, other). Path text and
//! relation labels go through an [`EmbeddingBackend`]: a lookup cache of
//! externally computed vectors with a deterministic hashed fallback.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_reasoner::SymbolicContext;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding cache has no records and no dimension was given")]
    EmptyCache,
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("dimension mismatch: {what} expects {expected}, got {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncodeError> = std::result::Result<T, E>;

/// Anything that maps text to a fixed-length vector.
pub trait Embedder {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Lowercase, then split on anything that is not alphanumeric.
pub fn tokenize(sentence: &str) -> Vec<String> {
    tokenize_with_offsets(sentence)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect()
}

/// Tokens with their half-open character ranges in the original text.
pub fn tokenize_with_offsets(sentence: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut count = 0;
    for (i, c) in sentence.chars().enumerate() {
        count = i + 1;
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push((std::mem::take(&mut current), start, i));
        }
    }
    if !current.is_empty() {
        out.push((current, start, count));
    }
    out
}

/// Half-open token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceInstance {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub head_cui: String,
    pub tail_cui: String,
    pub gold_relation: String,
}

impl SentenceInstance {
    pub fn new(
        tokens: Vec<String>,
        head_span: Span,
        tail_span: Span,
        head_cui: impl Into<String>,
        tail_cui: impl Into<String>,
        gold_relation: impl Into<String>,
    ) -> Result<Self> {
        let inst = SentenceInstance {
            tokens,
            head_span,
            tail_span,
            head_cui: head_cui.into(),
            tail_cui: tail_cui.into(),
            gold_relation: gold_relation.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(EncodeError::InvalidInstance("no tokens".into()));
        }
        for (name, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.start >= span.end || span.end > n {
                return Err(EncodeError::InvalidInstance(format!(
                    "{name} span {}..{} out of bounds for {n} tokens",
                    span.start, span.end
                )));
            }
        }
        if self.head_span.overlaps(&self.tail_span) {
            return Err(EncodeError::InvalidInstance("head and tail spans overlap".into()));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionCategory {
    Head = 0,
    Tail = 1,
    Other = 2,
}

pub fn position_category(t: usize, head: Span, tail: Span) -> PositionCategory {
    if head.contains(t) {
        PositionCategory::Head
    } else if tail.contains(t) {
        PositionCategory::Tail
    } else {
        PositionCategory::Other
    }
}

/// Three rows (head, tail, other), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionTable {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PositionTable {
    pub fn zeros(dim: usize) -> Self {
        PositionTable {
            dim,
            data: vec![0.0; 3 * dim],
        }
    }

    pub fn from_rows(rows: [&[f64]; 3]) -> Result<Self> {
        let dim = rows[0].len();
        for r in rows {
            if r.len() != dim {
                return Err(EncodeError::Shape {
                    what: "position table row",
                    expected: dim,
                    found: r.len(),
                });
            }
        }
        Ok(PositionTable {
            dim,
            data: rows.concat(),
        })
    }

    pub fn row(&self, cat: PositionCategory) -> &[f64] {
        let i = cat as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-token `[word ; position]` vectors for one oriented entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub vectors: Vec<Vec<f64>>,
    pub head_span: Span,
    pub tail_span: Span,
}

impl EncodedSentence {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Token-mean of the encoded vectors.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for v in &self.vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = self.vectors.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Encode `instance` with the head as source and the tail as destination.
pub fn encode_sentence(
    instance: &SentenceInstance,
    words: &dyn Embedder,
    positions: &PositionTable,
) -> EncodedSentence {
    encode_oriented(
        &instance.tokens,
        instance.head_span,
        instance.tail_span,
        words,
        positions,
    )
}

/// Encode tokens with `source`/`dest` spans taking the head/tail roles.
pub fn encode_oriented(
    tokens: &[String],
    source: Span,
    dest: Span,
    words: &dyn Embedder,
    positions: &PositionTable,
) -> EncodedSentence {
    let vectors = tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            let mut v = words.embed(tok);
            v.extend_from_slice(positions.row(position_category(t, source, dest)));
            v
        })
        .collect();
    EncodedSentence {
        vectors,
        head_span: source,
        tail_span: dest,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathPooling {
    #[default]
    Sum,
    Mean,
}

/// `[Σ enc(plain path text) ; Σ enc(axiom path text)]`, length `2·dim`.
pub fn encode_symbolic(
    context: &SymbolicContext,
    backend: &dyn Embedder,
    pooling: PathPooling,
) -> Vec<f64> {
    let dim = backend.dimension();
    let mut out = vec![0.0; 2 * dim];
    for (block, paths) in [&context.plain_paths, &context.axiom_paths].into_iter().enumerate() {
        let slot = &mut out[block * dim..(block + 1) * dim];
        for p in paths {
            for (o, x) in slot.iter_mut().zip(backend.embed(&p.verbalize())) {
                *o += x;
            }
        }
        if pooling == PathPooling::Mean && !paths.is_empty() {
            let n = paths.len() as f64;
            slot.iter_mut().for_each(|o| *o /= n);
        }
    }
    out
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn add_feature(v: &mut [f64], feature: &str) {
    let h = fnv1a(feature.as_bytes());
    let bucket = (h % v.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    v[bucket] += sign;
}

/// Signed feature hashing of word unigrams and padded character trigrams,
/// scaled to unit length.
pub fn hashed_embed(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut v = vec![0.0; dim];
    let mut any = false;
    for word in text.split_whitespace() {
        any = true;
        add_feature(&mut v, &format!("w:{word}"));
        let padded: Vec<char> = format!("<{word}>").chars().collect();
        for gram in padded.windows(3) {
            add_feature(&mut v, &gram.iter().collect::<String>());
        }
    }
    if !any {
        add_feature(&mut v, "<>");
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let bucket = (fnv1a(text.as_bytes()) % dim as u64) as usize;
        v[bucket] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendSource {
    Cache,
    Hashed,
}

/// Text embedder backed by a lookup cache, falling back to [`hashed_embed`].
#[derive(Debug, Clone)]
pub struct EmbeddingBackend {
    dim: usize,
    source: BackendSource,
    cache: HashMap<String, Vec<f64>>,
}

impl EmbeddingBackend {
    pub fn hashed(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        EmbeddingBackend {
            dim,
            source: BackendSource::Hashed,
            cache: HashMap::new(),
        }
    }

    pub fn source(&self) -> BackendSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.cache.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.cache.keys().map(String::as_str)
    }
}

impl Embedder for EmbeddingBackend {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        match self.cache.get(text) {
            Some(v) => v.clone(),
            None => hashed_embed(text, self.dim),
        }
    }
}

/// Read `key<TAB>v1 v2 ... vD` records (GloVe-style `key v1 ... vD` is also
/// accepted). Every record must have the same dimension; when
/// `expected_dim` is given it must match too.
pub fn load_embedding_cache<R: Read>(
    source: R,
    expected_dim: Option<usize>,
) -> Result<EmbeddingBackend> {
    let mut cache = HashMap::new();
    let mut dim = expected_dim;
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (key, values) = match line.split_once('\t') {
            Some(kv) => kv,
            None => line.split_once(' ').ok_or_else(|| EncodeError::Malformed {
                line: line_no,
                message: "expected `key<TAB>values`".into(),
            })?,
        };
        let vector = values
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| EncodeError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if vector.is_empty() {
            return Err(EncodeError::Malformed {
                line: line_no,
                message: "record has no values".into(),
            });
        }
        if let Some(v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(EncodeError::Malformed {
                line: line_no,
                message: format!("non-finite value {v}"),
            });
        }
        match dim {
            Some(d) if d != vector.len() => {
                return Err(EncodeError::DimensionMismatch {
                    line: line_no,
                    expected: d,
                    found: vector.len(),
                })
            }
            Some(_) => {}
            None => dim = Some(vector.len()),
        }
        cache.insert(key.to_string(), vector);
    }
    let dim = dim.ok_or(EncodeError::EmptyCache)?;
    Ok(EmbeddingBackend {
        dim,
        source: BackendSource::Cache,
        cache,
    })
}
