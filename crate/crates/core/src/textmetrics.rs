//! Word-level text metrics: tokenization, exact match, the context overlap
//! ratio (COR) and embedding-based semantic similarity.
//!
//! All metric functions are pure. The default [`TfIdfEmbedder`] is fitted
//! once and is immutable afterwards, so it can be shared across threads.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Canonical textual rendering of an unanswerable prediction.
pub const NONE_ANSWER: &str = "None";

/// Lowercased alphanumeric tokens of a text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenList {
    tokens: Vec<String>,
}

impl TokenList {
    pub fn as_slice(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_vec(self) -> Vec<String> {
        self.tokens
    }

    /// True when the tokens are exactly the unanswerable marker `none`.
    pub fn is_none_marker(&self) -> bool {
        self.tokens.len() == 1 && self.tokens[0] == "none"
    }
}

/// Lowercases and splits into maximal runs of letters/digits. Everything
/// else is a separator and never produces a token.
pub fn tokenize(text: &str) -> TokenList {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenList { tokens }
}

/// Size of the multiset intersection of two token sequences.
pub fn multiset_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

fn cor_tokens(gold: &[String], pred: &[String]) -> f64 {
    match (gold.is_empty(), pred.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => multiset_overlap(gold, pred) as f64 / gold.len().max(pred.len()) as f64,
    }
}

/// Context overlap ratio `|a ∩ â| / max(|a|, |â|)` at the word level.
///
/// Both empty scores 1, exactly one empty scores 0.
pub fn cor(gold: &str, pred: &str) -> f64 {
    cor_tokens(tokenize(gold).as_slice(), tokenize(pred).as_slice())
}

/// COR against a list of alternative gold answers (best alternative wins).
///
/// An empty gold list is the unanswerable case: a prediction of `None`
/// (or nothing at all) is treated as empty and scores 1.
pub fn cor_multi(golds: &[String], pred: &str) -> f64 {
    let pred_tokens = tokenize(pred);
    if golds.is_empty() {
        let pred_empty = pred_tokens.is_empty() || pred_tokens.is_none_marker();
        return if pred_empty { 1.0 } else { 0.0 };
    }
    golds
        .iter()
        .map(|g| cor_tokens(tokenize(g).as_slice(), pred_tokens.as_slice()))
        .fold(0.0, f64::max)
}

/// Exact match after normalization (tokenize, then compare sequences).
///
/// With no gold answers only a `None` (or empty) prediction matches.
pub fn exact_match(golds: &[String], pred: &str) -> bool {
    let pred_tokens = tokenize(pred);
    if golds.is_empty() {
        return pred_tokens.is_empty() || pred_tokens.is_none_marker();
    }
    golds.iter().any(|g| tokenize(g) == pred_tokens)
}

/// Error raised by embedders that can fail (remote services).
#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Backend(String),
    #[error("embedding dimension changed from {expected} to {actual}")]
    DimensionDrift { expected: usize, actual: usize },
    #[error("cannot embed empty text")]
    EmptyText,
}

/// Text → fixed-length real vector.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Outcome of a similarity computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either side embedded to the zero vector.
    pub degenerate: bool,
}

/// Cosine similarity clamped to `[0, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Similarity {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: (dot / (na * nb)).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// Semantic similarity of two texts under an embedder.
pub fn semsim(a: &str, b: &str, embedder: &dyn Embedder) -> Result<Similarity, EmbedError> {
    let va = embedder.embed(a)?;
    let vb = embedder.embed(b)?;
    Ok(cosine(&va, &vb))
}

/// Sparse term-frequency × inverse-document-frequency embedder fitted on a
/// reference collection. Terms outside the reference vocabulary are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfEmbedder {
    id: String,
    /// Sorted vocabulary; position is the vector dimension.
    vocabulary: Vec<String>,
    idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TfIdfEmbedder {
    /// Fits on `reference`. Smoothed idf `ln((1 + N) / (1 + df)) + 1` keeps
    /// every weight strictly positive.
    pub fn fit<S: AsRef<str>>(reference: &[S]) -> Self {
        let n_docs = reference.len();
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in reference {
            let mut seen: Vec<String> = tokenize(doc.as_ref()).into_vec();
            seen.sort();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let vocabulary: Vec<String> = df.keys().cloned().collect();
        let idf = df
            .values()
            .map(|&d| ((1.0 + n_docs as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let mut embedder = Self {
            id: format!("tfidf-{}", vocabulary.len()),
            vocabulary,
            idf,
            index: HashMap::new(),
        };
        embedder.rebuild_index();
        embedder
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Restores the lookup index after deserialization.
    pub fn restore(mut self) -> Self {
        self.rebuild_index();
        self
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for t in tokenize(text).as_slice() {
            if let Some(&i) = self.index.get(t) {
                v[i] += 1.0;
            }
        }
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        v
    }
}

impl Embedder for TfIdfEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.vector(text))
    }
}

/// Fits the deterministic default embedder used for rewards and reports.
pub fn fit_default_embedder<S: AsRef<str>>(reference: &[S]) -> TfIdfEmbedder {
    TfIdfEmbedder::fit(reference)
}
