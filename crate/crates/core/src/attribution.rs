//! Gradient-based training-data attribution.
//!
//! A document is scored against a query by comparing the gradient of the
//! document's training loss with the gradient of the query's target loss,
//! both taken at the current parameters over every trainable parameter, in
//! the model's flat parameter order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, Trainable};
use crate::vocab::{Token, Vocab};

/// Gradient norms at or below this are treated as zero.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_instance: Option<String>,
}

impl EvidenceDoc {
    /// Training target for the document: its tokens followed by EOS, with
    /// an empty context, as in pretraining.
    pub fn target(&self, vocab: &Vocab) -> Vec<Token> {
        let mut t = vocab.tokenize(&self.text);
        t.push(Token::EOS);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributionMethod {
    #[serde(rename = "grad-dot")]
    GradDot,
    #[serde(rename = "grad-cos")]
    GradCos,
    #[serde(rename = "hif")]
    Hif,
    #[serde(rename = "untrac")]
    UnTrac,
    #[serde(rename = "untrac-inv")]
    UnTracInv,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 5] = [Self::GradDot, Self::GradCos, Self::Hif, Self::UnTrac, Self::UnTracInv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GradDot => "grad-dot",
            Self::GradCos => "grad-cos",
            Self::Hif => "hif",
            Self::UnTrac => "untrac",
            Self::UnTracInv => "untrac-inv",
        }
    }

    pub fn is_implemented(self) -> bool {
        matches!(self, Self::GradDot | Self::GradCos)
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown method: {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub doc_id: String,
    pub method: AttributionMethod,
    pub value: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("empty target")]
    EmptyTarget,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("gradient norm {0} is too small for a cosine")]
    DegenerateGradient(f64),
    #[error("empty pool")]
    EmptyPool,
    #[error("method not implemented: {0}")]
    NotImplemented(AttributionMethod),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scoring rule for a pair of per-example gradients. Methods beyond
/// Grad-Dot and Grad-Cos plug in here.
pub trait GradientScorer: Sync {
    fn method(&self) -> AttributionMethod;
    fn score(&self, doc_grad: &[f64], query_grad: &[f64]) -> Result<f64, AttributionError>;
}

pub struct GradDot;
pub struct GradCos;

impl GradientScorer for GradDot {
    fn method(&self) -> AttributionMethod {
        AttributionMethod::GradDot
    }

    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64, AttributionError> {
        Ok(dot(a, b))
    }
}

impl GradientScorer for GradCos {
    fn method(&self) -> AttributionMethod {
        AttributionMethod::GradCos
    }

    fn score(&self, a: &[f64], b: &[f64]) -> Result<f64, AttributionError> {
        cosine(a, b)
    }
}

pub fn scorer(method: AttributionMethod) -> Result<Box<dyn GradientScorer>, AttributionError> {
    match method {
        AttributionMethod::GradDot => Ok(Box::new(GradDot)),
        AttributionMethod::GradCos => Ok(Box::new(GradCos)),
        other => Err(AttributionError::NotImplemented(other)),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, AttributionError> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    for n in [na, nb] {
        if n <= MIN_GRAD_NORM {
            return Err(AttributionError::DegenerateGradient(n));
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of the mean target-token NLL with respect to all parameters.
pub fn example_gradient<M: Trainable>(model: &M, context: &[Token], target: &[Token]) -> Result<Vec<f64>, AttributionError> {
    if target.is_empty() {
        return Err(AttributionError::EmptyTarget);
    }
    let mut g = vec![0.0; model.params().len()];
    let mask = vec![true; target.len()];
    let loss = model.target_nll(context, target, &mask, Some((&mut g, 1.0)))?;
    if !loss.is_finite() {
        return Err(AttributionError::NonFiniteLoss(loss));
    }
    if let Some(v) = g.iter().find(|v| !v.is_finite()) {
        return Err(AttributionError::NonFiniteLoss(*v));
    }
    Ok(g)
}

/// Query for attribution: a context and the target whose loss is explained.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub context: &'a [Token],
    pub target: &'a [Token],
}

pub fn grad_dot<M: Trainable>(model: &M, vocab: &Vocab, doc: &EvidenceDoc, query: Query<'_>) -> Result<AttributionScore, AttributionError> {
    score_doc(model, vocab, doc, query, &GradDot)
}

pub fn grad_cos<M: Trainable>(model: &M, vocab: &Vocab, doc: &EvidenceDoc, query: Query<'_>) -> Result<AttributionScore, AttributionError> {
    score_doc(model, vocab, doc, query, &GradCos)
}

fn score_doc<M: Trainable>(
    model: &M,
    vocab: &Vocab,
    doc: &EvidenceDoc,
    query: Query<'_>,
    scorer: &dyn GradientScorer,
) -> Result<AttributionScore, AttributionError> {
    let q = example_gradient(model, query.context, query.target)?;
    let d = example_gradient(model, &[], &doc.target(vocab))?;
    Ok(AttributionScore { doc_id: doc.id.clone(), method: scorer.method(), value: scorer.score(&d, &q)? })
}

/// Scores every pool document and returns the `top_k` best, highest first,
/// ties by document id.
pub fn rank_pool<M: Trainable>(
    model: &M,
    vocab: &Vocab,
    pool: &[EvidenceDoc],
    query: Query<'_>,
    method: AttributionMethod,
    top_k: usize,
) -> Result<Vec<AttributionScore>, AttributionError> {
    let scorer = scorer(method)?;
    if pool.is_empty() {
        return Err(AttributionError::EmptyPool);
    }
    let q = example_gradient(model, query.context, query.target)?;
    let mut scores = pool
        .par_iter()
        .map(|doc| {
            let d = example_gradient(model, &[], &doc.target(vocab))?;
            Ok(AttributionScore { doc_id: doc.id.clone(), method, value: scorer.score(&d, &q)? })
        })
        .collect::<Result<Vec<_>, AttributionError>>()?;
    scores.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.doc_id.cmp(&b.doc_id)));
    scores.truncate(top_k);
    Ok(scores)
}

/// [`rank_pool`] for many queries at once. Query gradients are computed
/// up front and each document gradient once, so the pool is streamed
/// rather than held in memory. `result[i]` ranks the pool for `queries[i]`.
pub fn rank_pool_many<M: Trainable>(
    model: &M,
    vocab: &Vocab,
    pool: &[EvidenceDoc],
    queries: &[Query<'_>],
    method: AttributionMethod,
    top_k: usize,
) -> Result<Vec<Vec<AttributionScore>>, AttributionError> {
    let scorer = scorer(method)?;
    if pool.is_empty() {
        return Err(AttributionError::EmptyPool);
    }
    let q_grads = queries
        .par_iter()
        .map(|q| example_gradient(model, q.context, q.target))
        .collect::<Result<Vec<_>, AttributionError>>()?;
    let per_doc = pool
        .par_iter()
        .map(|doc| {
            let d = example_gradient(model, &[], &doc.target(vocab))?;
            q_grads.iter().map(|q| scorer.score(&d, q)).collect::<Result<Vec<f64>, AttributionError>>()
        })
        .collect::<Result<Vec<_>, AttributionError>>()?;
    Ok((0..queries.len())
        .map(|qi| {
            let mut scores: Vec<AttributionScore> = pool
                .iter()
                .zip(&per_doc)
                .map(|(doc, v)| AttributionScore { doc_id: doc.id.clone(), method, value: v[qi] })
                .collect();
            scores.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.doc_id.cmp(&b.doc_id)));
            scores.truncate(top_k);
            scores
        })
        .collect())
}

/// Tab-separated `query_id doc_id method value`, one score per line.
pub fn write_scores<W: Write>(mut w: W, query_id: &str, scores: &[AttributionScore]) -> std::io::Result<()> {
    for s in scores {
        writeln!(w, "{query_id}\t{}\t{}\t{:.17e}", s.doc_id, s.method, s.value)?;
    }
    Ok(())
}
