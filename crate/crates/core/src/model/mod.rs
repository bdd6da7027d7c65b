//! Language-model contract shared by every other module.
//!
//! All probabilities are natural logs. Impossible events carry
//! [`NEG_INF`]. Models expose an incremental [`DecodeState`] so that search
//! code can fork a prefix and extend it without recomputing it.

mod checkpoint;
mod decode;
pub mod toy;
mod train;
mod transformer;

pub use checkpoint::{load_checkpoint, load_checkpoint_with_vocab, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use decode::{beam_decode, greedy_complete, sequence_logprob, stepwise_logprobs, Completion};
pub use train::{batch_objective, train_step, Adam, AdamConfig, StepOutcome, Trainable, WeightedExample};
pub use transformer::{Transformer, TransformerConfig};

use crate::vocab::Token;

pub type LogProb = f64;

/// Log-probability of an impossible event.
pub const NEG_INF: LogProb = f64::NEG_INFINITY;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("context of {len} tokens exceeds the maximum of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("non-finite loss {loss} for example {index}")]
    NonFiniteLoss { index: usize, loss: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
}

/// Prefix that has been consumed by a model, ready to report the
/// next-token distribution.
pub trait DecodeState<'a>: Send {
    /// Log-probabilities over the vocabulary for the next token.
    fn logprobs(&self) -> &[LogProb];
    /// Number of context tokens consumed so far.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn push(&mut self, token: Token) -> Result<(), ModelError>;
    fn fork(&self) -> Box<dyn DecodeState<'a> + 'a>;
}

/// Scored autoregressive sequence model.
///
/// Identical inputs must give bit-identical outputs, and every reported
/// distribution must be normalized.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Maximum number of context tokens (including any continuation being
    /// scored) the model accepts.
    fn max_context(&self) -> usize;

    fn start(&self, context: &[Token]) -> Result<Box<dyn DecodeState<'_> + '_>, ModelError>;

    fn next_token_logprobs(&self, context: &[Token]) -> Result<Vec<LogProb>, ModelError> {
        Ok(self.start(context)?.logprobs().to_vec())
    }
}

/// Models defined directly by a conditional distribution over contexts.
/// Every implementor is a [`LanguageModel`] that recomputes from scratch.
pub trait Conditional: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize {
        usize::MAX
    }
    fn conditional(&self, context: &[Token]) -> Vec<LogProb>;
}

struct RecomputeState<'a, M: Conditional + ?Sized> {
    model: &'a M,
    context: Vec<Token>,
    logprobs: Vec<LogProb>,
}

impl<'a, M: Conditional + ?Sized> DecodeState<'a> for RecomputeState<'a, M> {
    fn logprobs(&self) -> &[LogProb] {
        &self.logprobs
    }

    fn len(&self) -> usize {
        self.context.len()
    }

    fn push(&mut self, token: Token) -> Result<(), ModelError> {
        check_token(token, self.model.vocab_size())?;
        if self.context.len() + 1 > self.model.max_context() {
            return Err(ModelError::ContextTooLong { len: self.context.len() + 1, max: self.model.max_context() });
        }
        self.context.push(token);
        self.logprobs = self.model.conditional(&self.context);
        Ok(())
    }

    fn fork(&self) -> Box<dyn DecodeState<'a> + 'a> {
        Box::new(RecomputeState { model: self.model, context: self.context.clone(), logprobs: self.logprobs.clone() })
    }
}

impl<M: Conditional> LanguageModel for M {
    fn vocab_size(&self) -> usize {
        Conditional::vocab_size(self)
    }

    fn max_context(&self) -> usize {
        Conditional::max_context(self)
    }

    fn start(&self, context: &[Token]) -> Result<Box<dyn DecodeState<'_> + '_>, ModelError> {
        if context.len() > Conditional::max_context(self) {
            return Err(ModelError::ContextTooLong { len: context.len(), max: Conditional::max_context(self) });
        }
        for &t in context {
            check_token(t, Conditional::vocab_size(self))?;
        }
        Ok(Box::new(RecomputeState { model: self, context: context.to_vec(), logprobs: self.conditional(context) }))
    }
}

pub(crate) fn check_token(token: Token, vocab: usize) -> Result<(), ModelError> {
    if token.index() >= vocab {
        return Err(ModelError::TokenOutOfRange { token: token.0, vocab });
    }
    Ok(())
}

/// Serde adapter writing non-finite floats as the strings `"-inf"`,
/// `"inf"` and `"nan"`, which JSON cannot represent as numbers.
pub mod float_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// Normalizes raw scores into log-probabilities. `-inf` entries stay `-inf`.
pub fn log_softmax(logits: &[f64]) -> Vec<LogProb> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![NEG_INF; logits.len()];
    }
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest finite entries, descending, ties by index.
pub fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > NEG_INF).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
