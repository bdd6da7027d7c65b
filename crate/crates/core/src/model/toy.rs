//! Hand-specified models for tests and worked examples.

use std::collections::HashMap;

use super::{log_softmax, Conditional, LogProb, ModelError, Trainable, NEG_INF};
use crate::vocab::Token;

/// Every token equally likely, regardless of context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformModel {
    pub vocab_size: usize,
}

impl Conditional for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn conditional(&self, _context: &[Token]) -> Vec<LogProb> {
        vec![-(self.vocab_size as f64).ln(); self.vocab_size]
    }
}

/// Point mass on the successor of the last context token.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub vocab_size: usize,
    pub successor: HashMap<Token, Token>,
    /// Emitted after an empty context or a token with no successor.
    pub fallback: Token,
}

impl ChainModel {
    pub fn new(vocab_size: usize, links: &[(Token, Token)], fallback: Token) -> Self {
        ChainModel { vocab_size, successor: links.iter().copied().collect(), fallback }
    }
}

impl Conditional for ChainModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn conditional(&self, context: &[Token]) -> Vec<LogProb> {
        let next = context.last().and_then(|t| self.successor.get(t)).copied().unwrap_or(self.fallback);
        let mut lp = vec![NEG_INF; self.vocab_size];
        lp[next.index()] = 0.0;
        lp
    }
}

/// Distributions looked up by the longest matching context suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    pub vocab_size: usize,
    table: HashMap<Vec<Token>, Vec<LogProb>>,
    fallback: Vec<LogProb>,
}

impl TableModel {
    /// `fallback` applies when no suffix of the context is in the table.
    pub fn new(vocab_size: usize, fallback_probs: &[f64]) -> Self {
        TableModel { vocab_size, table: HashMap::new(), fallback: probs_to_logprobs(fallback_probs) }
    }

    /// Sets the next-token distribution after contexts ending in `suffix`.
    /// Probabilities are normalized; zeros become `NEG_INF`.
    pub fn set(&mut self, suffix: &[Token], probs: &[f64]) -> &mut Self {
        assert_eq!(probs.len(), self.vocab_size);
        self.table.insert(suffix.to_vec(), probs_to_logprobs(probs));
        self
    }

    /// Like [`TableModel::set`] but from unnormalized logits.
    pub fn set_logits(&mut self, suffix: &[Token], logits: &[f64]) -> &mut Self {
        assert_eq!(logits.len(), self.vocab_size);
        self.table.insert(suffix.to_vec(), log_softmax(logits));
        self
    }
}

fn probs_to_logprobs(probs: &[f64]) -> Vec<LogProb> {
    let total: f64 = probs.iter().sum();
    probs.iter().map(|&p| if p > 0.0 { (p / total).ln() } else { NEG_INF }).collect()
}

impl Conditional for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn conditional(&self, context: &[Token]) -> Vec<LogProb> {
        for k in (0..=context.len()).rev() {
            if let Some(lp) = self.table.get(&context[context.len() - k..]) {
                return lp.clone();
            }
        }
        self.fallback.clone()
    }
}

/// Two-token model with two parameters:
/// `logit(1) = θ0 + θ1·[last token is 1]`, `logit(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoParamModel {
    pub theta: [f64; 2],
}

impl TwoParamModel {
    fn p_one(&self, context: &[Token]) -> f64 {
        let z = self.theta[0] + if context.last() == Some(&Token(1)) { self.theta[1] } else { 0.0 };
        1.0 / (1.0 + (-z).exp())
    }
}

impl Conditional for TwoParamModel {
    fn vocab_size(&self) -> usize {
        2
    }

    fn conditional(&self, context: &[Token]) -> Vec<LogProb> {
        let z = self.theta[0] + if context.last() == Some(&Token(1)) { self.theta[1] } else { 0.0 };
        log_softmax(&[0.0, z])
    }
}

impl Trainable for TwoParamModel {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn target_nll(
        &self,
        context: &[Token],
        target: &[Token],
        mask: &[bool],
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64, ModelError> {
        let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut seq = context.to_vec();
        let mut loss = 0.0;
        let mut g = [0.0; 2];
        for (&t, &m) in target.iter().zip(mask) {
            if t.index() >= 2 {
                return Err(ModelError::TokenOutOfRange { token: t.0, vocab: 2 });
            }
            if m {
                let p1 = self.p_one(&seq);
                let lp = self.conditional(&seq);
                loss -= lp[t.index()];
                let dz = p1 - if t == Token(1) { 1.0 } else { 0.0 };
                let c = if seq.last() == Some(&Token(1)) { 1.0 } else { 0.0 };
                g[0] += dz;
                g[1] += dz * c;
            }
            seq.push(t);
        }
        if let Some((grad, scale)) = grad {
            grad[0] += scale * g[0] / n;
            grad[1] += scale * g[1] / n;
        }
        Ok(loss / n)
    }
}
