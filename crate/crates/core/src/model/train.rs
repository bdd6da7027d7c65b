use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelError};
use crate::vocab::Token;

/// One term of a signed training objective.
///
/// The loss is the mean negative log-likelihood of the target tokens whose
/// `mask` entry is true, conditioned on `context`. Context tokens never
/// contribute. A negative weight turns descent on the objective into ascent
/// on this example's loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub context: Vec<Token>,
    pub target: Vec<Token>,
    pub mask: Vec<bool>,
    pub weight: f64,
}

impl WeightedExample {
    /// Example whose loss covers every target token.
    pub fn new(context: Vec<Token>, target: Vec<Token>, weight: f64) -> Self {
        let mask = vec![true; target.len()];
        WeightedExample { context, target, mask, weight }
    }

    pub fn with_mask(context: Vec<Token>, target: Vec<Token>, mask: Vec<bool>, weight: f64) -> Self {
        WeightedExample { context, target, mask, weight }
    }

    pub(crate) fn validate(&self, index: usize) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::InvalidExample { index, reason: reason.to_string() };
        if self.target.is_empty() {
            return Err(invalid("empty target"));
        }
        if self.mask.len() != self.target.len() {
            return Err(invalid("mask length differs from target length"));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(invalid("mask selects no target token"));
        }
        if !self.weight.is_finite() || self.weight == 0.0 {
            return Err(invalid("weight must be finite and nonzero"));
        }
        Ok(())
    }
}

/// A model whose parameters can be differentiated and updated.
pub trait Trainable: LanguageModel + Clone {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Mean NLL over the masked target tokens. When `grad` is given,
    /// `scale * d(loss)/d(params)` is added into it.
    fn target_nll(
        &self,
        context: &[Token],
        target: &[Token],
        mask: &[bool],
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64, ModelError>;
}

/// `(1/B) Σ_i weight_i · NLL_i`, its gradient, and the per-example losses.
pub fn batch_objective<M: Trainable>(
    model: &M,
    batch: &[WeightedExample],
) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for (i, ex) in batch.iter().enumerate() {
        ex.validate(i)?;
    }
    let n = model.params().len();
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>), ModelError>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![0.0; n];
            let loss = model.target_nll(&ex.context, &ex.target, &ex.mask, Some((&mut g, ex.weight * scale)))?;
            Ok((loss, g))
        })
        .collect();

    let mut grad = vec![0.0; n];
    let mut losses = Vec::with_capacity(batch.len());
    let mut objective = 0.0;
    for (i, part) in parts.into_iter().enumerate() {
        let (loss, g) = part?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { index: i, loss });
        }
        objective += batch[i].weight * scale * loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        losses.push(loss);
    }
    Ok((objective, grad, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self::with_config(n_params, AdamConfig::default())
    }

    pub fn with_config(n_params: usize, config: AdamConfig) -> Self {
        Adam { config, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different model");
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Objective before the update.
    pub objective: f64,
    /// Per-example mean NLL before the update.
    pub losses: Vec<f64>,
}

/// One Adam step minimizing `Σ weight · NLL` over `batch`.
///
/// On any error, including a non-finite loss, parameters are untouched.
pub fn train_step<M: Trainable>(
    model: &mut M,
    optimizer: &mut Adam,
    batch: &[WeightedExample],
    learning_rate: f64,
) -> Result<StepOutcome, ModelError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(ModelError::InvalidLearningRate(learning_rate));
    }
    let (objective, grad, losses) = batch_objective(model, batch)?;
    if let Some((index, &g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(ModelError::NonFiniteLoss { index, loss: g });
    }
    optimizer.update(model.params_mut(), &grad, learning_rate);
    Ok(StepOutcome { objective, losses })
}
