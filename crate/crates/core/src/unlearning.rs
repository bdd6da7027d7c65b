//! Belief-space rectification by signed-weight fine-tuning.
//!
//! Spurious beliefs, followed by the incorrect answer, get weight −1 and
//! are pushed up in loss. True beliefs, followed by the correct answer,
//! get weight +β and are pulled down. Minimizing `Σ w·NLL` with these
//! weights is ascent on the suppressed terms and descent on the enhanced
//! ones.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionScore, EvidenceDoc};
use crate::dataset::QAInstance;
use crate::elicitation::{build_query, Belief, ElicitError, PromptTemplate};
use crate::model::{train_step, Adam, ModelError, Trainable, WeightedExample};
use crate::vocab::{Token, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationPair {
    pub instance: QAInstance,
    pub y_inc: String,
    pub y_cor: String,
    pub spurious: Vec<Belief>,
    pub true_beliefs: Vec<Belief>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub top_k_beliefs: usize,
    pub seed: u64,
    /// Training stops once the suppressed examples' mean NLL per token
    /// exceeds this many nats.
    pub nll_ceiling: f64,
    /// Largest tolerated drop in held-out accuracy, as a fraction, before
    /// reverting to the last good snapshot.
    pub max_accuracy_drop: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            beta: 0.5,
            learning_rate: 5e-5,
            batch_size: 8,
            epochs: 1,
            top_k_beliefs: 1,
            seed: 0,
            nll_ceiling: 20.0,
            max_accuracy_drop: 0.10,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<(), UnlearnError> {
        let bad = |m: &str| Err(UnlearnError::InvalidConfig(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.top_k_beliefs == 0 {
            return bad("top_k_beliefs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum UnlearnError {
    #[error("pair {0} has no {1} beliefs")]
    MissingBeliefs(String, &'static str),
    #[error("pair {0} has identical incorrect and correct answers")]
    SameAnswer(String),
    #[error("empty pool: {0}")]
    EmptyPool(String),
    #[error("no pairs to train on")]
    NoPairs,
    #[error("invalid unlearning config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error("training aborted at step {step}: {source}")]
    Training { step: usize, source: ModelError, log: TrainingLog },
}

fn by_score(beliefs: &[Belief], k: usize) -> Vec<&Belief> {
    let mut sorted: Vec<&Belief> = beliefs.iter().collect();
    sorted.sort_by(|a, b| b.combined.total_cmp(&a.combined).then_with(|| a.tokens.cmp(&b.tokens)));
    sorted.truncate(k);
    sorted
}

/// Suppress or enhance example for one belief and answer.
pub fn belief_example(
    question: &str,
    answer: &str,
    belief: &Belief,
    template: &PromptTemplate,
    vocab: &Vocab,
    weight: f64,
) -> Result<WeightedExample, ElicitError> {
    let query = build_query(question, answer, template, vocab)?;
    let mut target = belief.tokens.clone();
    target.extend_from_slice(&query.y_suf.tokens);
    let mask = query.target_mask(belief.tokens.len());
    Ok(WeightedExample::with_mask(query.x_pre.tokens, target, mask, weight))
}

/// Direct-answer example: the answer prompt as context, the answer and
/// EOS as target.
pub fn answer_example(instance: &QAInstance, answer: &str, vocab: &Vocab, weight: f64) -> WeightedExample {
    let mut target = vocab.tokenize(answer);
    target.push(Token::EOS);
    WeightedExample::new(vocab.tokenize(&instance.answer_prompt()), target, weight)
}

/// Truncates the longer side at random so both sides have equal size,
/// drops zero-weight examples, shuffles, and splits into batches.
fn balance_and_batch(
    mut suppress: Vec<WeightedExample>,
    mut enhance: Vec<WeightedExample>,
    config: &UnlearnConfig,
) -> Vec<Vec<WeightedExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = suppress.len().min(enhance.len());
    for side in [&mut suppress, &mut enhance] {
        if side.len() > n {
            side.shuffle(&mut rng);
            side.truncate(n);
        }
    }
    let mut all: Vec<WeightedExample> = suppress.into_iter().chain(enhance).filter(|e| e.weight != 0.0).collect();
    all.shuffle(&mut rng);
    all.chunks(config.batch_size).map(|c| c.to_vec()).collect()
}

/// Suppress and enhance examples from the top beliefs of each pair.
pub fn build_unlearn_batches(
    pairs: &[RectificationPair],
    template: &PromptTemplate,
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<Vec<Vec<WeightedExample>>, UnlearnError> {
    build_unlearn_batches_with(pairs, &[], template, config, vocab)
}

/// A correctly answered instance used only on the enhance side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceOnly {
    pub instance: QAInstance,
    pub true_beliefs: Vec<Belief>,
}

/// [`build_unlearn_batches`] with extra enhance candidates. They join the
/// enhance side before both sides are cut to the same size.
pub fn build_unlearn_batches_with(
    pairs: &[RectificationPair],
    extra: &[EnhanceOnly],
    template: &PromptTemplate,
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<Vec<Vec<WeightedExample>>, UnlearnError> {
    config.validate()?;
    let mut suppress = Vec::new();
    let mut enhance = Vec::new();
    for p in pairs {
        if p.spurious.is_empty() {
            return Err(UnlearnError::MissingBeliefs(p.instance.id.clone(), "spurious"));
        }
        if p.true_beliefs.is_empty() {
            return Err(UnlearnError::MissingBeliefs(p.instance.id.clone(), "true"));
        }
        if p.y_inc == p.y_cor {
            return Err(UnlearnError::SameAnswer(p.instance.id.clone()));
        }
        let question = p.instance.question_text();
        for b in by_score(&p.spurious, config.top_k_beliefs) {
            suppress.push(belief_example(&question, &p.y_inc, b, template, vocab, -1.0)?);
        }
        for b in by_score(&p.true_beliefs, config.top_k_beliefs) {
            enhance.push(belief_example(&question, &p.y_cor, b, template, vocab, config.beta)?);
        }
    }
    for e in extra {
        let question = e.instance.question_text();
        for b in by_score(&e.true_beliefs, config.top_k_beliefs) {
            enhance.push(belief_example(&question, &e.instance.answer, b, template, vocab, config.beta)?);
        }
    }
    Ok(balance_and_batch(suppress, enhance, config))
}

/// Answer-only baseline: suppress the incorrect answer and enhance the
/// correct one under the direct answering prompt.
pub fn answer_sr_sets(
    pairs: &[RectificationPair],
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<Vec<Vec<WeightedExample>>, UnlearnError> {
    answer_sr_sets_with(pairs, &[], config, vocab)
}

/// [`answer_sr_sets`] with correctly answered instances as extra enhance
/// candidates.
pub fn answer_sr_sets_with(
    pairs: &[RectificationPair],
    extra: &[QAInstance],
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<Vec<Vec<WeightedExample>>, UnlearnError> {
    config.validate()?;
    let mut suppress = Vec::new();
    let mut enhance = Vec::new();
    for p in pairs {
        if p.y_inc == p.y_cor {
            return Err(UnlearnError::SameAnswer(p.instance.id.clone()));
        }
        suppress.push(answer_example(&p.instance, &p.y_inc, vocab, -1.0));
        enhance.push(answer_example(&p.instance, &p.y_cor, vocab, config.beta));
    }
    enhance.extend(extra.iter().map(|i| answer_example(i, &i.answer, vocab, config.beta)));
    Ok(balance_and_batch(suppress, enhance, config))
}

/// Knowledge baseline examples for one pair: the `top_k_beliefs`
/// best-attributed pool documents are suppressed and the instance's own
/// evidence is enhanced.
pub fn knowledge_sr_examples(
    pair: &RectificationPair,
    pool: &[EvidenceDoc],
    scores: &[AttributionScore],
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<(Vec<WeightedExample>, Vec<WeightedExample>), UnlearnError> {
    if pool.is_empty() || scores.is_empty() {
        return Err(UnlearnError::EmptyPool(format!("no attributed documents for {}", pair.instance.id)));
    }
    let evidence = pair.instance.evidence.as_deref().unwrap_or_default();
    if evidence.is_empty() {
        return Err(UnlearnError::EmptyPool(format!("{} has no evidence", pair.instance.id)));
    }
    let mut ranked: Vec<&AttributionScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.doc_id.cmp(&b.doc_id)));
    let doc_example = |text: &str, weight: f64| {
        let doc = EvidenceDoc { id: String::new(), text: text.to_string(), source_instance: None };
        WeightedExample::new(Vec::new(), doc.target(vocab), weight)
    };
    let suppress: Vec<WeightedExample> = ranked
        .iter()
        .filter_map(|s| pool.iter().find(|d| d.id == s.doc_id))
        .take(config.top_k_beliefs)
        .map(|d| doc_example(&d.text, -1.0))
        .collect();
    let enhance: Vec<WeightedExample> = evidence.iter().map(|e| doc_example(e, config.beta)).collect();
    Ok((suppress, enhance))
}

/// Knowledge baseline batches over many pairs. `scores[i]` ranks the pool
/// for `pairs[i]`.
pub fn knowledge_sr_sets(
    pairs: &[RectificationPair],
    pool: &[EvidenceDoc],
    scores: &[Vec<AttributionScore>],
    config: &UnlearnConfig,
    vocab: &Vocab,
) -> Result<Vec<Vec<WeightedExample>>, UnlearnError> {
    config.validate()?;
    let mut suppress = Vec::new();
    let mut enhance = Vec::new();
    for (p, s) in pairs.iter().zip(scores) {
        let (sup, enh) = knowledge_sr_examples(p, pool, s, config, vocab)?;
        suppress.extend(sup);
        enhance.extend(enh);
    }
    Ok(balance_and_batch(suppress, enhance, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean NLL of the suppressed examples in the batch, before the step.
    #[serde(with = "crate::model::float_serde")]
    pub suppress_nll: f64,
    #[serde(with = "crate::model::float_serde")]
    pub enhance_nll: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    /// Suppressed loss had crossed the ceiling when this step began; the
    /// step is undone.
    NllCeiling {
        step: usize,
        #[serde(with = "crate::model::float_serde")]
        nll: f64,
    },
    /// Held-out accuracy fell too far; parameters reverted to the snapshot
    /// taken after `restored_epoch` epochs.
    AccuracyDrop { epoch: usize, accuracy: f64, baseline: f64, restored_epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub stop: Option<StopReason>,
}

impl TrainingLog {
    /// One JSON object per line: every step record, then the stop reason if any.
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        if let Some(s) = &self.stop {
            serde_json::to_writer(&mut w, &serde_json::json!({ "stop": s }))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Inverse of [`TrainingLog::write_lines`].
    pub fn read_lines<R: std::io::BufRead>(r: R) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Stop {
            stop: StopReason,
        }
        let mut log = TrainingLog::default();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(rec) = serde_json::from_str::<LogRecord>(&line) {
                log.records.push(rec);
            } else {
                let s: Stop = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?;
                log.stop = Some(s.stop);
            }
        }
        Ok(log)
    }
}

fn side_mean(batch: &[WeightedExample], losses: &[f64], negative: bool) -> f64 {
    let sel: Vec<f64> =
        batch.iter().zip(losses).filter(|(e, _)| (e.weight < 0.0) == negative).map(|(_, &l)| l).collect();
    if sel.is_empty() {
        f64::NAN
    } else {
        sel.iter().sum::<f64>() / sel.len() as f64
    }
}

/// Held-out check run between epochs. Returns an accuracy in `[0, 1]`.
pub trait Monitor<M> {
    fn accuracy(&mut self, model: &M) -> f64;
}

/// Runs `epochs × batches` Adam steps on a copy of `model`.
///
/// Moments start at zero. The input model is never modified. Training
/// stops early when the suppressed NLL crosses `nll_ceiling`, or when the
/// monitor's accuracy falls more than `max_accuracy_drop` below its value
/// on the input model, in which case the last snapshot that passed is
/// returned.
pub fn rectify_batches<M: Trainable>(
    model: &M,
    batches: &[Vec<WeightedExample>],
    config: &UnlearnConfig,
    mut monitor: Option<&mut dyn Monitor<M>>,
) -> Result<(M, TrainingLog), UnlearnError> {
    config.validate()?;
    let mut current = model.clone();
    let mut log = TrainingLog::default();
    if config.epochs == 0 || batches.is_empty() {
        return Ok((current, log));
    }
    let mut optimizer = Adam::new(current.params().len());
    let baseline = monitor.as_mut().map(|m| m.accuracy(model));
    let mut good = (current.clone(), 0);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in batches {
            let before = current.clone();
            let outcome = match train_step(&mut current, &mut optimizer, batch, config.learning_rate) {
                Ok(o) => o,
                Err(source) => return Err(UnlearnError::Training { step, source, log }),
            };
            let suppress_nll = side_mean(batch, &outcome.losses, true);
            let tokens_ok = suppress_nll.is_nan() || suppress_nll <= config.nll_ceiling;
            log.records.push(LogRecord {
                step,
                epoch,
                suppress_nll,
                enhance_nll: side_mean(batch, &outcome.losses, false),
                objective: outcome.objective,
            });
            step += 1;
            if !tokens_ok {
                log.stop = Some(StopReason::NllCeiling { step: step - 1, nll: suppress_nll });
                return Ok((before, log));
            }
        }
        if let (Some(m), Some(base)) = (monitor.as_mut(), baseline) {
            let acc = m.accuracy(&current);
            if base - acc > config.max_accuracy_drop {
                log.stop = Some(StopReason::AccuracyDrop { epoch, accuracy: acc, baseline: base, restored_epoch: good.1 });
                return Ok((good.0, log));
            }
            good = (current.clone(), epoch + 1);
        }
    }
    Ok((current, log))
}

/// Builds belief batches from `pairs` and rectifies a copy of `model`.
pub fn rectify<M: Trainable>(
    model: &M,
    pairs: &[RectificationPair],
    template: &PromptTemplate,
    vocab: &Vocab,
    config: &UnlearnConfig,
    monitor: Option<&mut dyn Monitor<M>>,
) -> Result<(M, TrainingLog), UnlearnError> {
    if pairs.is_empty() {
        return Err(UnlearnError::NoPairs);
    }
    let batches = build_unlearn_batches(pairs, template, config, vocab)?;
    rectify_batches(model, &batches, config, monitor)
}
