use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{exact_match, normalize_answer};
use crate::corpus::CorpusIndex;
use crate::dataset::QAInstance;
use crate::model::{beam_decode, LanguageModel, ModelError};
use crate::vocab::{Token, Vocab};

/// Decoding settings for direct answering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 4, max_new_tokens: 32 }
    }
}

/// Beam-search answer to the instance's direct prompt, normalized for
/// exact match. Decoding stops at EOS.
pub fn answer_inference<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    instance: &QAInstance,
    config: &DecodeConfig,
) -> Result<String, ModelError> {
    let prompt = vocab.tokenize(&instance.answer_prompt());
    let room = model.max_context().saturating_sub(prompt.len());
    let max_len = config.max_new_tokens.min(room).max(1);
    let out = beam_decode(model, &prompt, &[Token::EOS], config.beam_width, max_len)?;
    let best = out.first().map(|c| vocab.detokenize(&c.tokens)).unwrap_or_default();
    Ok(normalize_answer(&best))
}

/// Predictions for every instance, in input order.
pub fn predict_all<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    instances: &[QAInstance],
    config: &DecodeConfig,
) -> Result<Vec<String>, ModelError> {
    instances.par_iter().map(|i| answer_inference(model, vocab, i, config)).collect()
}

/// Instances whose question and answer both occur verbatim in the corpus,
/// and the rest.
pub fn membership_filter(instances: &[QAInstance], corpus: &CorpusIndex) -> (Vec<QAInstance>, Vec<QAInstance>) {
    instances.iter().cloned().partition(|i| corpus.contains(&i.question) && corpus.contains(&i.answer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<QAInstance>,
    pub dev: Vec<QAInstance>,
    pub eval: Vec<QAInstance>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("need at least 2 held-out instances, found {0}")]
pub struct InsufficientData(pub usize);

/// Members train; held-out instances are shuffled and halved into dev and
/// eval, dev taking the smaller half.
pub fn make_splits(members: Vec<QAInstance>, mut non_members: Vec<QAInstance>, seed: u64) -> Result<DatasetSplits, InsufficientData> {
    if non_members.len() < 2 {
        return Err(InsufficientData(non_members.len()));
    }
    non_members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval = non_members.split_off(non_members.len() / 2);
    Ok(DatasetSplits { train: members, dev: non_members, eval })
}

/// Training instances split by whether the model answers them correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Wrongly answered instances with the model's answer.
    pub incorrect: Vec<(QAInstance, String)>,
    pub correct: Vec<QAInstance>,
}

pub fn partition_by_correctness<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    train: &[QAInstance],
    config: &DecodeConfig,
) -> Result<Partition, ModelError> {
    let preds = predict_all(model, vocab, train, config)?;
    Ok(partition_from_predictions(train, &preds))
}

/// Partition from precomputed predictions, aligned with `train`.
pub fn partition_from_predictions(train: &[QAInstance], predictions: &[String]) -> Partition {
    let mut part = Partition { incorrect: Vec::new(), correct: Vec::new() };
    for (inst, pred) in train.iter().zip(predictions) {
        if exact_match(pred, &inst.answer) {
            part.correct.push(inst.clone());
        } else {
            part.incorrect.push((inst.clone(), pred.clone()));
        }
    }
    part
}

/// Ids must be unique across the three splits.
pub fn check_disjoint(splits: &DatasetSplits) -> bool {
    let mut seen = HashSet::new();
    splits.train.iter().chain(&splits.dev).chain(&splits.eval).all(|i| seen.insert(i.id.as_str()))
}
