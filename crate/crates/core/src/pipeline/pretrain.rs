use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{train_step, Adam, ModelError, Trainable, Transformer, TransformerConfig, WeightedExample};
use crate::vocab::{Token, Vocab};

/// Language-model pretraining on a document corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays linearly to a tenth of it.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TransformerConfig::tiny(0);
        PretrainConfig {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers: t.n_layers,
            d_ff: t.d_ff,
            max_positions: t.max_positions,
            epochs: 40,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-token loss over each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Each document, followed by EOS, is one full-loss example with an empty
/// context.
pub fn pretrain(docs: &[String], vocab: &Vocab, config: &PretrainConfig) -> Result<(Transformer, PretrainLog), ModelError> {
    let model_config = config.model_config(vocab.len());
    model_config.validate()?;
    let mut model = Transformer::new(model_config, config.seed);
    let mut examples: Vec<WeightedExample> = docs
        .iter()
        .map(|d| {
            let mut t = vocab.tokenize(d);
            t.push(Token::EOS);
            WeightedExample::new(Vec::new(), t, 1.0)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let mut opt = Adam::new(model.params().len());
    let steps_per_epoch = examples.len().div_ceil(config.batch_size.max(1));
    let total = (steps_per_epoch * config.epochs).max(1) as f64;
    let mut log = PretrainLog::default();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        examples.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in examples.chunks(config.batch_size.max(1)) {
            let lr = config.learning_rate * (1.0 - 0.9 * step as f64 / total);
            let out = train_step(&mut model, &mut opt, batch, lr)?;
            sum += out.losses.iter().sum::<f64>();
            step += 1;
        }
        log.epoch_loss.push(sum / examples.len().max(1) as f64);
    }
    Ok((model, log))
}
