//! Binary checkpoint: magic, JSON header, little-endian `f64` parameters.
//!
//! ```text
//! b"BSRCKPT\0"  u32 LE header length  header JSON  params (f64 LE) ...
//! ```
//!
//! The header records the format id, the vocabulary and its hash, and the
//! architecture config.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Trainable, Transformer, TransformerConfig};
use crate::vocab::Vocab;

pub const CHECKPOINT_FORMAT: &str = "belief-space/transformer/v1";
const MAGIC: &[u8; 8] = b"BSRCKPT\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    vocab_hash: String,
    config: TransformerConfig,
    n_params: usize,
    vocab: Vocab,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer,
    pub vocab: Vocab,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: &Path, model: &Transformer, vocab: &Vocab) -> Result<(), ModelError> {
    if vocab.len() != model.config().vocab_size {
        return Err(err(format!("vocabulary has {} words, model expects {}", vocab.len(), model.config().vocab_size)));
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        vocab_hash: vocab.hash(),
        config: *model.config(),
        n_params: model.n_params(),
        vocab: vocab.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * model.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| err(format!("{}: {e}", tmp.display())))?;
    f.write_all(&buf).map_err(|e| err(e.to_string()))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| err(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format {}", header.format)));
    }
    let actual = header.vocab.hash();
    if actual != header.vocab_hash {
        return Err(ModelError::VocabMismatch { expected: header.vocab_hash, found: actual });
    }
    let data = &bytes[12 + hlen..];
    if data.len() != 8 * header.n_params {
        return Err(err(format!("expected {} parameter bytes, found {}", 8 * header.n_params, data.len())));
    }
    let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let model = Transformer::from_params(header.config, params)?;
    Ok(Checkpoint { model, vocab: header.vocab })
}

/// Loads a checkpoint and checks that it was trained on `vocab`.
pub fn load_checkpoint_with_vocab(path: &Path, vocab: &Vocab) -> Result<Checkpoint, ModelError> {
    let ckpt = load_checkpoint(path)?;
    let (expected, found) = (vocab.hash(), ckpt.vocab.hash());
    if expected != found {
        return Err(ModelError::VocabMismatch { expected, found });
    }
    Ok(ckpt)
}
