//! Multi-run analyses: top-n sweep, generator comparison and
//! cross-domain evaluation. Every run shares one `prepare` stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{prepare_shared, run_variant, BuiltinElicitor, Prepared, RunError, RunResult};
use super::world::DOMAINS;
use super::{predict_all, DecodeConfig, RunConfig};
use crate::analysis::{exact_match, SweepTable};
use crate::dataset::QAInstance;
use crate::elicitation::Generator;
use crate::model::load_checkpoint;

pub const TOP_N_VALUES: [usize; 4] = [1, 4, 8, 16];

/// Variant directory `<out_dir>/<group>/<label>`.
pub fn variant_config(base: &RunConfig, group: &str, label: &str) -> RunConfig {
    let mut c = base.clone();
    c.out_dir = base.out_dir.join(group).join(label);
    c
}

/// One full run per `n` with `top_k_beliefs = n`. Searches keep
/// `max(n_values)` candidates in every run so the rows differ only in `n`.
pub fn top_n_sweep(config: &RunConfig, n_values: &[usize]) -> Result<(SweepTable, Vec<RunResult>), RunError> {
    let prepared = prepare_shared(config)?;
    top_n_sweep_on(config, &prepared, n_values)
}

pub fn top_n_sweep_on(config: &RunConfig, prepared: &Prepared, n_values: &[usize]) -> Result<(SweepTable, Vec<RunResult>), RunError> {
    let m = n_values.iter().copied().max().unwrap_or(1).max(config.fbbs.candidate_m);
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &n in n_values {
        let mut c = variant_config(config, "sweep-n", &format!("n{n}"));
        c.unlearn.top_k_beliefs = n;
        c.fbbs.candidate_m = m;
        c.fbbs.beam_n = c.fbbs.beam_n.max(m);
        let r = run_variant(&c, prepared, &BuiltinElicitor::from_config(&c)?)?;
        rows.push((format!("{n}"), r.rectified.clone()));
        results.push(r);
    }
    Ok((SweepTable::from_reports("n", &rows), results))
}

/// One full run per belief generator.
pub fn generator_comparison(config: &RunConfig, generators: &[Generator]) -> Result<(SweepTable, Vec<RunResult>), RunError> {
    let prepared = prepare_shared(config)?;
    generator_comparison_on(config, &prepared, generators)
}

pub fn generator_comparison_on(
    config: &RunConfig,
    prepared: &Prepared,
    generators: &[Generator],
) -> Result<(SweepTable, Vec<RunResult>), RunError> {
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &g in generators {
        let mut c = variant_config(config, "generators", g.as_str());
        c.generator = g;
        let r = run_variant(&c, prepared, &BuiltinElicitor::from_config(&c)?)?;
        rows.push((g.as_str().to_string(), r.rectified.clone()));
        results.push(r);
    }
    Ok((SweepTable::from_reports("generator", &rows), results))
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CrossError {
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("{0}")]
    Model(String),
}

/// Accuracy of each checkpoint (rows) on each domain's eval set (columns),
/// with the vanilla model as the last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub domains: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl CrossMatrix {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("trained_on\t{}\n", self.domains.join("\t"));
        for (label, accs) in &self.rows {
            let cols: Vec<String> = accs.iter().map(|a| format!("{a:.6}")).collect();
            let _ = writeln!(out, "{label}\t{}", cols.join("\t"));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| Trained on | {} |\n|---|", self.domains.join(" | "));
        out.push_str(&"---:|".repeat(self.domains.len()));
        out.push('\n');
        for (label, accs) in &self.rows {
            let cols: Vec<String> = accs.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            let _ = writeln!(out, "| {label} | {} |", cols.join(" | "));
        }
        out
    }
}

fn accuracy(model: &crate::model::Transformer, vocab: &crate::Vocab, set: &[QAInstance], decode: &DecodeConfig) -> Result<f64, CrossError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(model, vocab, set, decode).map_err(|e| CrossError::Model(e.to_string()))?;
    Ok(set.iter().zip(&preds).filter(|(i, p)| exact_match(p, &i.answer)).count() as f64 / set.len() as f64)
}

/// Swaps evaluation sets across checkpoints. Every checkpoint must share
/// the vanilla vocabulary and have an eval set under the same name.
pub fn cross_evaluate(
    checkpoints: &BTreeMap<String, PathBuf>,
    vanilla: &Path,
    eval_sets: &BTreeMap<String, Vec<QAInstance>>,
    decode: &DecodeConfig,
) -> Result<CrossMatrix, CrossError> {
    let base = load_checkpoint(vanilla).map_err(|e| CrossError::CheckpointMismatch(format!("vanilla: {e}")))?;
    if checkpoints.keys().ne(eval_sets.keys()) {
        return Err(CrossError::CheckpointMismatch("checkpoint and eval-set names differ".into()));
    }
    let domains: Vec<String> = eval_sets.keys().cloned().collect();
    let mut rows = Vec::new();
    for (name, path) in checkpoints {
        let ck = load_checkpoint(path).map_err(|e| CrossError::CheckpointMismatch(format!("{name}: {e}")))?;
        if ck.vocab.hash() != base.vocab.hash() || ck.model.config() != base.model.config() {
            return Err(CrossError::CheckpointMismatch(format!("{name} does not match the vanilla model")));
        }
        let accs = eval_sets.values().map(|s| accuracy(&ck.model, &ck.vocab, s, decode)).collect::<Result<_, _>>()?;
        rows.push((name.clone(), accs));
    }
    let accs = eval_sets.values().map(|s| accuracy(&base.model, &base.vocab, s, decode)).collect::<Result<_, _>>()?;
    rows.push(("vanilla".to_string(), accs));
    Ok(CrossMatrix { domains, rows })
}

/// Rectifies once per relation domain of the synthetic world, then
/// cross-evaluates the rectified checkpoints.
pub fn cross_domain(config: &RunConfig) -> Result<(CrossMatrix, Vec<RunResult>), RunError> {
    let prepared = prepare_shared(config)?;
    let mut checkpoints = BTreeMap::new();
    let mut eval_sets = BTreeMap::new();
    let mut results = Vec::new();
    for (domain, _) in DOMAINS {
        let mut c = variant_config(config, "cross", domain);
        c.data.domain = Some(domain.to_string());
        let r = run_variant(&c, &prepared, &BuiltinElicitor::from_config(&c)?)?;
        checkpoints.insert(domain.to_string(), r.checkpoint.clone());
        eval_sets.insert(domain.to_string(), super::world::domain_instances(&prepared.splits.eval, domain));
        results.push(r);
    }
    let vanilla = prepared.root.join("model/vanilla.json");
    let matrix = cross_evaluate(&checkpoints, &vanilla, &eval_sets, &config.decode)
        .map_err(|e| RunError::Stage { stage: super::run::Stage::Evaluate, message: e.to_string() })?;
    Ok((matrix, results))
}
