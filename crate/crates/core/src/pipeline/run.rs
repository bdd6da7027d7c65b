//! Staged rectification runs with hash-checked, resumable artifacts.
//!
//! Layout of a run directory (format [`RUN_FORMAT`]):
//!
//! | stage | artifacts |
//! |---|---|
//! | `prepare` | `data/{train,dev,eval}.jsonl`, `data/corpus.txt`, `model/vanilla.json`, `model/pretrain_log.json` |
//! | `baseline-eval` | `baseline/predictions.jsonl`, `baseline/partition.json` |
//! | `elicit` | `beliefs/beliefs.jsonl`, `beliefs/pairs.json`, `attribution/scores.tsv` (knowledge-sr only) |
//! | `rectify` | `rectified/model.json`, `rectified/training_log.jsonl`, `rectified/summary.json` |
//! | `evaluate` | `reports/report.md`, `reports/report.tsv`, `reports/reports.json`, `reports/predictions.jsonl` |
//!
//! `manifest.json` holds the resolved config, the seed and, per stage, a
//! key and the SHA-256 of each artifact. A stage whose key matches and
//! whose artifacts still hash to the recorded values is loaded instead of
//! recomputed. Keys cover the stage's config and its inputs' hashes, so a
//! changed upstream artifact reruns everything below it.
//!
//! Variant runs (sweeps, cross-evaluation) share one `prepare` stage: the
//! variant directory's manifest names the shared directory in `upstream`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, Method, RunConfig};
use super::world::{domain_instances, generate_world};
use super::{make_splits, membership_filter, partition_from_predictions, predict_all, pretrain, DatasetSplits, Partition, PretrainLog};
use crate::analysis::{exact_match, render_report, EvalReport, Outcomes};
use crate::attribution::{rank_pool_many, write_scores, AttributionScore, EvidenceDoc, Query};
use crate::corpus::CorpusIndex;
use crate::dataset::{load_corpus, load_dataset, write_dataset, QAInstance, ANSWER_PROMPT};
use crate::elicitation::{
    elicit, write_belief_dump, Belief, BeliefRecord, ElicitError, FbbsConfig, Generator, PromptTemplate, POSTHOC_PROMPT,
};
use crate::model::{load_checkpoint, save_checkpoint, Transformer};
use crate::unlearning::{
    answer_sr_sets_with, build_unlearn_batches_with, knowledge_sr_sets, rectify_batches, EnhanceOnly, Monitor,
    RectificationPair, TrainingLog, UnlearnError,
};
use crate::vocab::{Token, Vocab};

pub const RUN_FORMAT: &str = "belief-space/run/v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    BaselineEval,
    Elicit,
    Rectify,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::BaselineEval, Stage::Elicit, Stage::Rectify, Stage::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::BaselineEval => "baseline-eval",
            Stage::Elicit => "elicit",
            Stage::Rectify => "rectify",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, RunError>;
}

impl<T, E: fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, RunError> {
        self.map_err(|e| RunError::Stage { stage, message: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    /// True when the method has nothing to do in this stage.
    #[serde(default)]
    pub skipped: bool,
    /// Path relative to the run directory, to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Directory holding the shared `prepare` stage, relative to this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn key_of(parts: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(parts).expect("serializable key").as_bytes())
}

/// A run directory and its manifest.
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens or creates `root`, keeping stage records of an earlier run.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self, RunError> {
        fs::create_dir_all(root).at(Stage::Prepare)?;
        let path = root.join(MANIFEST);
        let stages = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<Manifest>(&text).map(|m| m.stages).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        let manifest =
            Manifest { format: RUN_FORMAT.to_string(), seed: config.seed, config: config.clone(), upstream: None, stages };
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn cached(&self, stage: Stage, key: &str) -> bool {
        self.manifest.stages.get(stage.as_str()).is_some_and(|r| {
            r.key == key
                && r.artifacts.iter().all(|(rel, h)| hash_file(&self.root.join(rel)).ok().as_deref() == Some(h.as_str()))
        })
    }

    fn hashes(&self, stage: Stage) -> BTreeMap<String, String> {
        self.manifest.stages.get(stage.as_str()).map(|r| r.artifacts.clone()).unwrap_or_default()
    }

    fn create_parent(&self, rel: &str) -> std::io::Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.create_parent(rel)?, bytes)
    }

    fn record(&mut self, stage: Stage, key: String, rels: &[&str], skipped: bool) -> Result<(), RunError> {
        let mut artifacts = BTreeMap::new();
        for rel in rels {
            artifacts.insert(rel.to_string(), hash_file(&self.root.join(rel)).at(stage)?);
        }
        self.manifest.stages.insert(stage.as_str().to_string(), StageRecord { key, skipped, artifacts });
        self.save().at(stage)
    }

    fn save(&self) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)
    }
}

/// Output of the `prepare` stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: DatasetSplits,
    pub corpus: Vec<String>,
    pub vocab: Vocab,
    pub model: Transformer,
    pub root: PathBuf,
    pub hashes: BTreeMap<String, String>,
}

/// Output of the `baseline-eval` stage.
#[derive(Debug, Clone)]
pub struct Baseline {
    /// Splits after the domain filter.
    pub splits: DatasetSplits,
    pub partition: Partition,
    pub vanilla: EvalReport,
    pub hashes: BTreeMap<String, String>,
}

/// Output of the `elicit` stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Elicited {
    pub pairs: Vec<RectificationPair>,
    pub extra: Vec<EnhanceOnly>,
    /// Knowledge baseline: ranked pool documents per pair.
    pub scores: Vec<Vec<AttributionScore>>,
    /// D✗ instances dropped because a side had no completed belief.
    pub dropped: Vec<String>,
    #[serde(skip)]
    pub hashes: BTreeMap<String, String>,
}

/// Output of the `rectify` stage.
#[derive(Debug, Clone)]
pub struct Rectified {
    pub model: Transformer,
    pub log: TrainingLog,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub belief_dump: Option<PathBuf>,
    pub report_md: PathBuf,
    pub report_tsv: PathBuf,
    pub vanilla: EvalReport,
    pub rectified: EvalReport,
    pub log: TrainingLog,
}

/// Belief generator used by the `elicit` stage: (model, vocab, question,
/// answer) to ranked beliefs.
pub trait Elicitor: Sync {
    /// Distinguishes generators in stage keys.
    fn id(&self) -> String;
    fn beliefs(&self, model: &Transformer, vocab: &Vocab, question: &str, answer: &str) -> Result<Vec<Belief>, ElicitError>;
}

/// The library's generators.
pub struct BuiltinElicitor {
    pub generator: Generator,
    pub template: PromptTemplate,
    pub config: FbbsConfig,
}

impl BuiltinElicitor {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        let template = config.template().map_err(|e| RunError::Config(e.0))?;
        Ok(BuiltinElicitor { generator: config.generator, template, config: config.fbbs })
    }
}

impl Elicitor for BuiltinElicitor {
    fn id(&self) -> String {
        format!("builtin:{}", self.generator)
    }

    fn beliefs(&self, model: &Transformer, vocab: &Vocab, question: &str, answer: &str) -> Result<Vec<Belief>, ElicitError> {
        elicit(model, vocab, self.generator, question, answer, &self.template, &self.config)
    }
}

fn template_text(config: &RunConfig) -> Result<String, RunError> {
    match &config.template {
        Some(p) => fs::read_to_string(p).map_err(|e| RunError::Config(format!("template {}: {e}", p.display()))),
        None => Ok(crate::elicitation::DEFAULT_TEMPLATE.to_string()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn write_json<T: Serialize>(dir: &RunDir, rel: &str, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    dir.write(rel, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &RunDir, rel: &str) -> Result<T, String> {
    let text = fs::read_to_string(dir.path(rel)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

const PREPARE_ARTIFACTS: [&str; 6] =
    ["data/train.jsonl", "data/dev.jsonl", "data/eval.jsonl", "data/corpus.txt", "model/vanilla.json", "model/pretrain_log.json"];

/// Loads or builds the data splits and the vanilla model.
pub fn prepare(dir: &mut RunDir, config: &RunConfig) -> Result<Prepared, RunError> {
    const S: Stage = Stage::Prepare;
    let template = template_text(config)?;
    let data_files: BTreeMap<String, String> = [&config.data.dataset, &config.data.corpus, &config.data.checkpoint]
        .into_iter()
        .flatten()
        .map(|p| Ok((p.display().to_string(), hash_file(p)?)))
        .collect::<std::io::Result<_>>()
        .at(S)?;
    let mut data = config.data.clone();
    data.domain = None;
    let key = key_of(&serde_json::json!({
        "stage": S.as_str(),
        "data": data,
        "data_files": data_files,
        "pretrain": config.pretrain,
        "seed": config.seed,
        "template": template,
    }));

    if dir.cached(S, &key) {
        let load = |rel: &str| load_dataset(&dir.path(rel)).at(S);
        let splits = DatasetSplits { train: load("data/train.jsonl")?, dev: load("data/dev.jsonl")?, eval: load("data/eval.jsonl")? };
        let corpus = load_corpus(&dir.path("data/corpus.txt")).at(S)?;
        let ck = load_checkpoint(&dir.path("model/vanilla.json")).at(S)?;
        return Ok(Prepared { splits, corpus, vocab: ck.vocab, model: ck.model, root: dir.root.clone(), hashes: dir.hashes(S) });
    }

    let (instances, corpus, vocab) = match config.data.source {
        DataSource::Synthetic => {
            let w = generate_world(&config.data.world);
            (w.instances, w.corpus, w.vocab)
        }
        DataSource::Files => {
            let dataset = config.data.dataset.as_ref().ok_or_else(|| RunError::Config("data.dataset is required".into()))?;
            let corpus_path = config.data.corpus.as_ref().ok_or_else(|| RunError::Config("data.corpus is required".into()))?;
            let instances = load_dataset(dataset).at(S)?;
            let corpus = load_corpus(corpus_path).at(S)?;
            let vocab = match &config.data.checkpoint {
                Some(p) => load_checkpoint(p).at(S)?.vocab,
                None => {
                    let mut texts: Vec<&str> = vec![template.as_str(), ANSWER_PROMPT, POSTHOC_PROMPT];
                    texts.extend(corpus.iter().map(String::as_str));
                    for i in &instances {
                        texts.push(&i.question);
                        texts.push(&i.answer);
                    }
                    let owned: Vec<String> = instances.iter().flat_map(|i| i.choices.iter().flatten().map(|c| c.text.clone())).collect();
                    texts.extend(owned.iter().map(String::as_str));
                    Vocab::from_texts(texts)
                }
            };
            (instances, corpus, vocab)
        }
    };
    let index = CorpusIndex::build(corpus.clone(), &vocab);
    let (members, non_members) = membership_filter(&instances, &index);
    let splits = make_splits(members, non_members, config.seed).at(S)?;
    let (model, plog) = match &config.data.checkpoint {
        Some(p) => (load_checkpoint(p).at(S)?.model, PretrainLog::default()),
        None => pretrain(&corpus, &vocab, &config.pretrain).at(S)?,
    };

    for (rel, part) in [("data/train.jsonl", &splits.train), ("data/dev.jsonl", &splits.dev), ("data/eval.jsonl", &splits.eval)] {
        let f = fs::File::create(dir.create_parent(rel).at(S)?).at(S)?;
        let mut w = BufWriter::new(f);
        write_dataset(&mut w, part).at(S)?;
        w.flush().at(S)?;
    }
    let mut text = corpus.join("\n");
    text.push('\n');
    dir.write("data/corpus.txt", text.as_bytes()).at(S)?;
    save_checkpoint(&dir.create_parent("model/vanilla.json").at(S)?, &model, &vocab).at(S)?;
    write_json(dir, "model/pretrain_log.json", &plog).at(S)?;
    dir.record(S, key, &PREPARE_ARTIFACTS, false)?;
    Ok(Prepared { splits, corpus, vocab, model, root: dir.root.clone(), hashes: dir.hashes(S) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    split: String,
    prediction: String,
    correct: bool,
}

fn records(split: &str, instances: &[QAInstance], predictions: &[String]) -> Vec<PredictionRecord> {
    instances
        .iter()
        .zip(predictions)
        .map(|(i, p)| PredictionRecord {
            id: i.id.clone(),
            split: split.to_string(),
            prediction: p.clone(),
            correct: exact_match(p, &i.answer),
        })
        .collect()
}

fn filter_domain(splits: &DatasetSplits, domain: Option<&str>) -> DatasetSplits {
    match domain {
        None => splits.clone(),
        Some(d) => DatasetSplits {
            train: domain_instances(&splits.train, d),
            dev: domain_instances(&splits.dev, d),
            eval: domain_instances(&splits.eval, d),
        },
    }
}

/// Vanilla answers on train and eval, and the train partition.
pub fn baseline_eval(dir: &mut RunDir, config: &RunConfig, prepared: &Prepared) -> Result<Baseline, RunError> {
    const S: Stage = Stage::BaselineEval;
    let splits = filter_domain(&prepared.splits, config.data.domain.as_deref());
    let key = key_of(&serde_json::json!({
        "stage": S.as_str(),
        "decode": config.decode,
        "domain": config.data.domain,
        "prepare": prepared.hashes,
    }));
    let (partition, eval_ok) = if dir.cached(S, &key) {
        let partition: Partition = read_json(dir, "baseline/partition.json").at(S)?;
        let text = fs::read_to_string(dir.path("baseline/predictions.jsonl")).at(S)?;
        let mut eval_ok = Vec::new();
        for line in text.lines() {
            let r: PredictionRecord = serde_json::from_str(line).at(S)?;
            if r.split == "eval" {
                eval_ok.push(r.correct);
            }
        }
        (partition, eval_ok)
    } else {
        let train_pred = predict_all(&prepared.model, &prepared.vocab, &splits.train, &config.decode).at(S)?;
        let eval_pred = predict_all(&prepared.model, &prepared.vocab, &splits.eval, &config.decode).at(S)?;
        let partition = partition_from_predictions(&splits.train, &train_pred);
        let mut recs = records("train", &splits.train, &train_pred);
        let eval_recs = records("eval", &splits.eval, &eval_pred);
        let eval_ok = eval_recs.iter().map(|r| r.correct).collect();
        recs.extend(eval_recs);
        write_jsonl(&dir.create_parent("baseline/predictions.jsonl").at(S)?, &recs).at(S)?;
        write_json(dir, "baseline/partition.json", &partition).at(S)?;
        dir.record(S, key, &["baseline/predictions.jsonl", "baseline/partition.json"], false)?;
        (partition, eval_ok)
    };
    let outcomes = Outcomes {
        incorrect: vec![false; partition.incorrect.len()],
        correct: vec![true; partition.correct.len()],
        eval: eval_ok,
    };
    Ok(Baseline { splits, partition, vanilla: EvalReport::new("Vanilla", outcomes), hashes: dir.hashes(S) })
}

/// Attribution pool: the distinct evidence documents of `instances`, in
/// first-occurrence order, with stable ids.
pub fn evidence_pool(instances: &[QAInstance]) -> Vec<EvidenceDoc> {
    let mut seen = std::collections::HashSet::new();
    let mut pool = Vec::new();
    for i in instances {
        for e in i.evidence.iter().flatten() {
            if seen.insert(e.as_str()) {
                let id = format!("doc-{:06}", pool.len());
                pool.push(EvidenceDoc { id, text: e.clone(), source_instance: Some(i.id.clone()) });
            }
        }
    }
    pool
}

fn answer_target(vocab: &Vocab, answer: &str) -> Vec<Token> {
    let mut t = vocab.tokenize(answer);
    t.push(Token::EOS);
    t
}

/// Beliefs for (x, y_inc) and (x, y_cor) over D✗, or attribution scores
/// for the knowledge baseline. Skipped for the answer baseline.
pub fn elicit_stage(
    dir: &mut RunDir,
    config: &RunConfig,
    prepared: &Prepared,
    baseline: &Baseline,
    elicitor: &dyn Elicitor,
) -> Result<Elicited, RunError> {
    const S: Stage = Stage::Elicit;
    let key = key_of(&serde_json::json!({
        "stage": S.as_str(),
        "method": config.method,
        "elicitor": elicitor.id(),
        "template": template_text(config)?,
        "fbbs": config.fbbs,
        "include_correct": config.include_correct,
        "attribution": config.attribution,
        "top_k": config.unlearn.top_k_beliefs,
        "baseline": baseline.hashes,
    }));
    if dir.cached(S, &key) {
        let mut e: Elicited = read_json(dir, "beliefs/pairs.json").at(S)?;
        e.hashes = dir.hashes(S);
        return Ok(e);
    }

    let (model, vocab) = (&prepared.model, &prepared.vocab);
    let mut out = Elicited::default();
    let mut rels = vec!["beliefs/pairs.json"];
    let bare = |(i, y_inc): &(QAInstance, String)| RectificationPair {
        instance: i.clone(),
        y_inc: y_inc.clone(),
        y_cor: i.answer.clone(),
        spurious: Vec::new(),
        true_beliefs: Vec::new(),
    };
    match config.method {
        Method::AnswerSr => {
            out.pairs = baseline.partition.incorrect.iter().map(bare).collect();
        }
        Method::KnowledgeSr => {
            out.pairs = baseline.partition.incorrect.iter().map(bare).collect();
            let pool = evidence_pool(&baseline.splits.train);
            let contexts: Vec<(Vec<Token>, Vec<Token>)> = out
                .pairs
                .iter()
                .map(|p| (vocab.tokenize(&p.instance.answer_prompt()), answer_target(vocab, &p.y_inc)))
                .collect();
            let queries: Vec<Query<'_>> = contexts.iter().map(|(c, t)| Query { context: c, target: t }).collect();
            if !queries.is_empty() {
                out.scores = rank_pool_many(model, vocab, &pool, &queries, config.attribution.method, config.unlearn.top_k_beliefs)
                    .at(S)?;
            }
            let mut w = BufWriter::new(fs::File::create(dir.create_parent("attribution/scores.tsv").at(S)?).at(S)?);
            for (p, s) in out.pairs.iter().zip(&out.scores) {
                write_scores(&mut w, &p.instance.id, s).at(S)?;
            }
            w.flush().at(S)?;
            rels.push("attribution/scores.tsv");
        }
        Method::BeliefSr => {
            let elicited: Vec<Option<RectificationPair>> = baseline
                .partition
                .incorrect
                .par_iter()
                .map(|item| {
                    let q = item.0.question_text();
                    let spurious = or_empty(elicitor.beliefs(model, vocab, &q, &item.1))?;
                    let true_beliefs = or_empty(elicitor.beliefs(model, vocab, &q, &item.0.answer))?;
                    Ok((!spurious.is_empty() && !true_beliefs.is_empty())
                        .then(|| RectificationPair { spurious, true_beliefs, ..bare(item) }))
                })
                .collect::<Result<_, ElicitError>>()
                .at(S)?;
            for (item, p) in baseline.partition.incorrect.iter().zip(elicited) {
                match p {
                    Some(p) => out.pairs.push(p),
                    None => out.dropped.push(item.0.id.clone()),
                }
            }
            if config.include_correct {
                let extra: Vec<EnhanceOnly> = baseline
                    .partition
                    .correct
                    .par_iter()
                    .map(|i| {
                        let beliefs = or_empty(elicitor.beliefs(model, vocab, &i.question_text(), &i.answer))?;
                        Ok(EnhanceOnly { instance: i.clone(), true_beliefs: beliefs })
                    })
                    .collect::<Result<_, ElicitError>>()
                    .at(S)?;
                out.extra = extra.into_iter().filter(|e| !e.true_beliefs.is_empty()).collect();
            }
            let mut dump = Vec::new();
            for p in &out.pairs {
                dump.extend(p.spurious.iter().map(|b| BeliefRecord::new(&p.instance.id, "incorrect", b)));
                dump.extend(p.true_beliefs.iter().map(|b| BeliefRecord::new(&p.instance.id, "correct", b)));
            }
            for e in &out.extra {
                dump.extend(e.true_beliefs.iter().map(|b| BeliefRecord::new(&e.instance.id, "correct", b)));
            }
            let mut w = BufWriter::new(fs::File::create(dir.create_parent("beliefs/beliefs.jsonl").at(S)?).at(S)?);
            write_belief_dump(&mut w, &dump).at(S)?;
            w.flush().at(S)?;
            rels.push("beliefs/beliefs.jsonl");
        }
    }
    write_json(dir, "beliefs/pairs.json", &out).at(S)?;
    dir.record(S, key, &rels, config.method == Method::AnswerSr)?;
    out.hashes = dir.hashes(S);
    Ok(out)
}

fn or_empty(r: Result<Vec<Belief>, ElicitError>) -> Result<Vec<Belief>, ElicitError> {
    match r {
        Err(ElicitError::EmptyBeliefSpace) => Ok(Vec::new()),
        other => other,
    }
}

/// Accuracy on held-out instances the vanilla model answers correctly.
pub struct HeldOutMonitor<'a> {
    pub vocab: &'a Vocab,
    pub instances: Vec<QAInstance>,
    pub decode: super::DecodeConfig,
}

impl HeldOutMonitor<'_> {
    /// Keeps the dev instances `vanilla` gets right.
    pub fn new<'a>(vanilla: &Transformer, vocab: &'a Vocab, dev: &[QAInstance], decode: super::DecodeConfig) -> Result<HeldOutMonitor<'a>, crate::model::ModelError> {
        let preds = predict_all(vanilla, vocab, dev, &decode)?;
        let instances = dev.iter().zip(&preds).filter(|(i, p)| exact_match(p, &i.answer)).map(|(i, _)| i.clone()).collect();
        Ok(HeldOutMonitor { vocab, instances, decode })
    }
}

impl Monitor<Transformer> for HeldOutMonitor<'_> {
    fn accuracy(&mut self, model: &Transformer) -> f64 {
        if self.instances.is_empty() {
            return 1.0;
        }
        match predict_all(model, self.vocab, &self.instances, &self.decode) {
            Ok(preds) => {
                let hits = self.instances.iter().zip(&preds).filter(|(i, p)| exact_match(p, &i.answer)).count();
                hits as f64 / self.instances.len() as f64
            }
            Err(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RectifySummary {
    examples: usize,
    batches: usize,
    steps: usize,
    stop: Option<crate::unlearning::StopReason>,
}

const RECTIFY_ARTIFACTS: [&str; 3] = ["rectified/model.json", "rectified/training_log.jsonl", "rectified/summary.json"];

/// Builds the method's batches and unlearns a copy of the vanilla model.
pub fn rectify_stage(
    dir: &mut RunDir,
    config: &RunConfig,
    prepared: &Prepared,
    baseline: &Baseline,
    elicited: &Elicited,
) -> Result<Rectified, RunError> {
    const S: Stage = Stage::Rectify;
    let key = key_of(&serde_json::json!({
        "stage": S.as_str(),
        "method": config.method,
        "unlearn": config.unlearn,
        "monitor": config.monitor,
        "include_correct": config.include_correct,
        "decode": config.decode,
        "elicit": elicited.hashes,
    }));
    if dir.cached(S, &key) {
        let ck = load_checkpoint(&dir.path("rectified/model.json")).at(S)?;
        let text = fs::read_to_string(dir.path("rectified/training_log.jsonl")).at(S)?;
        let log = TrainingLog::read_lines(text.as_bytes()).at(S)?;
        return Ok(Rectified { model: ck.model, log, hashes: dir.hashes(S) });
    }

    let vocab = &prepared.vocab;
    let template = config.template().map_err(|e| RunError::Config(e.0))?;
    let batches = if elicited.pairs.is_empty() {
        Vec::new()
    } else {
        match config.method {
            Method::BeliefSr => {
                let extra: &[EnhanceOnly] = if config.include_correct { &elicited.extra } else { &[] };
                build_unlearn_batches_with(&elicited.pairs, extra, &template, &config.unlearn, vocab)
            }
            Method::AnswerSr => {
                let extra: &[QAInstance] = if config.include_correct { &baseline.partition.correct } else { &[] };
                answer_sr_sets_with(&elicited.pairs, extra, &config.unlearn, vocab)
            }
            Method::KnowledgeSr => {
                knowledge_sr_sets(&elicited.pairs, &evidence_pool(&baseline.splits.train), &elicited.scores, &config.unlearn, vocab)
            }
        }
        .at(S)?
    };

    let mut monitor = if config.monitor {
        Some(HeldOutMonitor::new(&prepared.model, vocab, &baseline.splits.dev, config.decode).at(S)?)
    } else {
        None
    };
    let result = rectify_batches(&prepared.model, &batches, &config.unlearn, monitor.as_mut().map(|m| m as &mut dyn Monitor<Transformer>));
    let (model, log) = match result {
        Ok(r) => r,
        Err(UnlearnError::Training { step, source, log }) => {
            let p = dir.create_parent("rectified/training_log.jsonl").at(S)?;
            let _ = fs::File::create(p).and_then(|f| log.write_lines(BufWriter::new(f)));
            return Err(RunError::Stage { stage: S, message: format!("training aborted at step {step}: {source}") });
        }
        Err(e) => return Err(e).at(S),
    };
    save_checkpoint(&dir.create_parent("rectified/model.json").at(S)?, &model, vocab).at(S)?;
    let mut buf = Vec::new();
    log.write_lines(&mut buf).at(S)?;
    dir.write("rectified/training_log.jsonl", &buf).at(S)?;
    let summary = RectifySummary {
        examples: batches.iter().map(Vec::len).sum(),
        batches: batches.len(),
        steps: log.records.len(),
        stop: log.stop.clone(),
    };
    write_json(dir, "rectified/summary.json", &summary).at(S)?;
    dir.record(S, key, &RECTIFY_ARTIFACTS, false)?;
    Ok(Rectified { model, log, hashes: dir.hashes(S) })
}

const EVALUATE_ARTIFACTS: [&str; 4] =
    ["reports/report.md", "reports/report.tsv", "reports/reports.json", "reports/predictions.jsonl"];

/// Re-answers D✗, D✓ and eval with the rectified model and writes reports.
pub fn evaluate_stage(
    dir: &mut RunDir,
    config: &RunConfig,
    prepared: &Prepared,
    baseline: &Baseline,
    rectified: &Rectified,
) -> Result<(EvalReport, EvalReport), RunError> {
    const S: Stage = Stage::Evaluate;
    let key = key_of(&serde_json::json!({
        "stage": S.as_str(),
        "bootstrap": config.bootstrap,
        "decode": config.decode,
        "method": config.method,
        "baseline": baseline.hashes,
        "rectify": rectified.hashes,
    }));
    if dir.cached(S, &key) {
        let reports: Vec<EvalReport> = read_json(dir, "reports/reports.json").at(S)?;
        if let [v, r] = &reports[..] {
            return Ok((v.clone(), r.clone()));
        }
    }

    let incorrect: Vec<QAInstance> = baseline.partition.incorrect.iter().map(|(i, _)| i.clone()).collect();
    let groups = [("incorrect", &incorrect), ("correct", &baseline.partition.correct), ("eval", &baseline.splits.eval)];
    let mut recs = Vec::new();
    let mut outcomes = Outcomes::default();
    for (name, instances) in groups {
        let preds = predict_all(&rectified.model, &prepared.vocab, instances, &config.decode).at(S)?;
        let r = records(name, instances, &preds);
        let ok: Vec<bool> = r.iter().map(|x| x.correct).collect();
        match name {
            "incorrect" => outcomes.incorrect = ok,
            "correct" => outcomes.correct = ok,
            _ => outcomes.eval = ok,
        }
        recs.extend(r);
    }
    let vanilla = baseline.vanilla.clone();
    let mut report = EvalReport::new(config.method.label(), outcomes);
    report.compare(&vanilla, config.bootstrap.iterations, config.bootstrap.alpha, config.seed).at(S)?;
    let (md, tsv) = render_report(&[vanilla.clone(), report.clone()]);
    dir.write("reports/report.md", md.as_bytes()).at(S)?;
    dir.write("reports/report.tsv", tsv.as_bytes()).at(S)?;
    write_json(dir, "reports/reports.json", &[&vanilla, &report]).at(S)?;
    write_jsonl(&dir.create_parent("reports/predictions.jsonl").at(S)?, &recs).at(S)?;
    dir.record(S, key, &EVALUATE_ARTIFACTS, false)?;
    Ok((vanilla, report))
}

/// State after running some prefix of the stages.
#[derive(Debug, Clone, Default)]
pub struct Progress {
    pub prepared: Option<Prepared>,
    pub baseline: Option<Baseline>,
    pub elicited: Option<Elicited>,
    pub rectified: Option<Rectified>,
    pub reports: Option<(EvalReport, EvalReport)>,
}

fn check(config: &RunConfig) -> Result<(), RunError> {
    config.validate().map_err(|e| RunError::Config(e.0))
}

/// Runs stages `baseline-eval` through `last` in `dir` on a prepared model.
pub fn run_stages(
    dir: &mut RunDir,
    config: &RunConfig,
    prepared: Prepared,
    last: Stage,
    elicitor: &dyn Elicitor,
) -> Result<Progress, RunError> {
    let mut progress = Progress::default();
    if last >= Stage::BaselineEval {
        let baseline = baseline_eval(dir, config, &prepared)?;
        if last >= Stage::Elicit {
            let elicited = elicit_stage(dir, config, &prepared, &baseline, elicitor)?;
            if last >= Stage::Rectify {
                let rectified = rectify_stage(dir, config, &prepared, &baseline, &elicited)?;
                if last >= Stage::Evaluate {
                    progress.reports = Some(evaluate_stage(dir, config, &prepared, &baseline, &rectified)?);
                }
                progress.rectified = Some(rectified);
            }
            progress.elicited = Some(elicited);
        }
        progress.baseline = Some(baseline);
    }
    progress.prepared = Some(prepared);
    Ok(progress)
}

/// Runs every stage up to `last` in `config.out_dir`.
pub fn run_through(config: &RunConfig, last: Stage) -> Result<Progress, RunError> {
    check(config)?;
    let mut dir = RunDir::open(&config.out_dir, config)?;
    dir.save().at(Stage::Prepare)?;
    let prepared = prepare(&mut dir, config)?;
    let elicitor = BuiltinElicitor::from_config(config)?;
    run_stages(&mut dir, config, prepared, last, &elicitor)
}

fn result_of(dir: &RunDir, config: &RunConfig, progress: Progress) -> RunResult {
    let (vanilla, rectified) = progress.reports.expect("evaluate stage ran");
    let beliefs = dir.path("beliefs/beliefs.jsonl");
    RunResult {
        out_dir: dir.root.clone(),
        checkpoint: dir.path("rectified/model.json"),
        belief_dump: (config.method == Method::BeliefSr && beliefs.exists()).then_some(beliefs),
        report_md: dir.path("reports/report.md"),
        report_tsv: dir.path("reports/report.tsv"),
        vanilla,
        rectified,
        log: progress.rectified.map(|r| r.log).unwrap_or_default(),
    }
}

/// The full experiment: prepare, baseline, elicit, rectify, evaluate.
pub fn run_rectification(config: &RunConfig) -> Result<RunResult, RunError> {
    let progress = run_through(config, Stage::Evaluate)?;
    let dir = RunDir::open(&config.out_dir, config)?;
    Ok(result_of(&dir, config, progress))
}

/// Loads or builds the shared `prepare` stage in `config.out_dir`.
pub fn prepare_shared(config: &RunConfig) -> Result<Prepared, RunError> {
    check(config)?;
    let mut dir = RunDir::open(&config.out_dir, config)?;
    dir.save().at(Stage::Prepare)?;
    prepare(&mut dir, config)
}

/// Runs `baseline-eval` through `evaluate` for `config` in
/// `config.out_dir`, on a model prepared elsewhere.
pub fn run_variant(config: &RunConfig, prepared: &Prepared, elicitor: &dyn Elicitor) -> Result<RunResult, RunError> {
    check(config)?;
    let mut dir = RunDir::open(&config.out_dir, config)?;
    dir.manifest.upstream = Some(relative_to(&prepared.root, &config.out_dir));
    dir.manifest.stages.insert(
        Stage::Prepare.as_str().to_string(),
        StageRecord { key: "upstream".into(), skipped: true, artifacts: BTreeMap::new() },
    );
    dir.save().at(Stage::Prepare)?;
    let progress = run_stages(&mut dir, config, prepared.clone(), Stage::Evaluate, elicitor)?;
    Ok(result_of(&dir, config, progress))
}

fn relative_to(target: &Path, from: &Path) -> String {
    let t: Vec<_> = target.components().collect();
    let f: Vec<_> = from.components().collect();
    let common = t.iter().zip(&f).take_while(|(a, b)| a == b).count();
    let mut parts: Vec<String> = vec!["..".to_string(); f.len() - common];
    parts.extend(t[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    if parts.is_empty() {
        ".".to_string()
    } else {
        parts.join("/")
    }
}
