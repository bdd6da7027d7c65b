//! Run configuration: TOML file, environment overrides, validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::world::{WorldConfig, DOMAINS};
use super::{DecodeConfig, PretrainConfig};
use crate::attribution::AttributionMethod;
use crate::elicitation::{FbbsConfig, Generator, PromptTemplate, DEFAULT_TEMPLATE};
use crate::unlearning::UnlearnConfig;

/// Environment variables starting with this prefix override config keys.
/// `BSR_UNLEARN__LEARNING_RATE=1e-4` sets `unlearn.learning_rate`.
pub const ENV_PREFIX: &str = "BSR_";

/// Rectification method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    BeliefSr,
    AnswerSr,
    KnowledgeSr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::BeliefSr, Method::AnswerSr, Method::KnowledgeSr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::BeliefSr => "belief-sr",
            Method::AnswerSr => "answer-sr",
            Method::KnowledgeSr => "knowledge-sr",
        }
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::BeliefSr => "Belief-SR",
            Method::AnswerSr => "Answer-SR",
            Method::KnowledgeSr => "Knowledge-SR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    /// Attribution methods without an implementation are recognised and
    /// rejected as `method not implemented: <name>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(m) = Method::ALL.into_iter().find(|m| m.as_str().eq_ignore_ascii_case(s)) {
            return Ok(m);
        }
        match s.parse::<AttributionMethod>() {
            Ok(a) if !a.is_implemented() => Err(format!("method not implemented: {s}")),
            _ => Err(format!("unknown method: {s}")),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated confound world; see [`super::world`].
    Synthetic,
    /// A JSONL dataset and a plain-text corpus.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub world: WorldConfig,
    /// Restricts train, dev and eval to one relation domain of the world.
    pub domain: Option<String>,
    pub dataset: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Pretrained checkpoint. Without one the model is pretrained on the corpus.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            world: WorldConfig::default(),
            domain: None,
            dataset: None,
            corpus: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Scorer for the knowledge baseline.
    pub method: AttributionMethod,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { method: AttributionMethod::GradDot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { iterations: 10_000, alpha: 0.01 }
    }
}

/// Everything a run depends on. `seed` drives every random choice: it is
/// copied into the world, pretraining and unlearning seeds on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub method: Method,
    pub generator: Generator,
    /// File holding the elicitation template; the built-in one when absent.
    pub template: Option<PathBuf>,
    /// Adds correctly answered training instances as enhance candidates.
    pub include_correct: bool,
    /// Reverts to the last good epoch when held-out accuracy collapses.
    pub monitor: bool,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub decode: DecodeConfig,
    pub fbbs: FbbsConfig,
    pub unlearn: UnlearnConfig,
    pub attribution: AttributionConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            method: Method::BeliefSr,
            generator: Generator::Fbbs,
            template: None,
            include_correct: false,
            monitor: true,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            decode: DecodeConfig::default(),
            fbbs: FbbsConfig::default(),
            unlearn: UnlearnConfig { learning_rate: 3e-4, beta: 1.0, ..UnlearnConfig::default() },
            attribution: AttributionConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn env_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v")).unwrap_or(Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Defaults, then the TOML document, then `BSR_*` overrides from `env`.
    pub fn from_sources<I: IntoIterator<Item = (String, String)>>(toml_text: Option<&str>, env: I) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| ConfigError(e.to_string()))?;
        if let Some(text) = toml_text {
            let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
            merge(&mut value, serde_json::to_value(table).map_err(|e| ConfigError(e.to_string()))?);
        }
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_lowercase(), v))).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let mut nested = env_value(&raw);
            for part in key.split("__").collect::<Vec<_>>().into_iter().rev() {
                nested = Value::Object([(part.to_string(), nested)].into_iter().collect());
            }
            merge(&mut value, nested);
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError(e.to_string()))?;
        Ok(config.resolved())
    }

    /// Reads `path` (if any) and the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), std::env::vars())
    }

    /// Copies the run seed into every sub-config.
    pub fn resolved(mut self) -> Self {
        self.data.world.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.unlearn.seed = self.seed;
        self
    }

    pub fn template(&self) -> Result<PromptTemplate, ConfigError> {
        let text = match &self.template {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError(format!("template {}: {e}", p.display())))?,
            None => DEFAULT_TEMPLATE.to_string(),
        };
        PromptTemplate::parse(&text).map_err(|e| ConfigError(format!("template: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        self.fbbs.validate().map_err(|e| ConfigError(format!("fbbs: {e}")))?;
        self.unlearn.validate().map_err(|e| ConfigError(format!("unlearn: {e}")))?;
        self.template()?;
        if self.method == Method::KnowledgeSr && !self.attribution.method.is_implemented() {
            return err(format!("method not implemented: {}", self.attribution.method));
        }
        if self.bootstrap.iterations < 1000 {
            return err("bootstrap.iterations must be at least 1000".into());
        }
        if !(self.bootstrap.alpha > 0.0 && self.bootstrap.alpha < 1.0) {
            return err("bootstrap.alpha must lie in (0, 1)".into());
        }
        if self.decode.beam_width == 0 || self.decode.max_new_tokens == 0 {
            return err("decode.beam_width and decode.max_new_tokens must be at least 1".into());
        }
        if self.pretrain.epochs > 0 && (self.pretrain.batch_size == 0 || self.pretrain.learning_rate <= 0.0) {
            return err("pretrain.batch_size and pretrain.learning_rate must be positive".into());
        }
        if let Some(d) = &self.data.domain {
            if !DOMAINS.iter().any(|(name, _)| name == d) {
                return err(format!("data.domain: unknown domain {d}"));
            }
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.world.n_entities == 0 {
                    return err("data.world.n_entities must be at least 1".into());
                }
            }
            DataSource::Files => {
                for (key, path) in [("data.dataset", &self.data.dataset), ("data.corpus", &self.data.corpus)] {
                    match path {
                        None => return err(format!("{key} is required when data.source = \"files\"")),
                        Some(p) if !p.exists() => return err(format!("{key}: {} does not exist", p.display())),
                        _ => {}
                    }
                }
                if let Some(p) = &self.data.checkpoint {
                    if !p.exists() {
                        return err(format!("data.checkpoint: {} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }
}
