//! Belief elicitation: fill the blank between a question and an answer.
//!
//! A [`PromptTemplate`] splits into a prefix prompt that ends at the blank
//! and a suffix prompt that starts right after it. Beliefs are the token
//! sequences the model would place in the blank. Four generators are
//! available: forward-backward beam search ([`fbbs_search`]), its
//! forward-only and backward-only ablations, and a post-hoc explanation.

mod search;
mod template;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use search::{
    bbs_search, combined_score, elicit, fbbs_search, fbs_search, lambda_weight, lookahead_backward, posthoc_explain,
    BeamHypothesis, Belief, FbbsConfig, SearchOutcome, POSTHOC_PROMPT,
};
pub use template::{build_query, ElicitationQuery, PromptTemplate, BLANK, DEFAULT_TEMPLATE, INPUT, OUTPUT};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ElicitError {
    #[error("template is missing the {0} placeholder")]
    PlaceholderMissing(String),
    #[error("template has more than one {0} placeholder")]
    DuplicatePlaceholder(String),
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("no belief completed")]
    EmptyBeliefSpace,
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Generator {
    #[serde(rename = "fbbs")]
    Fbbs,
    #[serde(rename = "fbs")]
    Fbs,
    #[serde(rename = "bbs")]
    Bbs,
    #[serde(rename = "posthoc")]
    PostHoc,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::Fbbs, Generator::Fbs, Generator::Bbs, Generator::PostHoc];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Fbbs => "fbbs",
            Generator::Fbs => "fbs",
            Generator::Bbs => "bbs",
            Generator::PostHoc => "posthoc",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Generator::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown generator: {s}"))
    }
}

/// One line of a belief dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub instance_id: String,
    /// Which answer the belief was elicited for: "incorrect" or "correct".
    pub side: String,
    pub generator: Generator,
    pub text: String,
    pub tokens: Vec<crate::vocab::Token>,
    #[serde(with = "crate::model::float_serde")]
    pub fwd_logprob: f64,
    #[serde(with = "crate::model::float_serde")]
    pub back_logprob: f64,
    #[serde(with = "crate::model::float_serde")]
    pub combined: f64,
}

impl BeliefRecord {
    pub fn new(instance_id: &str, side: &str, belief: &Belief) -> Self {
        BeliefRecord {
            instance_id: instance_id.to_string(),
            side: side.to_string(),
            generator: belief.generator,
            text: belief.text.clone(),
            tokens: belief.tokens.clone(),
            fwd_logprob: belief.fwd_logprob,
            back_logprob: belief.back_logprob,
            combined: belief.combined,
        }
    }

    pub fn belief(&self) -> Belief {
        Belief {
            tokens: self.tokens.clone(),
            text: self.text.clone(),
            fwd_logprob: self.fwd_logprob,
            back_logprob: self.back_logprob,
            combined: self.combined,
            generator: self.generator,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_belief_dump<W: Write>(mut w: W, records: &[BeliefRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_belief_dump<R: BufRead>(r: R) -> Result<Vec<BeliefRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
