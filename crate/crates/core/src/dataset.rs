//! QA instances and their line-delimited JSON file format.
//!
//! Each line holds one object:
//!
//! ```text
//! {"id": "q1", "question": "...", "choices": [{"label": "A", "text": "..."}],
//!  "answer": "...", "evidence": ["..."]}
//! ```
//!
//! `choices` and `evidence` are optional. Blank lines are skipped.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Prompt used to answer a question directly, without a belief.
pub const ANSWER_PROMPT: &str = "{INPUT} Answer:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
}

impl QAInstance {
    pub fn new(id: &str, question: &str, answer: &str) -> Self {
        QAInstance { id: id.into(), question: question.into(), choices: None, answer: answer.into(), evidence: None }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        if let Some(choices) = &self.choices {
            let hits = choices.iter().filter(|c| c.text == self.answer).count();
            if hits != 1 {
                return Err(format!("answer must match exactly one choice, matched {hits}"));
            }
        }
        Ok(())
    }

    /// Question with its choices, as shown to the model:
    /// `question (A) first, (B) second`.
    pub fn question_text(&self) -> String {
        match &self.choices {
            Some(choices) if !choices.is_empty() => {
                let rendered: Vec<String> = choices.iter().map(|c| format!("({}) {}", c.label, c.text)).collect();
                format!("{} {}", self.question.trim(), rendered.join(", "))
            }
            _ => self.question.trim().to_string(),
        }
    }

    /// Direct answering prompt.
    pub fn answer_prompt(&self) -> String {
        ANSWER_PROMPT.replacen("{INPUT}", &self.question_text(), 1)
    }
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<QAInstance>, DatasetError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Schema { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: QAInstance = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Schema { line: line_no, message: e.to_string() })?;
        inst.validate().map_err(|message| DatasetError::Schema { line: line_no, message })?;
        if !seen.insert(inst.id.clone()) {
            return Err(DatasetError::DuplicateId { line: line_no, id: inst.id });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAInstance>, DatasetError> {
    let f = fs::File::open(path)
        .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_dataset(BufReader::new(f))
}

pub fn write_dataset<W: Write>(mut w: W, instances: &[QAInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Plain-text corpus: one document per line, blank lines skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}
