use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ElicitError;
use crate::vocab::{Token, TokenSequence, Vocab};

pub const INPUT: &str = "{INPUT}";
pub const OUTPUT: &str = "{OUTPUT}";
/// Marks the blank in a template file.
pub const BLANK: &str = "_____";

/// Default blank-filling prompt, in template-file form.
pub const DEFAULT_TEMPLATE: &str =
    "{INPUT} The concise fact to solve the problem is that _____. Therefore, the answer is {OUTPUT}.";

/// Blank-filling prompt split at the blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix_pattern: String,
    pub suffix_pattern: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("default template is well formed")
    }
}

impl PromptTemplate {
    pub fn new(prefix_pattern: &str, suffix_pattern: &str) -> Result<Self, ElicitError> {
        check_placeholder(prefix_pattern, INPUT)?;
        check_placeholder(suffix_pattern, OUTPUT)?;
        Ok(PromptTemplate { prefix_pattern: prefix_pattern.trim().to_string(), suffix_pattern: suffix_pattern.trim().to_string() })
    }

    /// Parses the one-line file form `prefix _____ suffix`.
    pub fn parse(text: &str) -> Result<Self, ElicitError> {
        let text = text.trim();
        let (prefix, suffix) = text
            .split_once(BLANK)
            .ok_or_else(|| ElicitError::PlaceholderMissing(BLANK.to_string()))?;
        let suffix = suffix.trim_start_matches('_');
        Self::new(prefix, suffix)
    }

    pub fn load(path: &Path) -> Result<Self, ElicitError> {
        let text = std::fs::read_to_string(path).map_err(|e| ElicitError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// File form of the template, accepted by [`PromptTemplate::parse`].
    pub fn to_file_text(&self) -> String {
        format!("{} {BLANK}{}", self.prefix_pattern, self.suffix_pattern)
    }

    pub fn render_prefix(&self, question: &str) -> String {
        self.prefix_pattern.replacen(INPUT, question.trim(), 1)
    }

    pub fn render_suffix(&self, answer: &str) -> String {
        self.suffix_pattern.replacen(OUTPUT, answer.trim(), 1)
    }
}

fn check_placeholder(pattern: &str, placeholder: &str) -> Result<(), ElicitError> {
    match pattern.matches(placeholder).count() {
        1 => Ok(()),
        0 => Err(ElicitError::PlaceholderMissing(placeholder.to_string())),
        _ => Err(ElicitError::DuplicatePlaceholder(placeholder.to_string())),
    }
}

/// Prefix and suffix prompts around the blank for one (question, answer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElicitationQuery {
    pub x_pre: TokenSequence,
    pub y_suf: TokenSequence,
    /// Positions of the answer tokens within `y_suf`.
    pub answer_span: Range<usize>,
}

impl ElicitationQuery {
    /// First token of the suffix; it closes the blank.
    pub fn terminator(&self) -> Token {
        self.y_suf.tokens[0]
    }

    /// Loss mask over `belief ++ y_suf`: belief and answer tokens only.
    pub fn target_mask(&self, belief_len: usize) -> Vec<bool> {
        let mut mask = vec![true; belief_len];
        mask.extend((0..self.y_suf.len()).map(|i| self.answer_span.contains(&i)));
        mask
    }
}

pub fn build_query(
    question: &str,
    answer: &str,
    template: &PromptTemplate,
    vocab: &Vocab,
) -> Result<ElicitationQuery, ElicitError> {
    check_placeholder(&template.prefix_pattern, INPUT)?;
    check_placeholder(&template.suffix_pattern, OUTPUT)?;
    if question.trim().is_empty() {
        return Err(ElicitError::EmptyField("question"));
    }
    if answer.trim().is_empty() {
        return Err(ElicitError::EmptyField("answer"));
    }
    let prefix = template.render_prefix(question);
    let x_pre = TokenSequence { tokens: vocab.tokenize(&prefix), text: prefix };

    let (before, after) = template.suffix_pattern.split_once(OUTPUT).expect("checked above");
    let head = vocab.tokenize(before);
    let ans = vocab.tokenize(answer);
    let tail = vocab.tokenize(after);
    let answer_span = head.len()..head.len() + ans.len();
    let tokens: Vec<Token> = head.into_iter().chain(ans).chain(tail).collect();
    if tokens.is_empty() {
        return Err(ElicitError::EmptyField("suffix prompt"));
    }
    let y_suf = TokenSequence { tokens, text: template.render_suffix(answer) };
    Ok(ElicitationQuery { x_pre, y_suf, answer_span })
}
