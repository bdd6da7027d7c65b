//! Word-level vocabulary and tokenizer.
//!
//! Text is split on whitespace, and each punctuation character in
//! [`PUNCTUATION`] becomes its own token. Detokenization re-inserts single
//! spaces and glues punctuation to the preceding word, so canonical text
//! (single spaces, no space before punctuation) round-trips exactly.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Characters that always form a token on their own.
pub const PUNCTUATION: &[char] = &['.', ',', '?', '!', ':', ';', '(', ')'];

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Index into a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const PAD: Token = Token(0);
    pub const BOS: Token = Token(1);
    pub const EOS: Token = Token(2);
    pub const UNK: Token = Token(3);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Token ids paired with their detokenized text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fixed word table. Ids 0..4 are always `<pad> <bos> <eos> <unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, Token>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut vocab = Vocab::new();
        for w in words {
            vocab.insert(&w);
        }
        vocab
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut vocab = Vocab { words: Vec::new(), ids: HashMap::new() };
        for w in [PAD, BOS, EOS, UNK] {
            vocab.insert(w);
        }
        vocab
    }

    /// Builds a vocabulary from every word of `texts`, in first-seen order.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut vocab = Vocab::new();
        for text in texts {
            for piece in split_words(text) {
                vocab.insert(piece);
            }
        }
        vocab
    }

    pub fn insert(&mut self, word: &str) -> Token {
        if let Some(&t) = self.ids.get(word) {
            return t;
        }
        let t = Token(self.words.len() as u32);
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), t);
        t
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, token: Token) -> &str {
        self.words.get(token.index()).map(String::as_str).unwrap_or(UNK)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(&self, token: Token) -> bool {
        token.index() < 4
    }

    /// Unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        split_words(text).map(|w| self.id(w).unwrap_or(Token::UNK)).collect()
    }

    /// Like [`Vocab::tokenize`] but reports out-of-vocabulary words.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<Token>, String> {
        split_words(text).map(|w| self.id(w).ok_or_else(|| w.to_string())).collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &t in tokens {
            let w = self.word(t);
            let attaches_left = w.len() == 1 && matches!(w.chars().next(), Some('.' | ',' | '?' | '!' | ':' | ';' | ')'));
            if !glue_next && !attaches_left {
                out.push(' ');
            }
            out.push_str(w);
            glue_next = w == "(";
        }
        out
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let tokens = self.tokenize(text);
        let text = self.detokenize(&tokens);
        TokenSequence { tokens, text }
    }

    pub fn sequence(&self, tokens: Vec<Token>) -> TokenSequence {
        let text = self.detokenize(&tokens);
        TokenSequence { tokens, text }
    }

    /// SHA-256 over the newline-joined word list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Splits text into word and punctuation pieces.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut pieces = Vec::new();
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if PUNCTUATION.contains(&c) {
                if start < i {
                    pieces.push(&chunk[start..i]);
                }
                pieces.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            pieces.push(&chunk[start..]);
        }
        pieces
    })
}
