//! Suffix-array index over a document collection.
//!
//! Two arrays are kept: one over the raw bytes, for exact substring
//! membership, and one over token ids, for the longest run of a token
//! sequence that appears verbatim. Documents are separated by a byte and
//! a token that no query can contain, so no match spans two documents.

use std::cmp::Ordering;

use crate::vocab::{Token, Vocab};

const BYTE_SEP: u8 = b'\n';
const TOKEN_SEP: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct CorpusIndex {
    documents: Vec<String>,
    bytes: Vec<u8>,
    byte_sa: Vec<u32>,
    tokens: Vec<u32>,
    token_sa: Vec<u32>,
}

fn suffix_array<T: Ord>(s: &[T]) -> Vec<u32> {
    let mut sa: Vec<u32> = (0..s.len() as u32).collect();
    sa.sort_unstable_by(|&a, &b| s[a as usize..].cmp(&s[b as usize..]));
    sa
}

/// Suffix-array range `[lo, hi)` of suffixes starting with `pat`.
fn sa_range<T: Ord>(s: &[T], sa: &[u32], pat: &[T]) -> (usize, usize) {
    let cmp = |pos: u32| {
        let suf = &s[pos as usize..];
        let n = suf.len().min(pat.len());
        match suf[..n].cmp(&pat[..n]) {
            Ordering::Equal if n < pat.len() => Ordering::Less,
            o => o,
        }
    };
    let lo = sa.partition_point(|&p| cmp(p) == Ordering::Less);
    let hi = lo + sa[lo..].partition_point(|&p| cmp(p) == Ordering::Equal);
    (lo, hi)
}

impl CorpusIndex {
    /// Documents must not contain newlines.
    pub fn build(documents: Vec<String>, vocab: &Vocab) -> Self {
        let mut bytes = Vec::new();
        let mut tokens = Vec::new();
        for d in &documents {
            debug_assert!(!d.contains('\n'));
            bytes.extend_from_slice(d.as_bytes());
            bytes.push(BYTE_SEP);
            tokens.extend(vocab.tokenize(d).into_iter().map(|t| t.0));
            tokens.push(TOKEN_SEP);
        }
        let byte_sa = suffix_array(&bytes);
        let token_sa = suffix_array(&tokens);
        CorpusIndex { documents, bytes, byte_sa, tokens, token_sa }
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Whether `s` occurs byte for byte inside some document.
    pub fn contains(&self, s: &str) -> bool {
        if s.contains('\n') {
            return false;
        }
        let (lo, hi) = sa_range(&self.bytes, &self.byte_sa, s.as_bytes());
        hi > lo
    }

    pub fn contains_tokens(&self, seq: &[Token]) -> bool {
        let pat: Vec<u32> = seq.iter().map(|t| t.0).collect();
        let (lo, hi) = sa_range(&self.tokens, &self.token_sa, &pat);
        hi > lo
    }

    /// Length of the longest contiguous run of `seq` found in the corpus.
    pub fn longest_match(&self, seq: &[Token]) -> usize {
        let pat: Vec<u32> = seq.iter().map(|t| t.0).collect();
        let mut best = 0;
        for start in 0..pat.len() {
            if pat.len() - start <= best {
                break;
            }
            // Extend while some suffix still matches; matches are prefix-closed.
            let mut len = best + 1;
            while start + len <= pat.len() {
                let (lo, hi) = sa_range(&self.tokens, &self.token_sa, &pat[start..start + len]);
                if hi == lo {
                    break;
                }
                best = len;
                len += 1;
            }
        }
        best
    }
}
