//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use belief_space::model::{LanguageModel, Transformer, TransformerConfig};
use belief_space::Token;

pub fn toks(ids: &[u32]) -> Vec<Token> {
    ids.iter().map(|&i| Token(i)).collect()
}

pub fn random_tiny(vocab: usize, seed: u64) -> Transformer {
    let cfg = TransformerConfig { vocab_size: vocab, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, max_positions: 32 };
    Transformer::with_init_scale(cfg, seed, 0.8)
}

/// Log-probability of `cont` after `ctx`, rebuilding the context each step.
pub fn naive_logprob<M: LanguageModel>(m: &M, ctx: &[Token], cont: &[Token]) -> f64 {
    let mut seq = ctx.to_vec();
    let mut total = 0.0;
    for &t in cont {
        total += m.next_token_logprobs(&seq).unwrap()[t.index()];
        seq.push(t);
    }
    total
}

/// Plain beam search on cumulative log-probability, recomputing from scratch.
///
/// Specials (ids < 4) are never proposed, an empty fill cannot end, so the
/// terminator is not proposed for it, the
/// terminator's probability counts in the score, a fill reaching `max_len`
/// ends as is, and search stops once the best finished score is at least
/// the best live one.
pub fn textbook_beam<M: LanguageModel>(
    m: &M,
    prefix: &[Token],
    terminator: Token,
    width: usize,
    max_len: usize,
) -> Vec<(Vec<Token>, f64)> {
    let mut beams: Vec<(Vec<Token>, f64)> = vec![(vec![], 0.0)];
    let mut done: Vec<(Vec<Token>, f64)> = vec![];
    while !beams.is_empty() {
        let mut all: Vec<(Vec<Token>, f64, bool)> = vec![];
        for (seq, score) in &beams {
            let mut ctx = prefix.to_vec();
            ctx.extend(seq);
            let lp = m.next_token_logprobs(&ctx).unwrap();
            let mut ids: Vec<usize> = (4..lp.len())
                .filter(|&i| lp[i].is_finite() && !(seq.is_empty() && i == terminator.index()))
                .collect();
            ids.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &i in ids.iter().take(width) {
                let tok = Token(i as u32);
                let mut s = seq.clone();
                s.push(tok);
                all.push((s, score + lp[i], tok == terminator));
            }
        }
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(width);
        beams.clear();
        for (mut s, score, term) in all {
            if term {
                s.pop();
                done.push((s, score));
            } else if s.len() >= max_len {
                done.push((s, score));
            } else {
                beams.push((s, score));
            }
        }
        let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        let best_live = beams.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        if !done.is_empty() && best_done >= best_live {
            break;
        }
    }
    done.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    done
}

/// Every fill of length 1..=max_len over `alphabet`, with
/// `log P(b | prefix) + log P(suffix | prefix, b)`.
pub fn exhaustive_fills<M: LanguageModel>(
    m: &M,
    prefix: &[Token],
    suffix: &[Token],
    alphabet: &[Token],
    max_len: usize,
) -> Vec<(Vec<Token>, f64)> {
    let mut fills: Vec<Vec<Token>> = alphabet.iter().map(|&t| vec![t]).collect();
    let mut frontier = fills.clone();
    for _ in 1..max_len {
        let mut next = vec![];
        for f in &frontier {
            for &t in alphabet {
                let mut g = f.clone();
                g.push(t);
                next.push(g);
            }
        }
        fills.extend(next.iter().cloned());
        frontier = next;
    }
    fills
        .into_iter()
        .map(|b| {
            let fwd = naive_logprob(m, prefix, &b);
            let mut ctx = prefix.to_vec();
            ctx.extend(&b);
            let back = naive_logprob(m, &ctx, suffix);
            (b, fwd + back)
        })
        .collect()
}

/// Longest run of consecutive belief tokens found in some document,
/// by checking every subspan.
pub fn brute_force_longest(belief: &[Token], docs: &[Vec<Token>]) -> usize {
    let mut best = 0;
    for i in 0..belief.len() {
        for j in i + 1..=belief.len() {
            let span = &belief[i..j];
            if docs.iter().any(|d| d.windows(span.len()).any(|w| w == span)) {
                best = best.max(j - i);
            }
        }
    }
    best
}
