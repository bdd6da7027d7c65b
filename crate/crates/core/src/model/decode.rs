use super::{argmax, check_token, top_k, LanguageModel, LogProb, ModelError, NEG_INF};
use crate::vocab::Token;

/// Per-step log-probabilities of `continuation` under teacher forcing.
pub fn stepwise_logprobs<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[Token],
    continuation: &[Token],
) -> Result<Vec<LogProb>, ModelError> {
    let total = context.len() + continuation.len();
    if total > model.max_context() {
        return Err(ModelError::ContextTooLong { len: total, max: model.max_context() });
    }
    let mut state = model.start(context)?;
    let mut out = Vec::with_capacity(continuation.len());
    for (i, &t) in continuation.iter().enumerate() {
        check_token(t, model.vocab_size())?;
        out.push(state.logprobs()[t.index()]);
        if i + 1 < continuation.len() {
            state.push(t)?;
        }
    }
    Ok(out)
}

/// `log P(continuation | context)`, the sum of the stepwise terms.
/// The empty continuation scores 0.
pub fn sequence_logprob<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[Token],
    continuation: &[Token],
) -> Result<LogProb, ModelError> {
    Ok(stepwise_logprobs(model, context, continuation)?.iter().sum())
}

/// Result of a decoding run. `tokens` never includes the stop token.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<Token>,
    /// Stop token that ended generation, if any.
    pub stop: Option<Token>,
    /// True when the length budget ran out before a stop token.
    pub truncated: bool,
    /// Accumulated log-probability, including the stop token when present.
    pub score: LogProb,
}

/// Greedy decoding: the argmax token at each step, ties to the lowest id.
pub fn greedy_complete<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[Token],
    stop_tokens: &[Token],
    max_len: usize,
) -> Result<Completion, ModelError> {
    let mut state = model.start(context)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = state.logprobs();
        let next = Token(argmax(lp) as u32);
        score += lp[next.index()];
        if stop_tokens.contains(&next) {
            return Ok(Completion { tokens, stop: Some(next), truncated: false, score });
        }
        tokens.push(next);
        if tokens.len() == max_len {
            break;
        }
        state.push(next)?;
    }
    Ok(Completion { tokens, stop: None, truncated: true, score })
}

/// Textbook beam search without length normalization.
///
/// Each live hypothesis expands to its `width` most likely tokens, the
/// `width` best expansions survive, and hypotheses that emit a stop token
/// are set aside. Search ends when no live hypothesis can beat the best
/// finished one. Results are sorted by score, ties by token order.
pub fn beam_decode<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[Token],
    stop_tokens: &[Token],
    width: usize,
    max_len: usize,
) -> Result<Vec<Completion>, ModelError> {
    struct Live<'a> {
        tokens: Vec<Token>,
        score: LogProb,
        state: Box<dyn super::DecodeState<'a> + 'a>,
    }
    let width = width.max(1);
    let mut live = vec![Live { tokens: Vec::new(), score: 0.0, state: model.start(context)? }];
    let mut done: Vec<Completion> = Vec::new();

    for step in 0..max_len {
        let mut cands: Vec<(usize, Token, LogProb)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = hyp.state.logprobs();
            for v in top_k(lp, width) {
                cands.push((h, Token(v as u32), hyp.score + lp[v]));
            }
        }
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let ta = live[a.0].tokens.iter().chain(std::iter::once(&a.1));
                let tb = live[b.0].tokens.iter().chain(std::iter::once(&b.1));
                ta.cmp(tb)
            })
        });
        cands.truncate(width);

        let last_step = step + 1 == max_len;
        let mut next = Vec::new();
        for (h, tok, score) in cands {
            let parent = &live[h];
            if stop_tokens.contains(&tok) {
                done.push(Completion { tokens: parent.tokens.clone(), stop: Some(tok), truncated: false, score });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if last_step {
                done.push(Completion { tokens, stop: None, truncated: true, score });
                continue;
            }
            let mut state = parent.state.fork();
            state.push(tok)?;
            next.push(Live { tokens, score, state });
        }
        live = next;
        let best_done = done.iter().map(|c| c.score).fold(NEG_INF, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(NEG_INF, f64::max);
        if live.is_empty() || (!done.is_empty() && best_done >= best_live) {
            break;
        }
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(done)
}
