use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ElicitError, ElicitationQuery, Generator, PromptTemplate};
use crate::model::{sequence_logprob, top_k, DecodeState, LanguageModel, LogProb, NEG_INF};
use crate::vocab::{Token, Vocab};

/// Search hyperparameters shared by the FBBS, FBS and BBS generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbbsConfig {
    /// Sigmoid smoothness of the forward/backward weighting.
    pub alpha: f64,
    /// Candidates drawn from each hypothesis per step.
    pub beam_n: usize,
    /// Candidates kept globally per step, and beliefs returned.
    pub candidate_m: usize,
    pub max_belief_len: usize,
    pub lookahead_budget: usize,
}

impl Default for FbbsConfig {
    fn default() -> Self {
        FbbsConfig { alpha: 0.3, beam_n: 8, candidate_m: 4, max_belief_len: 12, lookahead_budget: 12 }
    }
}

impl FbbsConfig {
    pub fn validate(&self) -> Result<(), ElicitError> {
        let bad = |m: &str| Err(ElicitError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.beam_n == 0 {
            return bad("beam_n must be at least 1");
        }
        if self.candidate_m == 0 || self.candidate_m > self.beam_n {
            return bad("candidate_m must be in 1..=beam_n");
        }
        if self.lookahead_budget == 0 {
            return bad("lookahead_budget must be at least 1");
        }
        Ok(())
    }
}

/// A filled blank with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub tokens: Vec<Token>,
    pub text: String,
    /// `log P(belief | x_pre)`.
    #[serde(with = "crate::model::float_serde")]
    pub fwd_logprob: LogProb,
    /// `log P(y_suf | x_pre, belief)`.
    #[serde(with = "crate::model::float_serde")]
    pub back_logprob: LogProb,
    /// Score the generator ranked this belief by.
    #[serde(with = "crate::model::float_serde")]
    pub combined: f64,
    pub generator: Generator,
}

/// Partial belief during search.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<Token>,
    pub fwd_logprob: LogProb,
    pub back_logprob: LogProb,
    pub est_total_len: usize,
    pub combined: f64,
}

/// Ranked beliefs plus every completed candidate that was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub beliefs: Vec<Belief>,
    pub pool: Vec<Belief>,
}

/// `1 / (1 + exp(alpha (2t/T̂ - 1)))`.
pub fn lambda_weight(t: usize, t_hat: usize, alpha: f64) -> f64 {
    debug_assert!(t >= 1 && t <= t_hat);
    let x = alpha * (2.0 * t as f64 / t_hat as f64 - 1.0);
    1.0 / (1.0 + x.exp())
}

/// `λ fwd + (1-λ) back`; impossible if either side is impossible.
pub fn combined_score(fwd: LogProb, back: LogProb, t: usize, t_hat: usize, alpha: f64) -> f64 {
    if fwd == NEG_INF || back == NEG_INF {
        return NEG_INF;
    }
    let lambda = lambda_weight(t, t_hat, alpha);
    lambda * fwd + (1.0 - lambda) * back
}

/// Top `n` tokens, excluding PAD, BOS, EOS and UNK, which never appear
/// inside a belief, and `banned` if given.
fn ranked(lp: &[LogProb], n: usize, banned: Option<Token>) -> Vec<Token> {
    let mut masked = lp.to_vec();
    for v in masked.iter_mut().take(4) {
        *v = NEG_INF;
    }
    if let Some(b) = banned {
        masked[b.index()] = NEG_INF;
    }
    top_k(&masked, n).into_iter().map(|i| Token(i as u32)).collect()
}

fn best_token(lp: &[LogProb]) -> Option<Token> {
    ranked(lp, 1, None).first().copied()
}

/// The terminator cannot close an empty belief.
fn expansions(lp: &[LogProb], n: usize, partial_len: usize, terminator: Token) -> Vec<Token> {
    ranked(lp, n, (partial_len == 0).then_some(terminator))
}

fn lex_then_score(a: (&[Token], f64), b: (&[Token], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Backward score of `y_suf` after the belief consumed by `state`.
fn suffix_logprob(state: &dyn DecodeState<'_>, y_suf: &[Token]) -> Result<LogProb, ElicitError> {
    let mut s = state.fork();
    let mut total = 0.0;
    for (i, &t) in y_suf.iter().enumerate() {
        let lp = s.logprobs()[t.index()];
        if lp == NEG_INF {
            return Ok(NEG_INF);
        }
        total += lp;
        if i + 1 < y_suf.len() {
            s.push(t)?;
        }
    }
    Ok(total)
}

/// Greedy rollout from `state`, which has consumed `x_pre ++ partial ++ candidate`.
/// Returns the backward score and the estimated total belief length.
fn lookahead_from(
    state: &dyn DecodeState<'_>,
    query: &ElicitationQuery,
    belief_len: usize,
    config: &FbbsConfig,
) -> Result<(LogProb, usize), ElicitError> {
    let terminator = query.terminator();
    let mut s = state.fork();
    let mut rolled = 0;
    loop {
        if belief_len + rolled >= config.max_belief_len {
            // The length cap completes the belief.
            let back = suffix_logprob(s.as_ref(), &query.y_suf.tokens)?;
            return Ok((back, belief_len + rolled));
        }
        match best_token(s.logprobs()) {
            Some(t) if t == terminator => {
                let back = suffix_logprob(s.as_ref(), &query.y_suf.tokens)?;
                return Ok((back, belief_len + rolled));
            }
            Some(t) if rolled < config.lookahead_budget => {
                s.push(t)?;
                rolled += 1;
            }
            _ => return Ok((NEG_INF, belief_len + config.lookahead_budget)),
        }
    }
}

/// Backward score and estimated belief length for extending `partial`
/// with `candidate`, by greedy rollout to the terminator.
pub fn lookahead_backward<M: LanguageModel + ?Sized>(
    model: &M,
    query: &ElicitationQuery,
    partial: &[Token],
    candidate: Token,
    config: &FbbsConfig,
) -> Result<(LogProb, usize), ElicitError> {
    let mut ctx = query.x_pre.tokens.clone();
    ctx.extend_from_slice(partial);
    ctx.push(candidate);
    let state = model.start(&ctx)?;
    lookahead_from(state.as_ref(), query, partial.len() + 1, config)
}

#[derive(Clone, Copy, PartialEq)]
enum Score {
    Combined(f64),
    BackOnly,
}

struct Live<'a> {
    tokens: Vec<Token>,
    fwd: LogProb,
    state: Box<dyn DecodeState<'a> + 'a>,
}

#[derive(Clone)]
struct Candidate {
    parent: usize,
    tokens: Vec<Token>,
    fwd: LogProb,
    back: LogProb,
    combined: f64,
    complete: bool,
}

fn check_query(query: &ElicitationQuery) -> Result<(), ElicitError> {
    if query.x_pre.is_empty() {
        return Err(ElicitError::EmptyField("prefix prompt"));
    }
    if query.y_suf.is_empty() {
        return Err(ElicitError::EmptyField("suffix prompt"));
    }
    Ok(())
}

fn lookahead_search<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    query: &ElicitationQuery,
    config: &FbbsConfig,
    score: Score,
) -> Result<SearchOutcome, ElicitError> {
    config.validate()?;
    check_query(query)?;
    let generator = match score {
        Score::Combined(_) => Generator::Fbbs,
        Score::BackOnly => Generator::Bbs,
    };
    let terminator = query.terminator();
    let rank = |fwd: LogProb, back: LogProb, t: usize, t_hat: usize| match score {
        Score::Combined(alpha) => combined_score(fwd, back, t, t_hat, alpha),
        Score::BackOnly => back,
    };

    let mut live = vec![Live { tokens: Vec::new(), fwd: 0.0, state: model.start(&query.x_pre.tokens)? }];
    let mut finished: Vec<Candidate> = Vec::new();
    let mut pool: Vec<Candidate> = Vec::new();

    while !live.is_empty() {
        let mut cands = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = hyp.state.logprobs();
            for tok in expansions(lp, config.beam_n, hyp.tokens.len(), terminator) {
                let len = hyp.tokens.len();
                if tok == terminator {
                    let back = suffix_logprob(hyp.state.as_ref(), &query.y_suf.tokens)?;
                    cands.push(Candidate {
                        parent: h,
                        tokens: hyp.tokens.clone(),
                        fwd: hyp.fwd,
                        back,
                        combined: rank(hyp.fwd, back, len, len),
                        complete: true,
                    });
                    continue;
                }
                if len + 1 > config.max_belief_len {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let fwd = hyp.fwd + lp[tok.index()];
                let mut next = hyp.state.fork();
                next.push(tok)?;
                let (back, t_hat) = lookahead_from(next.as_ref(), query, len + 1, config)?;
                let complete = len + 1 == config.max_belief_len;
                cands.push(Candidate { parent: h, tokens, fwd, back, combined: rank(fwd, back, len + 1, t_hat), complete });
            }
        }
        cands.sort_by(|a, b| lex_then_score((&a.tokens, a.combined), (&b.tokens, b.combined)));
        for c in cands.iter().filter(|c| c.complete && c.combined > NEG_INF) {
            pool.push(c.clone());
        }
        cands.truncate(config.candidate_m);

        let mut next_live = Vec::new();
        for c in cands {
            if c.complete {
                finished.push(c);
                continue;
            }
            let parent = &live[c.parent];
            let mut state = parent.state.fork();
            state.push(*c.tokens.last().expect("non-empty"))?;
            next_live.push(Live { tokens: c.tokens, fwd: c.fwd, state });
        }
        live = next_live;
    }

    let to_belief = |c: &Candidate| Belief {
        text: vocab.detokenize(&c.tokens),
        tokens: c.tokens.clone(),
        fwd_logprob: c.fwd,
        back_logprob: c.back,
        combined: c.combined,
        generator,
    };
    finished.retain(|c| c.combined > NEG_INF);
    finished.sort_by(|a, b| lex_then_score((&a.tokens, a.combined), (&b.tokens, b.combined)));
    finished.truncate(config.candidate_m);
    if finished.is_empty() {
        return Err(ElicitError::EmptyBeliefSpace);
    }
    pool.sort_by(|a, b| lex_then_score((&a.tokens, a.combined), (&b.tokens, b.combined)));
    Ok(SearchOutcome { beliefs: finished.iter().map(to_belief).collect(), pool: pool.iter().map(to_belief).collect() })
}

/// Forward-backward beam search over fills of the blank.
///
/// Each step expands every surviving hypothesis to its `beam_n` most likely
/// next tokens. A candidate is scored by mixing its cumulative forward
/// log-probability with a backward log-probability of `y_suf`, obtained by
/// greedily rolling the belief out to the terminator. The global top
/// `candidate_m` survive. Choosing the terminator, or reaching
/// `max_belief_len`, completes a belief. Completed beliefs whose score is
/// `NEG_INF` are discarded.
pub fn fbbs_search<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    query: &ElicitationQuery,
    config: &FbbsConfig,
) -> Result<SearchOutcome, ElicitError> {
    lookahead_search(model, vocab, query, config, Score::Combined(config.alpha))
}

/// Same search as [`fbbs_search`], ranked by the backward score alone.
pub fn bbs_search<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    query: &ElicitationQuery,
    config: &FbbsConfig,
) -> Result<SearchOutcome, ElicitError> {
    lookahead_search(model, vocab, query, config, Score::BackOnly)
}

/// Standard beam search on the forward score, `beam_n` wide.
///
/// The terminator's log-probability counts toward the ranking score but
/// not toward the belief's `fwd_logprob`. Hypotheses reaching
/// `max_belief_len` finish without it. Search stops once no live
/// hypothesis can beat the best finished one.
pub fn fbs_search<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    query: &ElicitationQuery,
    config: &FbbsConfig,
) -> Result<SearchOutcome, ElicitError> {
    config.validate()?;
    check_query(query)?;
    let terminator = query.terminator();
    let width = config.beam_n;
    let mut live = vec![Live { tokens: Vec::new(), fwd: 0.0, state: model.start(&query.x_pre.tokens)? }];
    // (tokens, fwd, score)
    let mut finished: Vec<(Vec<Token>, LogProb, f64)> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<(usize, Token, Vec<Token>, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = hyp.state.logprobs();
            for tok in expansions(lp, width, hyp.tokens.len(), terminator) {
                let mut seq = hyp.tokens.clone();
                seq.push(tok);
                cands.push((h, tok, seq, hyp.fwd + lp[tok.index()]));
            }
        }
        cands.sort_by(|a, b| lex_then_score((&a.2, a.3), (&b.2, b.3)));
        cands.truncate(width);

        let mut next = Vec::new();
        for (h, tok, mut seq, score) in cands {
            let parent = &live[h];
            if tok == terminator {
                seq.pop();
                finished.push((seq, parent.fwd, score));
                continue;
            }
            if seq.len() >= config.max_belief_len {
                finished.push((seq, score, score));
                continue;
            }
            let mut state = parent.state.fork();
            state.push(tok)?;
            next.push(Live { tokens: seq, fwd: score, state });
        }
        live = next;
        let best_done = finished.iter().map(|f| f.2).fold(NEG_INF, f64::max);
        let best_live = live.iter().map(|h| h.fwd).fold(NEG_INF, f64::max);
        if !finished.is_empty() && best_done >= best_live {
            break;
        }
    }

    finished.sort_by(|a, b| lex_then_score((&a.0, a.2), (&b.0, b.2)));
    let mut beliefs = Vec::new();
    for (tokens, fwd, score) in finished.iter().take(config.candidate_m) {
        let mut ctx = query.x_pre.tokens.clone();
        ctx.extend_from_slice(tokens);
        let back = sequence_logprob(model, &ctx, &query.y_suf.tokens)?;
        beliefs.push(Belief {
            text: vocab.detokenize(tokens),
            tokens: tokens.clone(),
            fwd_logprob: *fwd,
            back_logprob: back,
            combined: *score,
            generator: Generator::Fbs,
        });
    }
    if beliefs.is_empty() {
        return Err(ElicitError::EmptyBeliefSpace);
    }
    let pool = beliefs.clone();
    Ok(SearchOutcome { beliefs, pool })
}

/// Prompt for post-hoc explanations: the answer is shown first, then the
/// model writes the supporting fact freely.
pub const POSTHOC_PROMPT: &str =
    "{INPUT} Therefore, the answer is {OUTPUT}. The concise fact to solve the problem is that";

/// Greedy explanation written after seeing both question and answer.
///
/// Generation stops at the query's terminator or after `max_len` tokens.
/// Scores are evaluated afterwards in the blank-filling frame of `query`,
/// and `combined` is their sum.
pub fn posthoc_explain<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    question: &str,
    answer: &str,
    query: &ElicitationQuery,
    max_len: usize,
) -> Result<Belief, ElicitError> {
    if question.trim().is_empty() {
        return Err(ElicitError::EmptyField("question"));
    }
    if answer.trim().is_empty() {
        return Err(ElicitError::EmptyField("answer"));
    }
    check_query(query)?;
    let prompt = POSTHOC_PROMPT.replacen(super::INPUT, question.trim(), 1).replacen(super::OUTPUT, answer.trim(), 1);
    let mut state = model.start(&vocab.tokenize(&prompt))?;
    let terminator = query.terminator();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        match expansions(state.logprobs(), 1, tokens.len(), terminator).first().copied() {
            Some(t) if t != terminator => {
                tokens.push(t);
                if tokens.len() < max_len {
                    state.push(t)?;
                }
            }
            _ => break,
        }
    }
    let fwd = sequence_logprob(model, &query.x_pre.tokens, &tokens)?;
    let mut ctx = query.x_pre.tokens.clone();
    ctx.extend_from_slice(&tokens);
    let back = sequence_logprob(model, &ctx, &query.y_suf.tokens)?;
    Ok(Belief {
        text: vocab.detokenize(&tokens),
        tokens,
        fwd_logprob: fwd,
        back_logprob: back,
        combined: fwd + back,
        generator: Generator::PostHoc,
    })
}

/// Dispatches to the generator's search and returns its ranked beliefs.
pub fn elicit<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    generator: Generator,
    question: &str,
    answer: &str,
    template: &PromptTemplate,
    config: &FbbsConfig,
) -> Result<Vec<Belief>, ElicitError> {
    let query = super::build_query(question, answer, template, vocab)?;
    match generator {
        Generator::Fbbs => Ok(fbbs_search(model, vocab, &query, config)?.beliefs),
        Generator::Fbs => Ok(fbs_search(model, vocab, &query, config)?.beliefs),
        Generator::Bbs => Ok(bbs_search(model, vocab, &query, config)?.beliefs),
        Generator::PostHoc => Ok(vec![posthoc_explain(model, vocab, question, answer, &query, config.max_belief_len)?]),
    }
}
