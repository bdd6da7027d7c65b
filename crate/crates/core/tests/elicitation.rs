mod common;

use belief_space::elicitation::{
    bbs_search, build_query, combined_score, fbbs_search, fbs_search, lambda_weight, lookahead_backward,
    posthoc_explain, read_belief_dump, write_belief_dump, BeliefRecord, ElicitError, ElicitationQuery, FbbsConfig,
    Generator, PromptTemplate, DEFAULT_TEMPLATE, POSTHOC_PROMPT,
};
use belief_space::model::toy::{ChainModel, TableModel};
use belief_space::model::{greedy_complete, sequence_logprob, LanguageModel, NEG_INF};
use belief_space::{Token, TokenSequence, Vocab};
use common::{naive_logprob, random_tiny, textbook_beam, toks};
use proptest::prelude::*;

fn query(x_pre: &[u32], y_suf: &[u32]) -> ElicitationQuery {
    ElicitationQuery {
        x_pre: TokenSequence { tokens: toks(x_pre), text: String::new() },
        y_suf: TokenSequence { tokens: toks(y_suf), text: String::new() },
        answer_span: 1..y_suf.len(),
    }
}

fn numeric_vocab(n: usize) -> Vocab {
    let mut v = Vocab::new();
    while v.len() < n {
        let w = if v.len() == 4 { ".".to_string() } else { format!("w{}", v.len()) };
        v.insert(&w);
    }
    v
}

// Ids: 4 ".", 5 "x" (question), 6 "ans", 7 "a", 8 "b", 9 "c".
fn chain() -> ChainModel {
    let l = |a: u32, b: u32| (Token(a), Token(b));
    ChainModel::new(10, &[l(5, 7), l(7, 8), l(8, 4), l(4, 6), l(6, 4)], Token::EOS)
}

#[test]
fn default_prompt_example() {
    let t = PromptTemplate::default();
    let q = "Do swallows have gills?";
    let vocab = Vocab::from_texts([q, DEFAULT_TEMPLATE, "Yes"]);
    let query = build_query(q, "Yes", &t, &vocab).unwrap();
    assert_eq!(query.x_pre.text, "Do swallows have gills? The concise fact to solve the problem is that");
    assert_eq!(query.y_suf.text, ". Therefore, the answer is Yes.");
    assert_eq!(vocab.detokenize(&query.y_suf.tokens), ". Therefore, the answer is Yes.");
    assert_eq!(vocab.detokenize(&query.x_pre.tokens), query.x_pre.text);
    assert_eq!(query.terminator(), vocab.id(".").unwrap());
    assert_eq!(&query.y_suf.tokens[query.answer_span.clone()], &[vocab.id("Yes").unwrap()]);
    assert_eq!(query.target_mask(2), vec![true, true, false, false, false, false, false, false, true, false]);
}

#[test]
fn build_query_errors() {
    let t = PromptTemplate::default();
    let v = Vocab::new();
    assert_eq!(build_query("q?", "", &t, &v), Err(ElicitError::EmptyField("answer")));
    assert_eq!(build_query("  ", "a", &t, &v), Err(ElicitError::EmptyField("question")));
    let broken = PromptTemplate { prefix_pattern: "{INPUT} is".into(), suffix_pattern: ". so".into() };
    assert!(matches!(build_query("q", "a", &broken, &v), Err(ElicitError::PlaceholderMissing(p)) if p == "{OUTPUT}"));
    assert!(matches!(PromptTemplate::new("no slot", ". {OUTPUT}"), Err(ElicitError::PlaceholderMissing(_))));
    assert!(matches!(PromptTemplate::new("{INPUT} {INPUT}", "{OUTPUT}"), Err(ElicitError::DuplicatePlaceholder(_))));
    assert!(matches!(PromptTemplate::parse("{INPUT} no blank {OUTPUT}"), Err(ElicitError::PlaceholderMissing(_))));
}

#[test]
fn template_file_round_trip() {
    let t = PromptTemplate::default();
    assert_eq!(t.prefix_pattern, "{INPUT} The concise fact to solve the problem is that");
    assert_eq!(t.suffix_pattern, ". Therefore, the answer is {OUTPUT}.");
    assert_eq!(PromptTemplate::parse(&t.to_file_text()).unwrap(), t);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.txt");
    std::fs::write(&p, format!("{DEFAULT_TEMPLATE}\n")).unwrap();
    assert_eq!(PromptTemplate::load(&p).unwrap(), t);
}

#[test]
fn lambda_examples() {
    assert_eq!(lambda_weight(5, 10, 0.3), 0.5);
    assert_eq!(lambda_weight(5, 10, 7.0), 0.5);
    assert!((lambda_weight(1, 10, 1e-12) - 0.5).abs() < 1e-12);
    // Oracle: the logistic function written through tanh.
    let oracle = |t: f64, th: f64, a: f64| 0.5 * (1.0 - (a * (2.0 * t / th - 1.0) / 2.0).tanh());
    assert!((lambda_weight(1, 10, 0.3) - oracle(1.0, 10.0, 0.3)).abs() < 1e-15);
    assert!((lambda_weight(1, 10, 0.3) - 0.55971).abs() < 5e-6);
    assert_eq!(combined_score(-1.0, -3.0, 5, 10, 0.3), -2.0);
    assert_eq!(combined_score(-1.0, NEG_INF, 1, 10, 0.3), NEG_INF);
    assert_eq!(combined_score(NEG_INF, -1.0, 1, 10, 0.3), NEG_INF);
    let l = oracle(1.0, 10.0, 0.3);
    assert!((combined_score(-1.0, -2.0, 1, 10, 0.3) - (-l - 2.0 * (1.0 - l))).abs() < 1e-12);
    assert!((combined_score(-1.0, -2.0, 1, 10, 0.3) - (-1.44029)).abs() < 5e-6);
}

#[test]
fn lookahead_on_point_mass_model() {
    let m = chain();
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig::default();
    assert_eq!(lookahead_backward(&m, &q, &toks(&[7]), Token(8), &cfg).unwrap(), (0.0, 2));
    // Rollout from "a" runs through "b" before the terminator.
    assert_eq!(lookahead_backward(&m, &q, &[], Token(7), &cfg).unwrap(), (0.0, 2));
}

#[test]
fn lookahead_budget_exhausted() {
    // a -> b -> a -> ... never reaches the terminator.
    let m = ChainModel::new(10, &[(Token(7), Token(8)), (Token(8), Token(7))], Token(7));
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig { lookahead_budget: 3, max_belief_len: 50, ..FbbsConfig::default() };
    assert_eq!(lookahead_backward(&m, &q, &toks(&[7, 8]), Token(7), &cfg).unwrap(), (NEG_INF, 2 + 1 + 3));
}

fn three_token_model() -> TableModel {
    // Ids 4 ".", 5 x, 6 ans, 7 p, 8 q.
    let mut m = TableModel::new(9, &[0.0, 0.0, 0.0, 0.0, 0.2, 0.1, 0.3, 0.2, 0.2]);
    m.set(&toks(&[5]), &[0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.6, 0.3]);
    m.set(&toks(&[7]), &[0.0, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.2, 0.5]);
    m.set(&toks(&[8]), &[0.0, 0.0, 0.0, 0.0, 0.7, 0.0, 0.1, 0.1, 0.1]);
    m.set(&toks(&[8, 4]), &[0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.8, 0.1, 0.0]);
    m
}

#[test]
fn lookahead_matches_stepwise_oracle() {
    let m = three_token_model();
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig::default();
    // After x p, greedy picks q (0.5), then "." (0.7): belief [p, q].
    let (back, t_hat) = lookahead_backward(&m, &q, &[], Token(7), &cfg).unwrap();
    assert_eq!(t_hat, 2);
    let oracle = naive_logprob(&m, &toks(&[5, 7, 8]), &toks(&[4, 6]));
    assert!((back - oracle).abs() < 1e-12);
    assert!((back - (0.7f64.ln() + 0.8f64.ln())).abs() < 1e-12);
}

#[test]
fn fbbs_forced_path() {
    let m = chain();
    let vocab = numeric_vocab(10);
    let out = fbbs_search(&m, &vocab, &query(&[5], &[4, 6]), &FbbsConfig::default()).unwrap();
    assert_eq!(out.beliefs.len(), 1);
    assert_eq!(out.beliefs[0].tokens, toks(&[7, 8]));
    assert_eq!(out.beliefs[0].combined, 0.0);
    assert_eq!(out.beliefs[0].generator, Generator::Fbbs);
}

#[test]
fn fbbs_zero_length_budget() {
    let cfg = FbbsConfig { max_belief_len: 0, ..FbbsConfig::default() };
    let r = fbbs_search(&chain(), &numeric_vocab(10), &query(&[5], &[4, 6]), &cfg);
    assert_eq!(r, Err(ElicitError::EmptyBeliefSpace));
}

/// Ids 4 ".", 5 x, 6 ans, 7 p, 8 q, 9 r. Beliefs are exactly two tokens;
/// `back[i][j]` is P(ans | x b_i b_j .).
fn two_slot_model(back: [[f64; 3]; 3]) -> TableModel {
    let mut m = TableModel::new(10, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    m.set(&toks(&[5]), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.3, 0.2]);
    for i in 0..3u32 {
        m.set(&toks(&[5, 7 + i]), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.3, 0.1]);
        for j in 0..3u32 {
            let mut only_dot = [0.0; 10];
            only_dot[4] = 1.0;
            m.set(&toks(&[5, 7 + i, 7 + j]), &only_dot);
            let b = back[i as usize][j as usize];
            let mut ans = [0.0; 10];
            ans[6] = b;
            ans[7] = 1.0 - b;
            m.set(&toks(&[7 + i, 7 + j, 4]), &ans);
        }
    }
    m
}

fn exhaustive_argmax<M: LanguageModel>(m: &M, q: &ElicitationQuery) -> (Vec<Token>, f64) {
    let mut best = (vec![], f64::NEG_INFINITY);
    for i in 7..10 {
        for j in 7..10 {
            let b = toks(&[i, j]);
            let joint = naive_logprob(m, &q.x_pre.tokens, &b)
                + naive_logprob(m, &[q.x_pre.tokens.clone(), b.clone()].concat(), &q.y_suf.tokens);
            if joint > best.1 {
                best = (b, joint);
            }
        }
    }
    best
}

#[test]
fn fbbs_top1_matches_exhaustive_joint_argmax() {
    let mut back = [[0.05; 3]; 3];
    back[2][2] = 0.95;
    let m = two_slot_model(back);
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig { beam_n: 9, candidate_m: 9, max_belief_len: 2, ..FbbsConfig::default() };
    let out = fbbs_search(&m, &numeric_vocab(10), &q, &cfg).unwrap();
    let (oracle, _) = exhaustive_argmax(&m, &q);
    assert_eq!(oracle, toks(&[9, 9]));
    assert_eq!(out.beliefs[0].tokens, oracle);
    assert_eq!(out.pool.len(), 9);
    // The forward-only search prefers the likelier fill.
    let fbs = fbs_search(&m, &numeric_vocab(10), &q, &cfg).unwrap();
    assert_eq!(fbs.beliefs[0].tokens, toks(&[7, 7]));
}

#[test]
fn bbs_matches_brute_force_ordering() {
    let back = [[0.11, 0.42, 0.27], [0.05, 0.93, 0.61], [0.33, 0.18, 0.74]];
    let m = two_slot_model(back);
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig { beam_n: 9, candidate_m: 9, max_belief_len: 2, ..FbbsConfig::default() };
    let out = bbs_search(&m, &numeric_vocab(10), &q, &cfg).unwrap();
    let mut oracle: Vec<(Vec<Token>, f64)> = (7..10)
        .flat_map(|i| (7..10).map(move |j| toks(&[i, j])))
        .map(|b| {
            let ctx = [vec![Token(5)], b.clone()].concat();
            let v = naive_logprob(&m, &ctx, &toks(&[4, 6]));
            (b, v)
        })
        .collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let got: Vec<Vec<Token>> = out.beliefs.iter().map(|b| b.tokens.clone()).collect();
    let want: Vec<Vec<Token>> = oracle.iter().map(|o| o.0.clone()).collect();
    assert_eq!(got, want);
    assert_eq!(out.beliefs[0].tokens, toks(&[8, 8]));
    assert!(out.beliefs.iter().all(|b| b.generator == Generator::Bbs && b.combined == b.back_logprob));
}

#[test]
fn bbs_dominance_and_degenerate_case() {
    let mut back = [[0.0; 3]; 3];
    back[2][1] = 1.0;
    let m = two_slot_model(back);
    let q = query(&[5], &[4, 6]);
    let cfg = FbbsConfig { beam_n: 3, candidate_m: 3, max_belief_len: 2, ..FbbsConfig::default() };
    let out = bbs_search(&m, &numeric_vocab(10), &q, &cfg).unwrap();
    assert_eq!(out.beliefs[0].tokens, toks(&[9, 8]));
    assert_eq!(out.beliefs[0].back_logprob, 0.0);
    assert_eq!(out.beliefs.len(), 1);

    let dead = two_slot_model([[0.0; 3]; 3]);
    assert_eq!(bbs_search(&dead, &numeric_vocab(10), &q, &cfg), Err(ElicitError::EmptyBeliefSpace));
    assert_eq!(fbbs_search(&dead, &numeric_vocab(10), &q, &cfg), Err(ElicitError::EmptyBeliefSpace));
}

#[test]
fn fbs_matches_textbook_beam_on_random_models() {
    let vocab = numeric_vocab(12);
    for seed in 0..20 {
        let m = random_tiny(12, seed);
        let q = query(&[5, 6], &[4, 7]);
        for width in [1, 3, 5] {
            let cfg = FbbsConfig { beam_n: width, candidate_m: width, max_belief_len: 5, ..FbbsConfig::default() };
            let got: Vec<Vec<Token>> =
                fbs_search(&m, &vocab, &q, &cfg).unwrap().beliefs.into_iter().map(|b| b.tokens).collect();
            let want: Vec<Vec<Token>> =
                textbook_beam(&m, &q.x_pre.tokens, Token(4), width, 5).into_iter().take(width).map(|d| d.0).collect();
            assert_eq!(got, want, "seed {seed} width {width}");
        }
    }
}

#[test]
fn fbs_width_one_is_greedy() {
    let vocab = numeric_vocab(12);
    for seed in 0..10 {
        let m = random_tiny(12, 100 + seed);
        let q = query(&[5, 6], &[4, 7]);
        let cfg = FbbsConfig { beam_n: 1, candidate_m: 1, max_belief_len: 6, ..FbbsConfig::default() };
        let fbs = fbs_search(&m, &vocab, &q, &cfg).unwrap();
        // Greedy over the same alphabet: specials masked out.
        let masked = MaskSpecials(&m);
        let g = greedy_complete(&masked, &q.x_pre.tokens, &[Token(4)], 6).unwrap();
        assert_eq!(fbs.beliefs[0].tokens, g.tokens, "seed {seed}");
    }
}

struct MaskSpecials<'a, M>(&'a M);

impl<M: LanguageModel> belief_space::model::Conditional for MaskSpecials<'_, M> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn conditional(&self, context: &[Token]) -> Vec<f64> {
        let mut lp = self.0.next_token_logprobs(context).unwrap();
        for v in lp.iter_mut().take(4) {
            *v = NEG_INF;
        }
        // The terminator cannot close an empty fill after the two-token prefix.
        if context.len() == 2 {
            lp[4] = NEG_INF;
        }
        lp
    }
}

#[test]
fn fbs_forced_chain() {
    let out = fbs_search(&chain(), &numeric_vocab(10), &query(&[5], &[4, 6]), &FbbsConfig::default()).unwrap();
    assert_eq!(out.beliefs.len(), 1);
    assert_eq!(out.beliefs[0].tokens, toks(&[7, 8]));
    assert_eq!(out.beliefs[0].generator, Generator::Fbs);
}

fn posthoc_setup() -> (ChainModel, Vocab, ElicitationQuery) {
    let vocab = Vocab::from_texts([POSTHOC_PROMPT, DEFAULT_TEMPLATE, "x a b yes"]);
    let id = |w: &str| vocab.id(w).unwrap();
    let m = ChainModel::new(vocab.len(), &[(id("that"), id("a")), (id("a"), id("b")), (id("b"), id("."))], Token::EOS);
    let q = build_query("x", "yes", &PromptTemplate::default(), &vocab).unwrap();
    (m, vocab, q)
}

#[test]
fn posthoc_forced_and_deterministic() {
    let (m, vocab, q) = posthoc_setup();
    let a = posthoc_explain(&m, &vocab, "x", "yes", &q, 10).unwrap();
    assert_eq!(a.text, "a b");
    assert_eq!(a.generator, Generator::PostHoc);
    assert_eq!(a.fwd_logprob, 0.0);
    let b = posthoc_explain(&m, &vocab, "x", "yes", &q, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(posthoc_explain(&m, &vocab, "x", "", &q, 10), Err(ElicitError::EmptyField("answer")));
    assert_eq!(posthoc_explain(&m, &vocab, "x", "yes", &q, 1).unwrap().text, "a");
}

#[test]
fn posthoc_scores_on_tiny_model() {
    let vocab = Vocab::from_texts([POSTHOC_PROMPT, DEFAULT_TEMPLATE, "x yes"]);
    let m = random_tiny(vocab.len(), 3);
    let q = build_query("x", "yes", &PromptTemplate::default(), &vocab).unwrap();
    let b = posthoc_explain(&m, &vocab, "x", "yes", &q, 4).unwrap();
    assert!((b.fwd_logprob - naive_logprob(&m, &q.x_pre.tokens, &b.tokens)).abs() <= 1e-9);
    let ctx = [q.x_pre.tokens.clone(), b.tokens.clone()].concat();
    assert!((b.back_logprob - naive_logprob(&m, &ctx, &q.y_suf.tokens)).abs() <= 1e-9);
}

#[test]
fn belief_dump_round_trip() {
    let (m, vocab, q) = posthoc_setup();
    let b = posthoc_explain(&m, &vocab, "x", "yes", &q, 10).unwrap();
    let recs = vec![BeliefRecord::new("i1", "correct", &b), BeliefRecord::new("i2", "incorrect", &b)];
    let mut buf = Vec::new();
    write_belief_dump(&mut buf, &recs).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
    let back = read_belief_dump(&buf[..]).unwrap();
    assert_eq!(back, recs);
    assert_eq!(back[0].belief(), b);
}

#[test]
fn invalid_configs() {
    let q = query(&[5], &[4, 6]);
    let v = numeric_vocab(10);
    for cfg in [
        FbbsConfig { alpha: 0.0, ..FbbsConfig::default() },
        FbbsConfig { beam_n: 0, ..FbbsConfig::default() },
        FbbsConfig { candidate_m: 9, ..FbbsConfig::default() },
        FbbsConfig { lookahead_budget: 0, ..FbbsConfig::default() },
    ] {
        assert!(matches!(fbbs_search(&chain(), &v, &q, &cfg), Err(ElicitError::InvalidConfig(_))));
    }
    assert!("nope".parse::<Generator>().is_err());
    assert_eq!("FBBS".parse::<Generator>().unwrap(), Generator::Fbbs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lambda_strictly_decreasing(t_hat in 2usize..200, alpha in 0.01f64..5.0, t in 1usize..199) {
        prop_assume!(t < t_hat);
        prop_assert!(lambda_weight(t, t_hat, alpha) > lambda_weight(t + 1, t_hat, alpha));
    }

    #[test]
    fn lambda_bounds(t_hat in 1usize..500, alpha in 1e-6f64..20.0, frac in 0.0f64..1.0) {
        let t = 1 + ((t_hat - 1) as f64 * frac) as usize;
        let l = lambda_weight(t, t_hat, alpha);
        prop_assert!(l > 0.0 && l < 1.0);
        if t_hat % 2 == 0 {
            prop_assert_eq!(lambda_weight(t_hat / 2, t_hat, alpha), 0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn returned_beliefs_are_consistent_and_ordered(seed in 0u64..10_000, n in 1usize..5, extra in 0usize..3) {
        let vocab = numeric_vocab(11);
        let m = random_tiny(11, seed);
        let q = query(&[5, 6], &[4, 7, 8]);
        let cfg = FbbsConfig { beam_n: n + extra, candidate_m: n, max_belief_len: 4, lookahead_budget: 4, ..FbbsConfig::default() };
        for out in [fbbs_search(&m, &vocab, &q, &cfg), bbs_search(&m, &vocab, &q, &cfg), fbs_search(&m, &vocab, &q, &cfg)] {
            let out = out.unwrap();
            prop_assert!(out.beliefs.len() <= n);
            for b in &out.beliefs {
                let oracle = sequence_logprob(&m, &q.x_pre.tokens, &b.tokens).unwrap();
                prop_assert!((b.fwd_logprob - oracle).abs() <= 1e-9);
                prop_assert!(b.combined.is_finite());
                prop_assert!(b.fwd_logprob <= 0.0);
            }
            for w in out.beliefs.windows(2) {
                prop_assert!(w[0].combined > w[1].combined || (w[0].combined == w[1].combined && w[0].tokens < w[1].tokens));
            }
        }
    }
}
