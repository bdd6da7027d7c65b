mod common;

use belief_space::attribution::{AttributionMethod, AttributionScore, EvidenceDoc};
use belief_space::dataset::QAInstance;
use belief_space::elicitation::{Belief, Generator, PromptTemplate};
use belief_space::model::toy::TwoParamModel;
use belief_space::model::{batch_objective, Trainable, Transformer, WeightedExample};
use belief_space::unlearning::*;
use belief_space::{Token, Vocab};
use proptest::prelude::*;

const WORDS: &str = "how does bako move? it is a bird lives in the sky river flies swims";

fn vocab() -> Vocab {
    Vocab::from_texts([WORDS, belief_space::elicitation::DEFAULT_TEMPLATE, belief_space::dataset::ANSWER_PROMPT])
}

fn belief(v: &Vocab, text: &str, combined: f64) -> Belief {
    let tokens = v.tokenize(text);
    Belief { tokens, text: text.into(), fwd_logprob: -1.0, back_logprob: -1.0, combined, generator: Generator::Fbbs }
}

fn pair(v: &Vocab, id: &str) -> RectificationPair {
    let mut instance = QAInstance::new(id, "how does bako move?", "flies");
    instance.evidence = Some(vec!["bako is a bird.".into()]);
    RectificationPair {
        instance,
        y_inc: "swims".into(),
        y_cor: "flies".into(),
        spurious: vec![belief(v, "it lives in the river", -2.0), belief(v, "it is a bird", -5.0)],
        true_beliefs: vec![belief(v, "it is a bird", -1.0)],
    }
}

fn flat(batches: &[Vec<WeightedExample>]) -> Vec<WeightedExample> {
    batches.iter().flatten().cloned().collect()
}

#[test]
fn one_pair_gives_two_examples_with_default_weights() {
    let v = vocab();
    let t = PromptTemplate::default();
    let ex = flat(&build_unlearn_batches(&[pair(&v, "a")], &t, &UnlearnConfig::default(), &v).unwrap());
    assert_eq!(ex.len(), 2);
    let mut w: Vec<f64> = ex.iter().map(|e| e.weight).collect();
    w.sort_by(f64::total_cmp);
    assert_eq!(w, vec![-1.0, 0.5]);

    let sup = ex.iter().find(|e| e.weight < 0.0).unwrap();
    // Top spurious belief, then ". Therefore, the answer is swims."
    assert_eq!(v.detokenize(&sup.target), "it lives in the river. Therefore, the answer is swims.");
    assert_eq!(v.detokenize(&sup.context), "how does bako move? The concise fact to solve the problem is that");
    let masked: Vec<Token> = sup.target.iter().zip(&sup.mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
    assert_eq!(v.detokenize(&masked), "it lives in the river swims");
}

#[test]
fn zero_beta_drops_enhance_side() {
    let v = vocab();
    let cfg = UnlearnConfig { beta: 0.0, ..Default::default() };
    let ex = flat(&build_unlearn_batches(&[pair(&v, "a")], &PromptTemplate::default(), &cfg, &v).unwrap());
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0].weight, -1.0);
}

#[test]
fn three_pairs_fit_one_batch_deterministically() {
    let v = vocab();
    let pairs: Vec<_> = ["a", "b", "c"].iter().map(|id| pair(&v, id)).collect();
    let t = PromptTemplate::default();
    let cfg = UnlearnConfig::default();
    let b1 = build_unlearn_batches(&pairs, &t, &cfg, &v).unwrap();
    assert_eq!(b1.len(), 1);
    assert_eq!(b1[0].len(), 6);
    assert_eq!(b1, build_unlearn_batches(&pairs, &t, &cfg, &v).unwrap());
}

#[test]
fn top_k_takes_highest_combined_scores() {
    let v = vocab();
    let cfg = UnlearnConfig { top_k_beliefs: 2, ..Default::default() };
    let ex = flat(&build_unlearn_batches(&[pair(&v, "a")], &PromptTemplate::default(), &cfg, &v).unwrap());
    // Two spurious, one true: the larger side is truncated to one.
    assert_eq!(ex.iter().filter(|e| e.weight < 0.0).count(), 1);
    assert_eq!(ex.iter().filter(|e| e.weight > 0.0).count(), 1);
}

#[test]
fn pair_validation() {
    let v = vocab();
    let t = PromptTemplate::default();
    let cfg = UnlearnConfig::default();
    let mut p = pair(&v, "a");
    p.true_beliefs.clear();
    assert_eq!(build_unlearn_batches(&[p], &t, &cfg, &v), Err(UnlearnError::MissingBeliefs("a".into(), "true")));
    let mut p = pair(&v, "a");
    p.spurious.clear();
    assert!(matches!(build_unlearn_batches(&[p], &t, &cfg, &v), Err(UnlearnError::MissingBeliefs(_, "spurious"))));
    let mut p = pair(&v, "a");
    p.y_inc = "flies".into();
    assert_eq!(build_unlearn_batches(&[p], &t, &cfg, &v), Err(UnlearnError::SameAnswer("a".into())));
    let bad = UnlearnConfig { batch_size: 0, ..cfg };
    assert!(matches!(build_unlearn_batches(&[pair(&v, "a")], &t, &bad, &v), Err(UnlearnError::InvalidConfig(_))));
}

#[test]
fn answer_sets_have_no_belief_tokens() {
    let v = vocab();
    let ex = flat(&answer_sr_sets(&[pair(&v, "a")], &UnlearnConfig::default(), &v).unwrap());
    assert_eq!(ex.len(), 2);
    for e in &ex {
        assert_eq!(v.detokenize(&e.context), "how does bako move? Answer:");
        assert_eq!(e.target.len(), 2);
        assert_eq!(e.target[1], Token::EOS);
    }
    let sup = ex.iter().find(|e| e.weight == -1.0).unwrap();
    assert_eq!(v.word(sup.target[0]), "swims");
    let enh = ex.iter().find(|e| e.weight == 0.5).unwrap();
    assert_eq!(v.word(enh.target[0]), "flies");
}

fn score(id: &str, value: f64) -> AttributionScore {
    AttributionScore { doc_id: id.into(), method: AttributionMethod::GradDot, value }
}

fn doc(id: &str, text: &str) -> EvidenceDoc {
    EvidenceDoc { id: id.into(), text: text.into(), source_instance: None }
}

#[test]
fn knowledge_sets() {
    let v = vocab();
    let cfg = UnlearnConfig::default();
    let p = pair(&v, "a");
    let pool = vec![doc("d0", "bako lives in the river.")];
    let (sup, enh) = knowledge_sr_examples(&p, &pool, &[score("d0", 1.0)], &cfg, &v).unwrap();
    assert_eq!((sup.len(), enh.len()), (1, 1));
    assert_eq!(v.detokenize(&sup[0].target), "bako lives in the river.<eos>".replace("<eos>", " <eos>"));
    assert!(sup[0].context.is_empty());

    // Highest score wins.
    let pool = vec![doc("d0", "bako lives in the river."), doc("d1", "bako is a bird.")];
    let (sup, _) = knowledge_sr_examples(&p, &pool, &[score("d0", 0.1), score("d1", 0.9)], &cfg, &v).unwrap();
    assert_eq!(v.detokenize(&sup[0].target[..sup[0].target.len() - 1]), "bako is a bird.");
    // Same document on both sides, with opposite signs.
    let (sup, enh) = knowledge_sr_examples(&p, &pool, &[score("d1", 0.9)], &cfg, &v).unwrap();
    assert_eq!(sup[0].target, enh[0].target);
    assert_eq!((sup[0].weight, enh[0].weight), (-1.0, 0.5));

    let mut bare = p.clone();
    bare.instance.evidence = None;
    assert!(matches!(knowledge_sr_examples(&bare, &pool, &[score("d1", 0.9)], &cfg, &v), Err(UnlearnError::EmptyPool(_))));
    assert!(matches!(knowledge_sr_examples(&p, &[], &[], &cfg, &v), Err(UnlearnError::EmptyPool(_))));

    let batches = knowledge_sr_sets(&[p.clone(), p], &pool, &[vec![score("d0", 1.0)], vec![score("d1", 1.0)]], &cfg, &v).unwrap();
    assert_eq!(flat(&batches).len(), 4);
}

/// Closed-form per-example NLL gradient of the two-parameter model, for a
/// sequence scored after `context`.
fn two_param_grad(theta: [f64; 2], context: &[u32], target: &[u32]) -> [f64; 2] {
    let mut last = context.last().copied();
    let mut g = [0.0; 2];
    for &t in target {
        let on = (last == Some(1)) as u8 as f64;
        let p = 1.0 / (1.0 + (-(theta[0] + theta[1] * on)).exp());
        let d = p - t as f64;
        g[0] += d;
        g[1] += d * on;
        last = Some(t);
    }
    [g[0] / target.len() as f64, g[1] / target.len() as f64]
}

#[test]
fn signed_objective_matches_suppress_minus_beta_enhance() {
    let model = TwoParamModel { theta: [0.3, -0.7] };
    let beta = 0.5;
    let sup = (vec![Token(1)], vec![Token(0), Token(1), Token(1)]);
    let enh = (vec![Token(0)], vec![Token(1), Token(0)]);
    let batch = vec![
        WeightedExample::new(sup.0.clone(), sup.1.clone(), -1.0),
        WeightedExample::new(enh.0.clone(), enh.1.clone(), beta),
    ];
    let (_, grad, _) = batch_objective(&model, &batch).unwrap();
    let gs = two_param_grad(model.theta, &[1], &[0, 1, 1]);
    let ge = two_param_grad(model.theta, &[0], &[1, 0]);
    for i in 0..2 {
        // Descent on Σ w·NLL / B is ascent on (L_suppress − β·L_enhance) / B.
        let eq7_ascent = (gs[i] - beta * ge[i]) / 2.0;
        assert!((grad[i] + eq7_ascent).abs() < 1e-10, "coord {i}: {} vs {}", grad[i], -eq7_ascent);
    }
}

fn tiny_setup() -> (Transformer, Vocab, Vec<RectificationPair>) {
    let v = vocab();
    let model = common::random_tiny(v.len(), 5);
    let pairs = ["a", "b", "c"].iter().map(|id| pair(&v, id)).collect();
    (model, v, pairs)
}

#[test]
fn zero_epochs_is_identity() {
    let (model, v, pairs) = tiny_setup();
    let cfg = UnlearnConfig { epochs: 0, ..Default::default() };
    let (out, log) = rectify(&model, &pairs, &PromptTemplate::default(), &v, &cfg, None).unwrap();
    assert_eq!(out.params(), model.params());
    assert!(log.records.is_empty());
}

#[test]
fn log_length_isolation_and_reproducibility() {
    let (model, v, pairs) = tiny_setup();
    let before = model.clone();
    let cfg = UnlearnConfig { epochs: 3, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
    let t = PromptTemplate::default();
    let (a, log) = rectify(&model, &pairs, &t, &v, &cfg, None).unwrap();
    // 6 examples in batches of 4: two steps per epoch.
    assert_eq!(log.records.len(), 3 * 6usize.div_ceil(4));
    assert_eq!(model, before);
    assert_ne!(a.params(), model.params());
    let (b, _) = rectify(&model, &pairs, &t, &v, &cfg, None).unwrap();
    assert_eq!(a.params(), b.params());
    assert!(log.records.iter().all(|r| r.suppress_nll.is_finite() && r.enhance_nll.is_finite()));

    let mut buf = Vec::new();
    log.write_lines(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), log.records.len());
}

#[test]
fn no_pairs_rejected() {
    let (model, v, _) = tiny_setup();
    let r = rectify(&model, &[], &PromptTemplate::default(), &v, &UnlearnConfig::default(), None);
    assert_eq!(r.err(), Some(UnlearnError::NoPairs));
}

#[test]
fn nll_ceiling_undoes_offending_step() {
    let (model, v, pairs) = tiny_setup();
    let cfg = UnlearnConfig { nll_ceiling: 0.5, ..Default::default() };
    let (out, log) = rectify(&model, &pairs, &PromptTemplate::default(), &v, &cfg, None).unwrap();
    assert!(matches!(log.stop, Some(StopReason::NllCeiling { step: 0, .. })));
    assert_eq!(out.params(), model.params());
}

struct Scripted(Vec<f64>);

impl<M> Monitor<M> for Scripted {
    fn accuracy(&mut self, _: &M) -> f64 {
        self.0.remove(0)
    }
}

#[test]
fn accuracy_drop_restores_last_good_epoch() {
    let (model, v, pairs) = tiny_setup();
    let t = PromptTemplate::default();
    let cfg = UnlearnConfig { epochs: 4, learning_rate: 1e-3, ..Default::default() };
    let (after_one, _) = rectify(&model, &pairs, &t, &v, &UnlearnConfig { epochs: 1, ..cfg }, None).unwrap();
    // Baseline 0.9, epoch 0 at 0.85 passes, epoch 1 at 0.7 trips the guard.
    let mut mon = Scripted(vec![0.9, 0.85, 0.7]);
    let (out, log) = rectify(&model, &pairs, &t, &v, &cfg, Some(&mut mon)).unwrap();
    match log.stop {
        Some(StopReason::AccuracyDrop { epoch: 1, restored_epoch: 1, .. }) => {}
        other => panic!("unexpected stop {other:?}"),
    }
    assert_eq!(out.params(), after_one.params());
}

#[test]
fn training_error_carries_partial_log() {
    let (model, v, pairs) = tiny_setup();
    let mut batches = build_unlearn_batches(&pairs, &PromptTemplate::default(), &UnlearnConfig::default(), &v).unwrap();
    batches.push(vec![WeightedExample::new(vec![], vec![Token(10_000)], 1.0)]);
    match rectify_batches(&model, &batches, &UnlearnConfig::default(), None) {
        Err(UnlearnError::Training { step: 1, log, .. }) => assert_eq!(log.records.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #[test]
    fn sides_are_balanced(n_pairs in 1usize..6, n_spu in 1usize..4, n_true in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let v = vocab();
        let mut pairs = Vec::new();
        for i in 0..n_pairs {
            let mut p = pair(&v, &format!("p{i}"));
            p.spurious = (0..n_spu).map(|j| belief(&v, "it lives in the river", -(j as f64))).collect();
            p.true_beliefs = (0..n_true).map(|j| belief(&v, "it is a bird", -(j as f64))).collect();
            pairs.push(p);
        }
        let cfg = UnlearnConfig { top_k_beliefs: k, seed, batch_size: 3, ..Default::default() };
        let ex = flat(&build_unlearn_batches(&pairs, &PromptTemplate::default(), &cfg, &v).unwrap());
        let s = ex.iter().filter(|e| e.weight < 0.0).count();
        let e = ex.iter().filter(|e| e.weight > 0.0).count();
        prop_assert_eq!(s, e);
        prop_assert_eq!(s, n_pairs * n_spu.min(k).min(n_true.min(k)));
    }
}
