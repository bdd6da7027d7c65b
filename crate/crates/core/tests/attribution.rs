mod common;

use belief_space::attribution::*;
use belief_space::model::toy::TwoParamModel;
use belief_space::model::{Trainable, Transformer};
use belief_space::{Token, Vocab};
use common::{random_tiny, toks};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::from_texts(["swallows have wings fish gills birds are ."])
}

fn doc(id: &str, text: &str) -> EvidenceDoc {
    EvidenceDoc { id: id.into(), text: text.into(), source_instance: None }
}

/// Central finite differences of the mean target NLL, one coordinate at a time.
fn fd_gradient<M: Trainable>(model: &M, context: &[Token], target: &[Token]) -> Vec<f64> {
    let mask = vec![true; target.len()];
    let h = 1e-5;
    let mut m = model.clone();
    (0..model.params().len())
        .map(|i| {
            let x = m.params()[i];
            m.params_mut()[i] = x + h;
            let up = m.target_nll(context, target, &mask, None).unwrap();
            m.params_mut()[i] = x - h;
            let down = m.target_nll(context, target, &mask, None).unwrap();
            m.params_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[test]
fn two_param_gradient_matches_finite_differences() {
    let m = TwoParamModel { theta: [0.3, -1.1] };
    for target in [toks(&[1]), toks(&[1, 0, 1]), toks(&[0, 0])] {
        let g = example_gradient(&m, &toks(&[1]), &target).unwrap();
        let fd = fd_gradient(&m, &toks(&[1]), &target);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-8), "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_is_deterministic_and_needs_a_target() {
    let m = random_tiny(12, 3);
    let a = example_gradient(&m, &toks(&[4, 5]), &toks(&[6, 2])).unwrap();
    assert_eq!(a, example_gradient(&m, &toks(&[4, 5]), &toks(&[6, 2])).unwrap());
    assert_eq!(a.len(), m.params().len());
    assert_eq!(example_gradient(&m, &toks(&[4]), &[]), Err(AttributionError::EmptyTarget));
}

#[test]
fn self_similarity_is_squared_norm() {
    let v = vocab();
    let m = random_tiny(v.len(), 1);
    let d = doc("d", "swallows have wings");
    let target = d.target(&v);
    let s = grad_dot(&m, &v, &d, Query { context: &[], target: &target }).unwrap();
    let g = example_gradient(&m, &[], &target).unwrap();
    assert!((s.value - naive_dot(&g, &g)).abs() <= 1e-9 * s.value.abs());
    assert!(s.value >= 0.0);
    let c = grad_cos(&m, &v, &d, Query { context: &[], target: &target }).unwrap();
    assert!((c.value - 1.0).abs() < 1e-9);
}

#[test]
fn orthogonal_toy_gradients_score_zero() {
    // theta1 = -2 theta0 cancels the first coordinate of the [1, 0] gradient.
    let m = TwoParamModel { theta: [0.4, -0.8] };
    let a = example_gradient(&m, &[], &toks(&[1, 0])).unwrap();
    let b = example_gradient(&m, &[], &toks(&[0])).unwrap();
    assert!(a[0].abs() < 1e-12 && b[1] == 0.0);
    assert!(GradDot.score(&a, &b).unwrap().abs() < 1e-9);
}

#[test]
fn dot_and_cosine_match_finite_difference_oracle() {
    let v = vocab();
    let m: Transformer = random_tiny(v.len(), 9);
    let d = doc("d", "fish have gills.");
    let ctx = v.tokenize("swallows are");
    let tgt = v.tokenize("birds .");
    let q = Query { context: &ctx, target: &tgt };
    let gd = fd_gradient(&m, &[], &d.target(&v));
    let gq = fd_gradient(&m, &ctx, &tgt);
    let oracle_dot = naive_dot(&gd, &gq);
    let oracle_cos = oracle_dot / (naive_dot(&gd, &gd).sqrt() * naive_dot(&gq, &gq).sqrt());
    let s = grad_dot(&m, &v, &d, q).unwrap();
    assert!((s.value - oracle_dot).abs() <= 1e-5 * oracle_dot.abs().max(1e-3), "{} vs {oracle_dot}", s.value);
    assert_eq!(s.method, AttributionMethod::GradDot);
    let c = grad_cos(&m, &v, &d, q).unwrap();
    assert!((c.value - oracle_cos).abs() < 1e-6, "{} vs {oracle_cos}", c.value);
    // Against the exact gradients the cosine is the dot over the norms.
    let (a, b) = (example_gradient(&m, &[], &d.target(&v)).unwrap(), example_gradient(&m, &ctx, &tgt).unwrap());
    let exact = naive_dot(&a, &b) / (naive_dot(&a, &a).sqrt() * naive_dot(&b, &b).sqrt());
    assert!((c.value - exact).abs() < 1e-9);
}

#[test]
fn cosine_extremes_and_degenerate_norm() {
    let g = vec![0.5, -2.0, 3.0];
    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
    assert!((GradCos.score(&g, &g).unwrap() - 1.0).abs() < 1e-12);
    assert!((GradCos.score(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(cosine(&g, &[0.0; 3]), Err(AttributionError::DegenerateGradient(_))));
}

#[test]
fn dot_is_bilinear_under_superposed_losses() {
    let v = vocab();
    let m = random_tiny(v.len(), 4);
    let (t1, t2) = (doc("a", "fish have gills").target(&v), doc("b", "birds are .").target(&v));
    let q = example_gradient(&m, &v.tokenize("swallows"), &v.tokenize("have wings")).unwrap();
    let mut sum = vec![0.0; m.params().len()];
    for t in [&t1, &t2] {
        m.target_nll(&[], t, &vec![true; t.len()], Some((&mut sum, 1.0))).unwrap();
    }
    let separate = dot(&example_gradient(&m, &[], &t1).unwrap(), &q) + dot(&example_gradient(&m, &[], &t2).unwrap(), &q);
    assert!((dot(&sum, &q) - separate).abs() <= 1e-9 * separate.abs().max(1.0));
}

fn pool() -> Vec<EvidenceDoc> {
    vec![
        doc("d2", "fish have gills."),
        doc("d0", "swallows are birds."),
        doc("d1", "birds have wings."),
        doc("d3", "swallows have wings."),
    ]
}

#[test]
fn rank_pool_orders_and_truncates() {
    let v = vocab();
    let m = random_tiny(v.len(), 2);
    let ctx = v.tokenize("swallows have");
    let tgt = v.tokenize("gills");
    let q = Query { context: &ctx, target: &tgt };
    for method in [AttributionMethod::GradDot, AttributionMethod::GradCos] {
        let all = rank_pool(&m, &v, &pool(), q, method, 10).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].value >= w[1].value));
        let mut ids: Vec<&str> = all.iter().map(|s| s.doc_id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, ["d0", "d1", "d2", "d3"]);
        assert_eq!(rank_pool(&m, &v, &pool(), q, method, 2).unwrap(), all[..2].to_vec());
        assert!(rank_pool(&m, &v, &pool(), q, method, 0).unwrap().is_empty());
    }
    let one = rank_pool(&m, &v, &pool()[..1], q, AttributionMethod::GradDot, 5).unwrap();
    assert_eq!(one[0].doc_id, "d2");
}

#[test]
fn rank_pool_ties_break_by_id() {
    let v = vocab();
    let m = random_tiny(v.len(), 2);
    let same = vec![doc("b", "fish have gills."), doc("a", "fish have gills.")];
    let ctx = v.tokenize("fish");
    let tgt = v.tokenize("have");
    let r = rank_pool(&m, &v, &same, Query { context: &ctx, target: &tgt }, AttributionMethod::GradDot, 2).unwrap();
    assert_eq!(r[0].value, r[1].value);
    assert_eq!((r[0].doc_id.as_str(), r[1].doc_id.as_str()), ("a", "b"));
}

#[test]
fn rank_pool_many_agrees_with_single_queries() {
    let v = vocab();
    let m = random_tiny(v.len(), 6);
    let queries = [("swallows have", "wings"), ("fish have", "gills"), ("birds", "are")];
    let owned: Vec<(Vec<Token>, Vec<Token>)> = queries.iter().map(|(c, t)| (v.tokenize(c), v.tokenize(t))).collect();
    let qs: Vec<Query<'_>> = owned.iter().map(|(c, t)| Query { context: c, target: t }).collect();
    let many = rank_pool_many(&m, &v, &pool(), &qs, AttributionMethod::GradCos, 3).unwrap();
    for (q, got) in qs.iter().zip(&many) {
        assert_eq!(got, &rank_pool(&m, &v, &pool(), *q, AttributionMethod::GradCos, 3).unwrap());
    }
}

#[test]
fn pool_and_method_errors() {
    let v = vocab();
    let m = random_tiny(v.len(), 2);
    let t = v.tokenize("gills");
    let q = Query { context: &[], target: &t };
    assert_eq!(rank_pool(&m, &v, &[], q, AttributionMethod::GradDot, 1), Err(AttributionError::EmptyPool));
    for method in [AttributionMethod::Hif, AttributionMethod::UnTrac, AttributionMethod::UnTracInv] {
        let e = rank_pool(&m, &v, &pool(), q, method, 1).unwrap_err();
        assert_eq!(e.to_string(), format!("method not implemented: {method}"));
    }
    assert_eq!("grad-cos".parse::<AttributionMethod>(), Ok(AttributionMethod::GradCos));
}

#[test]
fn scores_dump_has_four_columns() {
    let scores = vec![AttributionScore { doc_id: "d1".into(), method: AttributionMethod::GradDot, value: 0.25 }];
    let mut buf = Vec::new();
    write_scores(&mut buf, "q7", &scores).unwrap();
    let line = String::from_utf8(buf).unwrap();
    let cols: Vec<&str> = line.trim_end().split('\t').collect();
    assert_eq!(cols[..3], ["q7", "d1", "grad-dot"]);
    assert_eq!(cols[3].parse::<f64>().unwrap(), 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_bounded_symmetric_and_scale_free(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(dot(&a, &a) > 1e-6 && dot(&b, &b) > 1e-6);
        let x = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert!((x - cosine(&b, &a).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        prop_assert!((x - cosine(&scaled, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn dot_is_linear(
        a in prop::collection::vec(-5.0f64..5.0, 5),
        b in prop::collection::vec(-5.0f64..5.0, 5),
        q in prop::collection::vec(-5.0f64..5.0, 5),
        s in -3.0f64..3.0,
    ) {
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        prop_assert!((dot(&mix, &q) - (dot(&a, &q) + s * dot(&b, &q))).abs() < 1e-9);
    }
}
