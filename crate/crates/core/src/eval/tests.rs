use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synthlang::{generate, Example, Languages, SplitSizes, SynthConfig};

fn corpus(intents: &[&str]) -> Corpus {
    let ex = intents
        .iter()
        .enumerate()
        .map(|(i, &it)| Example::new(format!("e{i}"), "en", vec!["w".into()], Some(it.into()), Some(vec!["O".into()])).unwrap())
        .collect();
    Corpus::new("gold", "en", ex).unwrap()
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

fn sentence_preds(picks: &[usize], cats: &[&str], ids: Vec<String>) -> PredictionSet {
    PredictionSet {
        task: Task::Sentence,
        ids,
        categories: cats.iter().map(|s| s.to_string()).collect(),
        probs: picks.iter().map(|&k| vec![one_hot(k, cats.len())]).collect(),
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("e{i}")).collect()
}

#[test]
fn accuracy_by_hand() {
    let cats = ["a", "b"];
    let gold = corpus(&["a", "b", "b", "a"]);
    assert_eq!(accuracy(&sentence_preds(&[0, 1, 1, 0], &cats, ids(4)), &gold).unwrap(), 1.0);
    assert_eq!(accuracy(&sentence_preds(&[0, 1, 0, 0], &cats, ids(4)), &gold).unwrap(), 0.75);
}

#[test]
fn accuracy_rejects_mismatched_ids() {
    let gold = corpus(&["a", "b"]);
    let mut p = sentence_preds(&[0, 1], &["a", "b"], vec!["e0".into(), "x".into()]);
    assert!(matches!(accuracy(&p, &gold), Err(Error::Eval(EvalError::Mismatch(_)))));
    p.ids.clear();
    assert!(accuracy(&p, &gold).is_err());
}

#[test]
fn accuracy_reads_labels_only_through_the_gate() {
    let gold = corpus(&["a", "b"]);
    let hidden = gold.unlabeled_view();
    let err = accuracy(&sentence_preds(&[0, 1], &["a", "b"], ids(2)), &hidden).unwrap_err();
    assert!(err.is_label_gate());
}

#[test]
fn uniform_predictor_scores_the_first_intent_share() {
    let langs = Languages::new(&SynthConfig::default()).unwrap();
    let bench = generate(&langs, SplitSizes::balanced(100, 50, 96), 2).unwrap();
    let test = &bench.source().test;
    let cats = langs.grammar().intents();
    let n = cats.len();
    let p = PredictionSet {
        task: Task::Sentence,
        ids: test.examples().map(|e| e.id().to_string()).collect(),
        categories: cats.clone(),
        probs: vec![vec![vec![1.0 / n as f64; n]]; test.len()],
    };
    // Every tie resolves to index 0, so the score is the share of that intent.
    let expected = (0..test.len()).filter(|&i| test.intent(i).unwrap() == Some(cats[0].as_str())).count() as f64 / test.len() as f64;
    let acc = accuracy(&p, test).unwrap();
    assert_eq!(acc, expected);
    assert!((acc - 1.0 / n as f64).abs() < 1e-12);
}

proptest! {
    #[test]
    fn accuracy_ignores_order(picks in prop::collection::vec(0usize..3, 1..20), seed in any::<u64>()) {
        let cats = ["a", "b", "c"];
        let gold_labels: Vec<&str> = (0..picks.len()).map(|i| cats[(i * 7 + 1) % 3]).collect();
        let gold = corpus(&gold_labels);
        let base = accuracy(&sentence_preds(&picks, &cats, ids(picks.len())), &gold).unwrap();
        let mut order: Vec<usize> = (0..picks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let ex: Vec<Example> = order
            .iter()
            .map(|&i| Example::new(format!("e{i}"), "en", vec!["w".into()], Some(gold_labels[i].into()), None).unwrap())
            .collect();
        let shuffled_gold = Corpus::new("gold", "en", ex).unwrap();
        let shuffled_picks: Vec<usize> = order.iter().map(|&i| picks[i]).collect();
        let shuffled_ids = order.iter().map(|&i| format!("e{i}")).collect();
        let again = accuracy(&sentence_preds(&shuffled_picks, &cats, shuffled_ids), &shuffled_gold).unwrap();
        prop_assert_eq!(base, again);
    }
}

fn tags(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn span_f1_hand_case() {
    let gold = vec![tags("O B-fromloc I-fromloc O")];
    let pred = vec![tags("O B-fromloc I-fromloc B-toloc")];
    let s = span_f1(&pred, &gold).unwrap();
    assert_eq!((s.precision, s.recall), (0.5, 1.0));
    assert_eq!(s.f1, 2.0 / 3.0);
}

#[test]
fn span_f1_edge_cases() {
    let gold = vec![tags("B-toloc I-toloc O B-class_type"), tags("O O")];
    assert_eq!(span_f1(&gold, &gold).unwrap().f1, 1.0);
    let none = vec![tags("O O O O"), tags("O O")];
    let s = span_f1(&none, &gold).unwrap();
    assert_eq!((s.recall, s.f1), (0.0, 0.0));
    let short = vec![tags("O O O"), tags("O O")];
    assert_eq!(
        span_f1(&short, &gold),
        Err(EvalError::Length {
            example: 0,
            predicted: 3,
            gold: 4
        })
    );
    // A stray I- is repaired into a span start.
    let stray = vec![tags("I-toloc I-toloc O B-class_type"), tags("O O")];
    assert_eq!(span_f1(&stray, &gold).unwrap().f1, 1.0);
}

/// Scan tags directly: a span starts at B-X, or at I-X whose left
/// neighbour is not tagged X, and runs over the following I-X tags.
fn oracle_spans(t: &[String]) -> Vec<(usize, usize, String)> {
    let typ = |s: &str| s.get(2..).unwrap_or("").to_string();
    let mut out = Vec::new();
    for i in 0..t.len() {
        let starts = t[i].starts_with("B-") || (t[i].starts_with("I-") && (i == 0 || t[i - 1] == "O" || typ(&t[i - 1]) != typ(&t[i])));
        if starts {
            let mut j = i;
            while j + 1 < t.len() && t[j + 1] == format!("I-{}", typ(&t[i])) {
                j += 1;
            }
            out.push((i, j, typ(&t[i])));
        }
    }
    out
}

#[test]
fn span_f1_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let alphabet = ["O", "B-a", "I-a", "B-b", "I-b"];
    let mut sample = |n: usize| -> Vec<String> { (0..n).map(|_| alphabet[rng.gen_range(0..5)].to_string()).collect() };
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = 1 + (pred.len() % 12);
        pred.push(sample(n));
        gold.push(sample(n));
    }
    let (mut c, mut p, mut g) = (0, 0, 0);
    for (a, b) in pred.iter().zip(&gold) {
        let sa = oracle_spans(a);
        let sb = oracle_spans(b);
        c += sa.iter().filter(|s| sb.contains(s)).count();
        p += sa.len();
        g += sb.len();
    }
    let s = span_f1(&pred, &gold).unwrap();
    assert_eq!((s.correct, s.predicted, s.gold), (c, p, g));
    let (pr, rc) = (c as f64 / p as f64, c as f64 / g as f64);
    assert!((s.f1 - 2.0 * pr * rc / (pr + rc)).abs() < 1e-12);
    for (a, b) in pred.iter().zip(&gold).take(200) {
        let one = span_f1(&[a.clone()], &[b.clone()]).unwrap();
        let sa = oracle_spans(a);
        assert_eq!(one.predicted, sa.len());
        assert_eq!(one.correct, sa.iter().filter(|s| oracle_spans(b).contains(s)).count());
    }
}

fn row(model: &str, kind: RowKind, scores: &[(&str, f64)]) -> MetricsRow {
    let m = scores.iter().map(|(l, v)| (l.to_string(), *v)).collect();
    MetricsRow::new(model, kind, Task::Sentence, "en", m).unwrap()
}

#[test]
fn average_excludes_source() {
    let r = row("m", RowKind::Ours, &[("en", 1.0), ("xa", 0.5), ("xb", 0.7)]);
    assert_eq!(r.source, Some(1.0));
    assert!((r.average - 0.6).abs() < 1e-12);
    assert!(MetricsRow::new("m", RowKind::Ours, Task::Sentence, "en", [("en".to_string(), 1.0)].into()).is_err());
}

#[test]
fn dissipation_by_hand() {
    let s1 = row("pivot", RowKind::Stage, &[("xa", 92.8)]);
    let s2 = row("target", RowKind::Ours, &[("xa", 87.7)]);
    let d = dissipation_delta(&s1, &s2).unwrap();
    assert!((d.average - (-5.1)).abs() < 1e-9);
    assert!((d.per_lang["xa"] - (-5.1)).abs() < 1e-9);
    let same = dissipation_delta(&s1, &s1).unwrap();
    assert!(same.per_lang.values().all(|&v| v == 0.0) && same.average == 0.0);
    let other = row("t", RowKind::Ours, &[("xb", 1.0)]);
    assert!(matches!(dissipation_delta(&s1, &other), Err(EvalError::Languages(_))));
    let bigger = dissipation_delta(&s1, &row("t2", RowKind::Ours, &[("xa", 90.0)])).unwrap();
    assert!((bigger.minus(&d).unwrap().average - 2.3).abs() < 1e-9);
}

#[test]
fn grid_drops_and_csv() {
    let mut g = TransferGrid::new("grid", Task::Sentence);
    assert!(g.is_empty());
    g.set_source_score(Family::Transformer, 0.9);
    g.set(Family::Transformer, Family::Cnn, 0.7);
    g.set(Family::Bilstm, Family::Bilstm, 0.6);
    assert!((g.drops[0][2].unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(g.drops[1][1], None);
    assert!(!g.is_complete());
    let csv = g.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "source,transformer,bilstm,cnn,source_score");
    assert_eq!(lines[1], "transformer,,,0.700000,0.900000");
    assert_eq!(lines[2], "bilstm,,0.600000,,");
    for s in Family::ALL {
        for t in Family::ALL {
            g.set(s, t, 0.5);
        }
    }
    assert!(g.is_complete());
}

#[test]
fn report_orders_rows_and_omits_empty_grids() {
    let rows = vec![
        row("2-step KD", RowKind::Ours, &[("en", 0.9), ("xa", 0.6)]),
        row("Translate-test", RowKind::Baseline, &[("xa", 0.5)]),
        row("Gold-supervised target", RowKind::Reference, &[("xa", 0.8)]),
    ];
    let empty = TransferGrid::new("grid", Task::Sentence);
    let r = build_report("run", rows.clone(), vec![], vec![empty]);
    let kinds: Vec<RowKind> = r.rows.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, vec![RowKind::Reference, RowKind::Baseline, RowKind::Ours]);
    assert!(r.grids.is_empty());
    let md = r.to_markdown();
    assert!(!md.contains("rows: source"));
    assert!(!md.contains("Dissipation"));
    assert!(md.contains("| Model | en | xa | Avg |"));
    assert!(md.contains("| 2-step KD | 90.0 | 60.0 | 60.0 |"));
    assert!(md.contains("micro-averaged"));

    let back = ExperimentReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.hash(), build_report("run", rows, vec![], vec![]).hash());
}

#[test]
fn report_renders_deltas_and_grids() {
    let s1 = row("pivot", RowKind::Stage, &[("xa", 0.9)]);
    let s2 = row("target", RowKind::Ours, &[("xa", 0.85)]);
    let d = dissipation_delta(&s1, &s2).unwrap();
    let mut g = TransferGrid::new("Cross-architecture transfer", Task::Sentence);
    g.set(Family::Cnn, Family::Transformer, 0.4);
    let r = build_report("run", vec![s1, s2], vec![d], vec![g]);
    let md = r.to_markdown();
    assert!(md.contains("| target | -5.0 | -5.0 |"), "{md}");
    assert!(md.contains("Cross-architecture transfer (target average"));
    assert!(md.contains("| cnn | 40.0 | - | - |"));
}
