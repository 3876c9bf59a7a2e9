use std::sync::OnceLock;

use super::*;
use crate::synthlang::{generate, Benchmark, Languages, SplitSizes, SynthConfig};
use crate::tokenize::{train_bpe, Scope};

struct Fixture {
    bench: Benchmark,
    vocab: SubwordVocab,
    intents: Vec<String>,
    tags: Vec<String>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let langs = Languages::new(&SynthConfig::default()).unwrap();
        let bench = generate(&langs, SplitSizes::balanced(200, 50, 50), 11).unwrap();
        let src = &bench.source().annotated;
        let vocab = train_bpe(&[src], 400, Scope::Language("en".into())).unwrap();
        let grammar = langs.grammar();
        Fixture {
            intents: grammar.intents().to_vec(),
            tags: grammar.slot_labels(),
            bench,
            vocab,
        }
    })
}

fn small(family: Family, head: HeadKind) -> ArchConfig {
    let f = fixture();
    let mut c = ArchConfig::edge(family, head, f.vocab.len(), f.intents.clone(), f.tags.clone());
    c.embed = 8;
    c.hidden = if family == Family::Cnn { 6 } else { 8 };
    c.heads = 2;
    c.ffn = 12;
    c
}

fn batch(model: &EncoderModel, n: usize) -> Vec<Tokenization> {
    let f = fixture();
    let src = &f.bench.source().test;
    (0..n).map(|i| model.tokenize(&f.vocab, src.words(i))).collect()
}

fn all_configs() -> Vec<ArchConfig> {
    let mut out = Vec::new();
    for fam in Family::ALL {
        for head in [HeadKind::Sentence, HeadKind::Word] {
            out.push(small(fam, head));
        }
    }
    out
}

fn task_of(c: &ArchConfig) -> Task {
    if c.head.has(Task::Sentence) {
        Task::Sentence
    } else {
        Task::Word
    }
}

#[test]
fn same_seed_same_parameters() {
    let f = fixture();
    let c = ArchConfig::edge(Family::Transformer, HeadKind::Sentence, f.vocab.len(), f.intents.clone(), f.tags.clone());
    assert_eq!((c.embed, c.hidden, c.layers), (64, 64, 2));
    let a = EncoderModel::build(c.clone(), 3).unwrap();
    let b = EncoderModel::build(c.clone(), 3).unwrap();
    assert_eq!(a.params, b.params);
    let other = EncoderModel::build(c, 4).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn init_is_bounded() {
    let m = EncoderModel::build(small(Family::Transformer, HeadKind::Both), 1).unwrap();
    for (name, t) in m.params.iter().filter(|(n, _)| !n.ends_with(".g")) {
        let bound = t.data().iter().all(|x| f64::from(x.abs()) <= INIT_RANGE);
        assert!(bound, "{name}");
    }
    assert!(m.params.get("l0.ln1.g").unwrap().data().iter().all(|&x| x == 1.0));
}

fn reference_scale(family: Family, embed: usize, hidden: usize, layers: usize) -> usize {
    let labels = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
    let mut c = ArchConfig::edge(family, HeadKind::Sentence, 10_000, labels(8), labels(13));
    c.embed = embed;
    c.hidden = hidden;
    c.layers = layers;
    c.ffn = 3 * hidden;
    c.param_count()
}

#[test]
fn reference_scale_matches_published_sizes() {
    for (fam, e, h, l, published) in [
        (Family::Transformer, 256, 256, 4, 5.3e6),
        (Family::Bilstm, 256, 512, 2, 5.3e6),
        (Family::Cnn, 256, 768, 2, 5.0e6),
    ] {
        let n = reference_scale(fam, e, h, l) as f64;
        assert!((n / published - 1.0).abs() < 0.05, "{fam}: {n}");
    }
}

#[test]
fn cnn_classifier_reads_concatenated_kernels() {
    let mut c = small(Family::Cnn, HeadKind::Sentence);
    c.hidden = 48;
    assert_eq!(c.sentence_features(), 3 * 48);
    let m = EncoderModel::build(c, 0).unwrap();
    assert_eq!(m.params.get("head.intent.w").unwrap().shape(), &[144, m.config.intents.len()]);
}

#[test]
fn edge_families_have_comparable_size() {
    let f = fixture();
    for head in [HeadKind::Sentence, HeadKind::Word] {
        let counts: Vec<usize> = Family::ALL
            .iter()
            .map(|&fam| ArchConfig::edge(fam, head, f.vocab.len(), f.intents.clone(), f.tags.clone()).param_count())
            .collect();
        let lo = *counts.iter().min().unwrap() as f64;
        let hi = *counts.iter().max().unwrap() as f64;
        assert!(hi / lo <= 1.15, "{head:?}: {counts:?}");
    }
}

#[test]
fn config_count_matches_built_count() {
    let f = fixture();
    for fam in Family::ALL {
        for head in [HeadKind::Sentence, HeadKind::Word, HeadKind::Both] {
            let c = ArchConfig::edge(fam, head, f.vocab.len(), f.intents.clone(), f.tags.clone());
            let m = EncoderModel::build(c.clone(), 0).unwrap();
            assert_eq!(c.param_count(), m.param_count(), "{fam} {head:?}");
        }
    }
    let p = ArchConfig::pivot(32, 2, f.vocab.len(), f.intents.clone(), f.tags.clone());
    assert_eq!(p.param_count(), EncoderModel::build(p, 0).unwrap().param_count());
}

#[test]
fn predictions_are_distributions_aligned_to_words() {
    for c in all_configs() {
        let task = task_of(&c);
        let m = EncoderModel::build(c, 5).unwrap();
        let b = batch(&m, 6);
        let p = m.predict(&b, task).unwrap();
        assert_eq!(p.len(), 6);
        for (ex, tok) in p.probs.iter().zip(&b) {
            let units = if task == Task::Word { tok.word_count() } else { 1 };
            assert_eq!(ex.len(), units);
            for v in ex {
                assert_eq!(v.len(), p.categories.len());
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    for c in all_configs() {
        let task = task_of(&c);
        let m = EncoderModel::build(c, 6).unwrap();
        let b = batch(&m, 5);
        let perm = [3, 0, 4, 1, 2];
        let shuffled: Vec<Tokenization> = perm.iter().map(|&i| b[i].clone()).collect();
        let p = m.predict(&b, task).unwrap();
        let q = m.predict(&shuffled, task).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(q.probs[j], p.probs[i]);
        }
    }
}

#[test]
fn zeroed_head_is_uniform() {
    for c in all_configs() {
        let task = task_of(&c);
        let mut m = EncoderModel::build(c, 7).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("head.") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let p = m.predict(&batch(&m, 3), task).unwrap();
        let k = p.categories.len() as f64;
        for v in p.probs.iter().flatten() {
            assert!(v.iter().all(|&x| (x - 1.0 / k).abs() < 1e-12));
        }
    }
}

#[test]
fn overlong_input_is_rejected_by_transformers_only() {
    let long: Vec<String> = (0..80).map(|_| "boston".to_string()).collect();
    let f = fixture();
    let t = EncoderModel::build(small(Family::Transformer, HeadKind::Sentence), 0).unwrap();
    let err = t.predict(&[t.tokenize(&f.vocab, &long)], Task::Sentence).unwrap_err();
    assert!(matches!(err, Error::Model(ModelError::TooLong { max: 64, .. })));
    let l = EncoderModel::build(small(Family::Bilstm, HeadKind::Sentence), 0).unwrap();
    assert!(l.predict(&[l.tokenize(&f.vocab, &long)], Task::Sentence).is_ok());
}

#[test]
fn unknown_family_is_an_error() {
    assert_eq!("rnn".parse::<Family>(), Err(ModelError::UnknownFamily("rnn".into())));
    assert_eq!("CNN".parse::<Family>(), Ok(Family::Cnn));
    let m = EncoderModel::build(small(Family::Cnn, HeadKind::Sentence), 0).unwrap();
    let text = m.to_json().replacen("\"family\":\"cnn\"", "\"family\":\"rnn\"", 1);
    assert!(matches!(EncoderModel::from_json(&text), Err(ModelError::Format(_))));
}

#[test]
fn missing_head_is_an_error() {
    let m = EncoderModel::build(small(Family::Bilstm, HeadKind::Sentence), 0).unwrap();
    let err = m.predict(&batch(&m, 1), Task::Word).unwrap_err();
    assert!(matches!(err, Error::Model(ModelError::MissingHead(Task::Word))));
}

#[test]
fn serialization_round_trip_is_bit_exact() {
    for c in all_configs() {
        let task = task_of(&c);
        let m = EncoderModel::build(c, 8).unwrap();
        let text = m.to_json();
        let back = EncoderModel::from_json(&text).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.param_hash(), m.param_hash());
        assert_eq!(back.to_json(), text);
        let b = batch(&m, 4);
        assert_eq!(back.predict(&b, task).unwrap(), m.predict(&b, task).unwrap());
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut c = small(Family::Transformer, HeadKind::Both);
    c.dropout = 0.5;
    let m = EncoderModel::build(c, 9).unwrap();
    let b = batch(&m, 4);
    assert_eq!(m.predict(&b, Task::Word).unwrap(), m.predict(&b, Task::Word).unwrap());
}

#[test]
fn corrupt_model_file_is_rejected() {
    let m = EncoderModel::build(small(Family::Cnn, HeadKind::Word), 0).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    v["params"].as_array_mut().unwrap().pop();
    assert!(matches!(EncoderModel::from_json(&v.to_string()), Err(ModelError::Format(_))));
    v["format_version"] = 99.into();
    assert!(EncoderModel::from_json(&v.to_string()).is_err());
}

#[test]
fn with_heads_keeps_encoder_and_matching_heads() {
    let f = fixture();
    let m = EncoderModel::build(small(Family::Transformer, HeadKind::Sentence), 1).unwrap();
    let both = m.with_heads(HeadKind::Both, f.intents.clone(), f.tags.clone(), 2).unwrap();
    assert_eq!(both.params.get("l1.ffn.2.w"), m.params.get("l1.ffn.2.w"));
    assert_eq!(both.params.get("head.intent.w"), m.params.get("head.intent.w"));
    assert!(both.params.contains("head.tag.w"));
    let relabeled = m.with_heads(HeadKind::Sentence, vec!["a".into(), "b".into()], vec![], 2).unwrap();
    assert_eq!(relabeled.params.get("head.intent.w").unwrap().shape(), &[8, 2]);
}

#[test]
fn gradients_match_finite_differences() {
    for mut c in all_configs() {
        c.dropout = 0.0;
        let task = task_of(&c);
        let m = EncoderModel::build(c.clone(), 10).unwrap();
        let b = batch(&m, 2);
        let r = model_gradient_check(&c, &m.params.cast::<f64>(), &b, task, 6, 1).unwrap();
        assert!(r.checked > 20);
        assert!(r.max_rel_error < 1e-4, "{} {:?}: {:?}", c.family, c.head, r);
    }
}

#[test]
fn pivot_gradients_match_finite_differences() {
    let f = fixture();
    let c = ArchConfig::pivot(8, 1, f.vocab.len(), f.intents.clone(), f.tags.clone());
    let m = EncoderModel::build(c.clone(), 2).unwrap();
    let b = batch(&m, 2);
    for task in [Task::Sentence, Task::Word] {
        let r = model_gradient_check(&c, &m.params.cast::<f64>(), &b, task, 4, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{task:?}: {r:?}");
    }
}

#[test]
fn pretraining_beats_chance_reads_no_labels_and_repeats() {
    let f = fixture();
    let mut c = ArchConfig::pivot(16, 1, f.vocab.len(), f.intents.clone(), f.tags.clone());
    c.heads = 2;
    c.ffn = 32;
    let src = &f.bench.source().annotated;
    let before = src.audit().attempted();
    let settings = MlmSettings {
        steps: 60,
        batch_size: 8,
        lr: 5e-3,
        seed: 4,
        ..MlmSettings::default()
    };
    let (m, report) = pivot_pretrain(c.clone(), &[src], &f.vocab, &settings).unwrap();
    assert_eq!(src.audit().attempted(), before);
    assert!(report.accuracy > report.chance, "{report:?}");
    assert!(report.losses.last().unwrap() < &report.losses[0]);
    let (m2, report2) = pivot_pretrain(c, &[src], &f.vocab, &settings).unwrap();
    assert_eq!(report, report2);
    assert_eq!(m.params, m2.params);
}
