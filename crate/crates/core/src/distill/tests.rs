use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eval::accuracy;
use crate::models::{ArchConfig, Family, HeadKind};
use crate::numeric::{gradient_check, NumericError, DEFAULT_STEP};
use crate::synthlang::bio::is_well_formed;
use crate::synthlang::{generate, translate, Benchmark, Languages, SplitSizes, SynthConfig};
use crate::tokenize::{train_bpe, Scope};
use crate::train::LearningRate;

#[test]
fn kl_by_hand() {
    assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap() - 0.143841).abs() < 1e-6);
    assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-6);
    assert_eq!(kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
    assert_eq!(kl_divergence(&[1.0], &[0.5, 0.5]), Err(DistillError::Length(1, 2)));
    assert!(matches!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]), Err(DistillError::NotDistribution(_))));
    // A vanishing student probability is clamped, not infinite.
    assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
}

fn random_dist<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

#[test]
fn kl_is_a_divergence_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..10);
        let p = random_dist(&mut rng, k);
        let q = random_dist(&mut rng, k);
        let d = kl_divergence(&p, &q).unwrap();
        assert!(d >= 0.0);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6) {
            assert!(d > 0.0, "{p:?} {q:?}");
        }
    }
}

proptest! {
    #[test]
    fn kl_nonnegative(seed in any::<u64>(), k in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_dist(&mut rng, k);
        let q = random_dist(&mut rng, k);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }
}

fn set(task: Task, probs: Vec<Vec<Vec<f64>>>) -> PredictionSet {
    let k = probs[0][0].len();
    PredictionSet {
        task,
        ids: vec![],
        categories: (0..k).map(|i| format!("c{i}")).collect(),
        probs,
    }
}

#[test]
fn kd_loss_by_hand() {
    let t = set(Task::Sentence, vec![vec![vec![0.5, 0.5]], vec![vec![0.3, 0.7]]]);
    let s = set(Task::Sentence, vec![vec![vec![0.25, 0.75]], vec![vec![0.3, 0.7]]]);
    assert!((kd_loss(&t, &s, None).unwrap() - 0.0719205).abs() < 1e-6);
    assert_eq!(kd_loss(&t, &t, None).unwrap(), 0.0);

    let tw = set(Task::Word, vec![vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![0.2, 0.8]]]);
    let sw = set(Task::Word, vec![vec![vec![0.25, 0.75], vec![0.5, 0.5], vec![0.2, 0.8]]]);
    let a = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    let b = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    let align = vec![vec![(1, 1), (2, 3), (4, 4)]];
    assert!((kd_loss(&tw, &sw, Some(&align)).unwrap() - (a + b) / 3.0).abs() < 1e-12);
    assert!(matches!(
        kd_loss(&tw, &sw, None),
        Err(Error::Distill(DistillError::MissingAlignment))
    ));
}

fn unwrap_numeric(e: Error) -> NumericError {
    match e {
        Error::Numeric(n) => n,
        other => panic!("{other}"),
    }
}

#[test]
fn kd_graph_matches_value_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..3).map(|_| random_dist(&mut rng, 5)).collect();
    let teacher = Tensor::matrix(3, 5, rows.iter().flatten().copied().collect()).unwrap();
    let logits = Tensor::matrix(3, 5, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();

    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let v = kd_loss_graph(&mut g, z, &teacher).unwrap();
    let expected: f64 = logits
        .data()
        .chunks(5)
        .zip(&rows)
        .map(|(z, t)| {
            let mut s = z.to_vec();
            crate::numeric::softmax_in_place(&mut s);
            kl_divergence(t, &s).unwrap()
        })
        .sum();
    assert!((g.value(v).data()[0] - expected).abs() < 1e-12);

    let r = gradient_check(
        |g, x| kd_loss_graph(g, x, &teacher).map_err(unwrap_numeric),
        &logits,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn word_loss_ignores_continuation_subwords() {
    // Logits for 5 subwords; words start at 0, 2 and 4.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let teacher = Tensor::matrix(3, 4, (0..3).flat_map(|_| random_dist(&mut rng, 4)).collect()).unwrap();
    let base: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |data: Vec<f64>| {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(5, 4, data).unwrap());
        let first = g.select_rows(z, &[0, 2, 4]).unwrap();
        let l = kd_loss_graph(&mut g, first, &teacher).unwrap();
        g.value(l).data()[0]
    };
    let mut changed = base.clone();
    for x in &mut changed[4..8] {
        *x += 3.0;
    }
    for x in &mut changed[12..16] {
        *x -= 1.0;
    }
    assert_eq!(loss(base), loss(changed));
}

struct Fixture {
    langs: Languages,
    bench: Benchmark,
    src_vocab: SubwordVocab,
    shared: SubwordVocab,
    tgt_vocab: SubwordVocab,
    source: EncoderModel,
    word_source: EncoderModel,
    pivot: EncoderModel,
}

fn tiny(family: Family, head: HeadKind, vocab: &SubwordVocab, langs: &Languages) -> ArchConfig {
    let g = langs.grammar();
    let mut c = ArchConfig::edge(family, head, vocab.len(), g.intents(), g.slot_labels());
    c.embed = 16;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.layers = 1;
    c
}

fn quick(epochs: usize, seed: u64) -> TrainSettings {
    TrainSettings {
        epochs,
        lr: LearningRate::Fixed(1e-2),
        seed,
        ..TrainSettings::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let langs = Languages::new(&SynthConfig::default()).unwrap();
        let bench = generate(&langs, SplitSizes::balanced(600, 100, 100), 21).unwrap();
        let src = bench.source();
        let src_vocab = train_bpe(&[&src.annotated, &src.unannotated], 300, Scope::Language("en".into())).unwrap();
        let xa = bench.lang("xa").unwrap();
        let tgt_vocab = train_bpe(&[&xa.unannotated], 300, Scope::Language("xa".into())).unwrap();
        let all: Vec<&Corpus> = langs.all().iter().map(|l| &bench.lang(l).unwrap().unannotated).collect();
        let shared = train_bpe(&all, 800, Scope::Shared(langs.all().to_vec())).unwrap();

        let c = tiny(Family::Transformer, HeadKind::Sentence, &src_vocab, &langs);
        let (source, _) = train_supervised(EncoderModel::build(c, 1).unwrap(), &src_vocab, &src.annotated, &src.validation, Task::Sentence, &quick(6, 1)).unwrap();
        let c = tiny(Family::Cnn, HeadKind::Word, &src_vocab, &langs);
        let (word_source, _) = train_supervised(EncoderModel::build(c, 2).unwrap(), &src_vocab, &src.annotated, &src.validation, Task::Word, &quick(4, 2)).unwrap();
        let g = langs.grammar();
        let mut pc = ArchConfig::pivot(16, 1, shared.len(), g.intents(), g.slot_labels());
        pc.heads = 2;
        pc.ffn = 32;
        let pivot = EncoderModel::build(pc, 3).unwrap();
        Fixture {
            langs,
            bench,
            src_vocab,
            shared,
            tgt_vocab,
            source,
            word_source,
            pivot,
        }
    })
}

fn source_teacher(f: &Fixture) -> Teacher<'_> {
    Teacher {
        model: &f.source,
        vocab: &f.src_vocab,
    }
}

#[test]
fn source_fixture_beats_chance() {
    let f = fixture();
    let test = &f.bench.source().test;
    let p = f.source.predict_corpus(&f.src_vocab, test, Task::Sentence).unwrap();
    assert!(accuracy(&p, test).unwrap() > 1.0 / 8.0 + 0.1);
}

#[test]
fn teacher_cache_matches_forward_and_round_trips() {
    let f = fixture();
    let corpus = f.bench.source().unannotated.unlabeled_view();
    let cache = TeacherCache::compute(&source_teacher(f), &corpus, Task::Sentence).unwrap();
    assert_eq!(cache.len(), corpus.len());
    let fresh = f.source.predict_corpus(&f.src_vocab, &corpus, Task::Sentence).unwrap();
    for (id, probs) in fresh.ids.iter().zip(&fresh.probs) {
        let cached = cache.get(id).unwrap();
        for (a, b) in cached[0].iter().zip(&probs[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let back = TeacherCache::from_jsonl(&cache.to_jsonl()).unwrap();
    assert_eq!(back, cache);
    assert_eq!(corpus.audit().attempted(), 0);
}

#[test]
fn translated_examples_reuse_source_distributions() {
    let f = fixture();
    let d_src = f.bench.source().unannotated.unlabeled_view();
    let cache = TeacherCache::compute(&source_teacher(f), &d_src, Task::Sentence).unwrap();
    let xb = translate(&f.langs, &d_src, "en", "xb").unwrap();
    let resolved = KdSet::new(&xb, Targets::Inherited(&cache)).resolve(&source_teacher(f), Task::Sentence).unwrap();
    for (e, rows) in xb.examples().zip(&resolved) {
        assert_eq!(rows, cache.get(e.origin().unwrap()).unwrap());
    }
}

#[test]
fn word_targets_follow_the_translation_alignment() {
    let f = fixture();
    let t = Teacher {
        model: &f.word_source,
        vocab: &f.src_vocab,
    };
    let d_src = f.bench.source().unannotated.unlabeled_view().head(20);
    let cache = TeacherCache::compute(&t, &d_src, Task::Word).unwrap();
    let xc = translate(&f.langs, &d_src, "en", "xc").unwrap();
    let resolved = KdSet::new(&xc, Targets::Inherited(&cache)).resolve(&t, Task::Word).unwrap();
    for (e, rows) in xc.examples().zip(&resolved) {
        let src = cache.get(e.origin().unwrap()).unwrap();
        for (i, &a) in e.alignment().unwrap().iter().enumerate() {
            assert_eq!(rows[i], src[a]);
        }
    }
}

#[test]
fn distill_rejects_labels_and_category_mismatch() {
    let f = fixture();
    let labeled = &f.bench.source().unannotated;
    let val = f.bench.source().validation.unlabeled_view();
    let job = |train: &'static Corpus, student: EncoderModel| DistillJob {
        name: "t".into(),
        teacher: source_teacher(f),
        student,
        student_vocab: &f.src_vocab,
        task: Task::Sentence,
        train: vec![KdSet::new(train, Targets::Teacher)],
        validation: Box::leak(Box::new(val.clone())),
        settings: quick(1, 0),
    };
    let err = distill(job(labeled, f.source.clone())).unwrap_err();
    assert!(matches!(err, Error::Distill(DistillError::LabeledCorpus(_))));
    let unlabeled: &'static Corpus = Box::leak(Box::new(labeled.unlabeled_view()));
    let other = f
        .source
        .with_heads(HeadKind::Sentence, vec!["a".into(), "b".into()], vec![], 0)
        .unwrap();
    let err = distill(job(unlabeled, other)).unwrap_err();
    assert!(matches!(err, Error::Distill(DistillError::CategoryMismatch)));
}

#[test]
fn distill_tracks_teacher_without_touching_it_or_labels() {
    let f = fixture();
    let d_src = f.bench.source().unannotated.unlabeled_view();
    let val = f.bench.source().validation.unlabeled_view();
    let before = f.source.param_hash();
    let reads = d_src.audit().attempted();
    let student = EncoderModel::build(tiny(Family::Cnn, HeadKind::Sentence, &f.src_vocab, &f.langs), 4).unwrap();
    let out = distill(DistillJob {
        name: "t".into(),
        teacher: source_teacher(f),
        student,
        student_vocab: &f.src_vocab,
        task: Task::Sentence,
        train: vec![KdSet::new(&d_src, Targets::Teacher)],
        validation: &val,
        settings: quick(8, 5),
    })
    .unwrap();
    assert_eq!(f.source.param_hash(), before);
    assert_eq!(d_src.audit().attempted(), reads);
    assert!(out.agreement > 0.5, "{}", out.agreement);
    assert_eq!(out.items_per_epoch, d_src.len());
    assert!(out.fit.epochs.last().unwrap().loss < out.fit.epochs[0].loss);
}

#[test]
fn uniform_teacher_pulls_student_to_uniform() {
    let f = fixture();
    let mut uniform = f.source.clone();
    for (name, t) in uniform.params.iter_mut() {
        if name.starts_with("head.") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let d_src = f.bench.source().unannotated.unlabeled_view();
    let val = f.bench.source().validation.unlabeled_view();
    let student = EncoderModel::build(tiny(Family::Cnn, HeadKind::Sentence, &f.src_vocab, &f.langs), 6).unwrap();
    let teacher = Teacher {
        model: &uniform,
        vocab: &f.src_vocab,
    };
    let start = f.bench.source().test.unlabeled_view();
    let measure = |m: &EncoderModel| {
        let s = m.predict_corpus(&f.src_vocab, &start, Task::Sentence).unwrap();
        let t = uniform.predict_corpus(&f.src_vocab, &start, Task::Sentence).unwrap();
        kd_loss(&t, &s, None).unwrap()
    };
    let before = measure(&student);
    let out = distill(DistillJob {
        name: "u".into(),
        teacher,
        student,
        student_vocab: &f.src_vocab,
        task: Task::Sentence,
        train: vec![KdSet::new(&d_src, Targets::Teacher)],
        validation: &val,
        settings: TrainSettings {
            patience: 0,
            ..quick(3, 7)
        },
    })
    .unwrap();
    // Every epoch ties on agreement, so compare the first-epoch student.
    let after = measure(&out.model);
    assert!(after < before, "{before} -> {after}");
    assert!(after < 1e-2, "{after}");
}

#[test]
fn pseudo_labels_are_teacher_argmax() {
    let f = fixture();
    let d = f.bench.source().unannotated.unlabeled_view();
    let cache = TeacherCache::compute(&source_teacher(f), &d, Task::Sentence).unwrap();
    let labels = pseudo_labels(&cache);
    let p = f.source.predict_corpus(&f.src_vocab, &d, Task::Sentence).unwrap();
    for (id, k) in p.ids.iter().zip(p.argmax()) {
        assert_eq!(labels[id], k);
    }
}

#[test]
fn translate_test_matches_isomorphic_source_test() {
    let f = fixture();
    for lang in ["xa", "xb", "xc"] {
        let test = &f.bench.lang(lang).unwrap().test;
        let tt = translate_test(&f.langs, source_teacher(f), test, Task::Sentence).unwrap();
        assert_eq!(tt.passes, TRANSLATE_TEST_PASSES);
        let iso = translate(&f.langs, test, lang, "en").unwrap();
        let direct = f.source.predict_corpus(&f.src_vocab, &iso, Task::Sentence).unwrap();
        assert_eq!(accuracy(&tt.predictions, test).unwrap(), accuracy(&direct, &iso).unwrap());
    }
}

#[test]
fn translate_test_tags_stay_well_formed() {
    let f = fixture();
    let t = Teacher {
        model: &f.word_source,
        vocab: &f.src_vocab,
    };
    for lang in ["xb", "xc"] {
        let test = &f.bench.lang(lang).unwrap().test;
        let tt = translate_test(&f.langs, t, test, Task::Word).unwrap();
        for (tags, e) in tt.predictions.labels().iter().zip(test.examples()) {
            assert_eq!(tags.len(), e.words().len());
            assert!(is_well_formed(tags), "{tags:?}");
        }
    }
}

fn target(f: &Fixture) -> TargetData<'_> {
    let xa = f.bench.lang("xa").unwrap();
    TargetData {
        lang: "xa",
        unannotated: Box::leak(Box::new(xa.unannotated.unlabeled_view())),
        validation: Box::leak(Box::new(xa.validation.unlabeled_view())),
        vocab: &f.tgt_vocab,
    }
}

#[test]
fn balanced_word_pipeline_is_rejected() {
    let f = fixture();
    let d_src = f.bench.source().unannotated.unlabeled_view();
    let val = f.bench.source().validation.unlabeled_view();
    let t = Teacher {
        model: &f.word_source,
        vocab: &f.src_vocab,
    };
    let err = kd_step1(&f.langs, t, &f.pivot, &f.shared, &d_src, &val, &["xa".into()], Task::Word, &quick(1, 0)).unwrap_err();
    assert!(matches!(err, Error::Distill(DistillError::BalancedWordTask)));
}

#[test]
fn pipeline_variants_run_label_free() {
    let f = fixture();
    let src = f.bench.source();
    let d_src = src.unannotated.unlabeled_view();
    let val = src.validation.unlabeled_view();
    let targets = [target(f)];
    let template = tiny(Family::Transformer, HeadKind::Sentence, &f.tgt_vocab, &f.langs);
    let settings = quick(1, 0);
    let plan = PipelinePlan {
        template: &template,
        options: PipelineOptions {
            balanced: true,
            augment: true,
        },
        task: Task::Sentence,
        kd1: &settings,
        kd2: &settings,
        seed: 9,
    };
    let run = two_step_pipeline(&f.langs, source_teacher(f), &f.pivot, &f.shared, &d_src, &val, &targets, &plan).unwrap();
    assert_eq!(run.stages.len(), 2);
    assert_eq!(run.stages[0].stage, "kd1-balanced");
    assert_eq!(run.stages[0].corpora.len(), 2);
    assert_eq!(run.stages[1].stage, "kd2-augmented/xa");
    assert_eq!(run.stages[1].corpora.len(), 2);
    // 1:1 mixture of target data and its paraphrases.
    assert_eq!(run.stages[1].corpora[1].0, format!("{}~p", targets[0].unannotated.name()));
    let m = &run.targets["xa"];
    assert_eq!(m.config.vocab_hash, f.tgt_vocab.hash());
    assert_eq!(m.config.family, Family::Transformer);

    let again = two_step_pipeline(&f.langs, source_teacher(f), &f.pivot, &f.shared, &d_src, &val, &targets, &plan).unwrap();
    assert_eq!(again.stages, run.stages);

    let (pseudo, record) = translate_train_pseudo(&f.langs, source_teacher(f), &d_src, &val, targets[0], &template, Task::Sentence, &settings, 3).unwrap();
    assert_eq!(record.stage, "translate-train-pseudo/xa");
    assert_eq!(pseudo.config.vocab_size, f.tgt_vocab.len());

    for c in [&src.unannotated, &f.bench.lang("xa").unwrap().unannotated] {
        assert_eq!(c.audit().successful(), 0);
    }

    let gold = reference_gold_supervised(&f.langs, &f.pivot, &f.shared, &src.annotated, &src.validation, &targets, &plan).unwrap();
    assert_eq!(gold.stages[0].stage, "gold-supervised");
    assert!(src.annotated.audit().successful() > 0);
    assert_eq!(f.bench.lang("xa").unwrap().unannotated.audit().successful(), 0);
}
