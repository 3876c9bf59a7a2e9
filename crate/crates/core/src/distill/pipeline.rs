//! The two distillation steps, the full transfer pipeline, and the
//! baselines and reference it is compared against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{corpus_fingerprint, distill, DistillError, DistillJob, KdSet, Targets, Teacher, TeacherCache};
use crate::eval::{score, span_f1};
use crate::models::{argmax, predict_with, task_logits, ArchConfig, EncoderModel, HeadKind, PredictionSet, Task};
use crate::numeric::{ParamStore, Session, Var};
use crate::seed::derive_seed;
use crate::synthlang::bio::project_tags;
use crate::synthlang::{paraphrase, translate, Corpus, Languages};
use crate::tokenize::{SubwordVocab, Tokenization};
use crate::train::{cross_entropy_sum, fit, FitReport, TrainSettings};
use crate::Error;

/// Translate, then infer.
pub const TRANSLATE_TEST_PASSES: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Add translated source data (with the source teacher's distributions) to step 1.
    pub balanced: bool,
    /// Mix paraphrases of the target corpus into step 2, one to one.
    pub augment: bool,
}

/// Unlabeled data and tokenizer for one target language.
#[derive(Clone, Copy)]
pub struct TargetData<'a> {
    pub lang: &'a str,
    pub unannotated: &'a Corpus,
    pub validation: &'a Corpus,
    pub vocab: &'a SubwordVocab,
}

/// Enough to replay one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub teacher: Option<String>,
    pub student: String,
    /// `(corpus name, fingerprint)` of everything the stage trained on.
    pub corpora: Vec<(String, String)>,
    pub seed: u64,
    pub agreement: Option<f64>,
    pub fit: FitReport,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub pivot: EncoderModel,
    pub targets: BTreeMap<String, EncoderModel>,
    pub stages: Vec<StageRecord>,
}

fn stage_settings(settings: &TrainSettings, seed: u64) -> TrainSettings {
    TrainSettings {
        seed,
        ..settings.clone()
    }
}

fn fingerprints(cs: &[&Corpus]) -> Vec<(String, String)> {
    cs.iter().map(|c| (c.name().to_string(), corpus_fingerprint(c))).collect()
}

/// Student config for a target language: the template's shape with the
/// target vocabulary and a single head for `task`.
pub fn student_config(template: &ArchConfig, vocab: &SubwordVocab, task: Task) -> ArchConfig {
    ArchConfig {
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        head: HeadKind::from(task),
        ..template.clone()
    }
}

/// KD-(1): source model into the pivot on unlabeled source data, plus its
/// translations into `balanced_langs` carrying the source-side distributions.
#[allow(clippy::too_many_arguments)]
pub fn kd_step1(
    langs: &Languages,
    source: Teacher,
    pivot: &EncoderModel,
    shared: &SubwordVocab,
    d_src: &Corpus,
    validation: &Corpus,
    balanced_langs: &[String],
    task: Task,
    settings: &TrainSettings,
) -> Result<(EncoderModel, StageRecord), Error> {
    if task == Task::Word && !balanced_langs.is_empty() {
        return Err(DistillError::BalancedWordTask.into());
    }
    let cache = TeacherCache::compute(&source, d_src, task)?;
    let translated: Vec<Corpus> = balanced_langs
        .iter()
        .map(|t| translate(langs, d_src, langs.source(), t))
        .collect::<Result<_, _>>()?;
    let mut train = vec![KdSet::new(d_src, Targets::Cached(&cache))];
    train.extend(translated.iter().map(|c| KdSet::new(c, Targets::Inherited(&cache))));
    let corpora: Vec<&Corpus> = train.iter().map(|s| s.corpus).collect();
    let corpora = fingerprints(&corpora);
    let out = distill(DistillJob {
        name: "kd1".into(),
        teacher: source,
        student: pivot.clone(),
        student_vocab: shared,
        task,
        train,
        validation,
        settings: settings.clone(),
    })?;
    let record = StageRecord {
        stage: if balanced_langs.is_empty() { "kd1" } else { "kd1-balanced" }.into(),
        teacher: Some(source.model.param_hash()),
        student: out.model.param_hash(),
        corpora,
        seed: settings.seed,
        agreement: Some(out.agreement),
        fit: out.fit,
    };
    Ok((out.model, record))
}

/// KD-(2): pivot into a fresh target-language student on unlabeled target
/// data, optionally mixed one to one with paraphrases.
#[allow(clippy::too_many_arguments)]
pub fn kd_step2(
    langs: &Languages,
    pivot: Teacher,
    student: EncoderModel,
    target: TargetData,
    augment: bool,
    task: Task,
    settings: &TrainSettings,
    paraphrase_seed: u64,
) -> Result<(EncoderModel, StageRecord), Error> {
    let para = if augment {
        Some(paraphrase(langs, target.unannotated, paraphrase_seed)?)
    } else {
        None
    };
    let mut train = vec![KdSet::new(target.unannotated, Targets::Teacher)];
    train.extend(para.iter().map(|c| KdSet::new(c, Targets::Teacher)));
    let corpora: Vec<&Corpus> = train.iter().map(|s| s.corpus).collect();
    let corpora = fingerprints(&corpora);
    let out = distill(DistillJob {
        name: format!("kd2/{}", target.lang),
        teacher: pivot,
        student,
        student_vocab: target.vocab,
        task,
        train,
        validation: target.validation,
        settings: settings.clone(),
    })?;
    let record = StageRecord {
        stage: format!("kd2{}/{}", if augment { "-augmented" } else { "" }, target.lang),
        teacher: Some(pivot.model.param_hash()),
        student: out.model.param_hash(),
        corpora,
        seed: settings.seed,
        agreement: Some(out.agreement),
        fit: out.fit,
    };
    Ok((out.model, record))
}

/// Shared settings of a pipeline run; every seed below derives from `seed`.
pub struct PipelinePlan<'a> {
    pub template: &'a ArchConfig,
    pub options: PipelineOptions,
    pub task: Task,
    pub kd1: &'a TrainSettings,
    pub kd2: &'a TrainSettings,
    pub seed: u64,
}

/// KD-(2) from one pivot into a fresh `plan.template` student per target language.
pub fn kd2_all(
    langs: &Languages,
    pivot: Teacher,
    targets: &[TargetData],
    plan: &PipelinePlan,
) -> Result<(BTreeMap<String, EncoderModel>, Vec<StageRecord>), Error> {
    let mut models = BTreeMap::new();
    let mut records = Vec::new();
    for t in targets {
        let config = student_config(plan.template, t.vocab, plan.task);
        let config = ArchConfig {
            intents: pivot.model.config.intents.clone(),
            tags: pivot.model.config.tags.clone(),
            ..config
        };
        let student = EncoderModel::build(config, derive_seed(plan.seed, &["init", t.lang]))?;
        let settings = stage_settings(plan.kd2, derive_seed(plan.seed, &["kd2", t.lang]));
        let (m, r) = kd_step2(
            langs,
            pivot,
            student,
            *t,
            plan.options.augment,
            plan.task,
            &settings,
            derive_seed(plan.seed, &["paraphrase", t.lang]),
        )?;
        models.insert(t.lang.to_string(), m);
        records.push(r);
    }
    Ok((models, records))
}

/// Both distillation steps for every target language. No labels are read.
#[allow(clippy::too_many_arguments)]
pub fn two_step_pipeline(
    langs: &Languages,
    source: Teacher,
    pivot: &EncoderModel,
    shared: &SubwordVocab,
    d_src: &Corpus,
    src_validation: &Corpus,
    targets: &[TargetData],
    plan: &PipelinePlan,
) -> Result<PipelineRun, Error> {
    let balanced: Vec<String> = if plan.options.balanced {
        targets.iter().map(|t| t.lang.to_string()).collect()
    } else {
        Vec::new()
    };
    let settings = stage_settings(plan.kd1, derive_seed(plan.seed, &["kd1"]));
    let (pivot_model, r1) = kd_step1(langs, source, pivot, shared, d_src, src_validation, &balanced, plan.task, &settings)?;
    let teacher = Teacher {
        model: &pivot_model,
        vocab: shared,
    };
    let (models, mut rest) = kd2_all(langs, teacher, targets, plan)?;
    let mut stages = vec![r1];
    stages.append(&mut rest);
    Ok(PipelineRun {
        pivot: pivot_model,
        targets: models,
        stages,
    })
}

/// Gold-supervised pivot in place of KD-(1), then the same KD-(2).
#[allow(clippy::too_many_arguments)]
pub fn reference_gold_supervised(
    langs: &Languages,
    pivot: &EncoderModel,
    shared: &SubwordVocab,
    annotated: &Corpus,
    src_validation: &Corpus,
    targets: &[TargetData],
    plan: &PipelinePlan,
) -> Result<PipelineRun, Error> {
    let settings = stage_settings(plan.kd1, derive_seed(plan.seed, &["gold"]));
    let (pivot_model, fit) = train_supervised(pivot.clone(), shared, annotated, src_validation, plan.task, &settings)?;
    let r1 = StageRecord {
        stage: "gold-supervised".into(),
        teacher: None,
        student: pivot_model.param_hash(),
        corpora: fingerprints(&[annotated]),
        seed: settings.seed,
        agreement: None,
        fit,
    };
    let teacher = Teacher {
        model: &pivot_model,
        vocab: shared,
    };
    let (models, mut rest) = kd2_all(langs, teacher, targets, plan)?;
    let mut stages = vec![r1];
    stages.append(&mut rest);
    Ok(PipelineRun {
        pivot: pivot_model,
        targets: models,
        stages,
    })
}

struct HardItem {
    tok: Tokenization,
    targets: Vec<usize>,
}

fn hard_loss(config: &ArchConfig, task: Task) -> impl Fn(&mut Session<f32>, &HardItem) -> Result<(Var, f64), Error> + '_ {
    move |s, it| {
        let logits = task_logits(config, s, &it.tok, task)?;
        let ce = cross_entropy_sum(&mut s.graph, logits, &it.targets)?;
        Ok((ce, it.targets.len() as f64))
    }
}

fn class_index(categories: &[String], label: &str) -> Result<usize, Error> {
    categories
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| Error::Invalid(format!("label `{label}` is not a model category")))
}

/// Gold labels of example `i` as class indices (a counted label read).
fn gold_targets(corpus: &Corpus, i: usize, categories: &[String], task: Task) -> Result<Vec<usize>, Error> {
    match task {
        Task::Sentence => {
            let intent = corpus
                .intent(i)?
                .ok_or_else(|| Error::Invalid(format!("{} has no intent", corpus.id(i))))?;
            Ok(vec![class_index(categories, intent)?])
        }
        Task::Word => {
            let slots = corpus
                .slots(i)?
                .ok_or_else(|| Error::Invalid(format!("{} has no slots", corpus.id(i))))?;
            slots.iter().map(|t| class_index(categories, t)).collect()
        }
    }
}

/// Cross-entropy training on gold labels, checkpointed on the gold
/// validation score (intent accuracy or slot F1).
pub fn train_supervised(
    mut model: EncoderModel,
    vocab: &SubwordVocab,
    train: &Corpus,
    validation: &Corpus,
    task: Task,
    settings: &TrainSettings,
) -> Result<(EncoderModel, FitReport), Error> {
    let categories = model.config.categories(task).to_vec();
    let mut items = Vec::with_capacity(train.len());
    for i in 0..train.len() {
        items.push(HardItem {
            tok: model.tokenize(vocab, train.words(i)),
            targets: gold_targets(train, i, &categories, task)?,
        });
    }
    let val_toks: Vec<Tokenization> = validation.examples().map(|e| model.tokenize(vocab, e.words())).collect();
    let ids: Vec<String> = validation.examples().map(|e| e.id().to_string()).collect();
    let config = model.config.clone();
    let validate = |p: &ParamStore<f32>| -> Result<f64, Error> {
        let mut pred = predict_with(&config, p, &val_toks, task)?;
        pred.ids = ids.clone();
        score(&pred, validation)
    };
    let report = fit(&mut model.params, &items, hard_loss(&config, task), validate, settings)?;
    Ok((model, report))
}

/// Arg-max class per unit of every cached example.
pub fn pseudo_labels(cache: &TeacherCache) -> BTreeMap<String, Vec<usize>> {
    cache
        .iter()
        .map(|(id, rows)| (id.clone(), rows.iter().map(|p| argmax(p)).collect()))
        .collect()
}

/// Hard pseudo-labels for the translation of every example: intents carry
/// over, tags follow the translation alignment span by span.
fn translated_pseudo(translated: &Corpus, cache: &TeacherCache, task: Task) -> Result<Vec<Vec<usize>>, Error> {
    let labels = pseudo_labels(cache);
    let mut out = Vec::with_capacity(translated.len());
    for e in translated.examples() {
        let origin = e.origin().unwrap_or(e.id());
        let src = labels.get(origin).ok_or_else(|| DistillError::MissingTarget(e.id().to_string()))?;
        let t = match task {
            Task::Sentence => src.clone(),
            Task::Word => {
                let tags: Vec<&str> = src.iter().map(|&k| cache.categories[k].as_str()).collect();
                let a = e
                    .alignment()
                    .ok_or_else(|| Error::Invalid(format!("{} has no alignment", e.id())))?;
                project_tags(&tags, a)
                    .iter()
                    .map(|t| class_index(&cache.categories, t))
                    .collect::<Result<_, _>>()?
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Translate the unlabeled source data into the target language, label it
/// with the source model's arg-max, and train a target model on it.
#[allow(clippy::too_many_arguments)]
pub fn translate_train_pseudo(
    langs: &Languages,
    source: Teacher,
    d_src: &Corpus,
    src_validation: &Corpus,
    target: TargetData,
    template: &ArchConfig,
    task: Task,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(EncoderModel, StageRecord), Error> {
    for c in [d_src, src_validation] {
        if c.is_labeled() {
            return Err(DistillError::LabeledCorpus(c.name().to_string()).into());
        }
    }
    let config = ArchConfig {
        intents: source.model.config.intents.clone(),
        tags: source.model.config.tags.clone(),
        ..student_config(template, target.vocab, task)
    };
    let mut model = EncoderModel::build(config, derive_seed(seed, &["init", target.lang]))?;
    let train = translate(langs, d_src, langs.source(), target.lang)?;
    let train_labels = translated_pseudo(&train, &TeacherCache::compute(&source, d_src, task)?, task)?;
    let val = translate(langs, src_validation, langs.source(), target.lang)?;
    let val_labels = translated_pseudo(&val, &TeacherCache::compute(&source, src_validation, task)?, task)?;

    let items: Vec<HardItem> = train
        .examples()
        .zip(train_labels)
        .map(|(e, targets)| HardItem {
            tok: model.tokenize(target.vocab, e.words()),
            targets,
        })
        .collect();
    let val_toks: Vec<Tokenization> = val.examples().map(|e| model.tokenize(target.vocab, e.words())).collect();
    let config = model.config.clone();
    let categories = config.categories(task).to_vec();
    let validate = |p: &ParamStore<f32>| -> Result<f64, Error> {
        let pred = predict_with(&config, p, &val_toks, task)?;
        hard_agreement(&pred, &val_labels, &categories)
    };
    let settings = stage_settings(settings, derive_seed(seed, &["pseudo", target.lang]));
    let report = fit(&mut model.params, &items, hard_loss(&config, task), validate, &settings)?;
    let record = StageRecord {
        stage: format!("translate-train-pseudo/{}", target.lang),
        teacher: Some(source.model.param_hash()),
        student: model.param_hash(),
        corpora: fingerprints(&[&train]),
        seed: settings.seed,
        agreement: Some(report.best_score),
        fit: report,
    };
    Ok((model, record))
}

/// Score of predictions against hard labels: accuracy for sentences, span F1 for words.
fn hard_agreement(pred: &PredictionSet, labels: &[Vec<usize>], categories: &[String]) -> Result<f64, Error> {
    let picks = pred.argmax();
    match pred.task {
        Task::Sentence => {
            let hit = picks.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hit as f64 / labels.len().max(1) as f64)
        }
        Task::Word => {
            let names = |v: &Vec<usize>| v.iter().map(|&k| categories[k].clone()).collect::<Vec<_>>();
            let p: Vec<Vec<String>> = picks.iter().map(names).collect();
            let g: Vec<Vec<String>> = labels.iter().map(names).collect();
            Ok(span_f1(&p, &g)?.f1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslateTest {
    /// Keyed by the target-language test ids.
    pub predictions: PredictionSet,
    pub passes: usize,
}

/// Translate target test data into the source language and run the source
/// model there. Word predictions come back through the alignment as
/// one-hot tag distributions, span by span.
pub fn translate_test(langs: &Languages, source: Teacher, test: &Corpus, task: Task) -> Result<TranslateTest, Error> {
    let mut passes = 0;
    let back = translate(langs, &test.unlabeled_view(), test.lang(), langs.source())?;
    passes += 1;
    let pred = source.model.predict_corpus(source.vocab, &back, task)?;
    passes += 1;
    let probs = match task {
        Task::Sentence => pred.probs,
        Task::Word => {
            let k = pred.categories.len();
            let mut out = Vec::with_capacity(back.len());
            for (e, tags) in back.examples().zip(pred.labels()) {
                let a = e
                    .alignment()
                    .ok_or_else(|| Error::Invalid(format!("{} has no alignment", e.id())))?;
                // a[i] is the target position of source word i; invert it.
                let mut inv = vec![0; a.len()];
                for (i, &j) in a.iter().enumerate() {
                    inv[j] = i;
                }
                let projected = project_tags(&tags, &inv);
                let rows = projected
                    .iter()
                    .map(|t| {
                        let c = class_index(&pred.categories, t)?;
                        Ok((0..k).map(|x| if x == c { 1.0 } else { 0.0 }).collect())
                    })
                    .collect::<Result<Vec<Vec<f64>>, Error>>()?;
                out.push(rows);
            }
            out
        }
    };
    Ok(TranslateTest {
        predictions: PredictionSet {
            task,
            ids: test.examples().map(|e| e.id().to_string()).collect(),
            categories: pred.categories,
            probs,
        },
        passes,
    })
}
