//! Distillation losses, teacher caches and the distillation job.

mod pipeline;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pipeline::{
    two_step_pipeline, kd2_all, kd_step1, kd_step2, pseudo_labels, reference_gold_supervised, student_config,
    train_supervised, translate_test, translate_train_pseudo, PipelineOptions, PipelinePlan, PipelineRun, StageRecord,
    TargetData, TranslateTest, TRANSLATE_TEST_PASSES,
};

use crate::models::{argmax, predict_with, task_logits, EncoderModel, PredictionSet, Task};
use crate::numeric::{Graph, Real, Tensor, Var};
use crate::synthlang::Corpus;
use crate::tokenize::{SubwordVocab, Tokenization, TokenizeError};
use crate::train::{fit, FitReport, TrainSettings};
use crate::Error;

/// Student probabilities are clamped here before the log.
pub const PROB_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("distributions differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("not a probability distribution (sum {0})")]
    NotDistribution(f64),
    #[error("teacher and student disagree on categories")]
    CategoryMismatch,
    #[error("word-level distillation needs first-subword alignments")]
    MissingAlignment,
    #[error("corpus `{0}` exposes labels; distillation only takes unlabeled views")]
    LabeledCorpus(String),
    #[error("no teacher distribution for `{0}`")]
    MissingTarget(String),
    #[error("balanced distillation is not applied to the word task")]
    BalancedWordTask,
    #[error("teacher cache: {0}")]
    Cache(String),
}

fn check_distribution(p: &[f64]) -> Result<(), DistillError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(DistillError::NotDistribution(s));
    }
    Ok(())
}

/// KL(teacher ‖ student) in nats. Zero-probability teacher terms vanish.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> Result<f64, DistillError> {
    if teacher.len() != student.len() {
        return Err(DistillError::Length(teacher.len(), student.len()));
    }
    check_distribution(teacher)?;
    check_distribution(student)?;
    let kl: f64 = teacher
        .iter()
        .zip(student)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (t.ln() - s.max(PROB_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Mean KL over sentences, or over aligned (example, word) pairs for the
/// word task. `alignment[e][k]` pairs the first subwords of word `k` in the
/// teacher and student tokenizations.
pub fn kd_loss(teacher: &PredictionSet, student: &PredictionSet, alignment: Option<&[Vec<(usize, usize)>]>) -> Result<f64, Error> {
    if teacher.task != student.task || teacher.categories != student.categories {
        return Err(DistillError::CategoryMismatch.into());
    }
    if teacher.len() != student.len() {
        return Err(DistillError::Length(teacher.len(), student.len()).into());
    }
    let (mut total, mut units) = (0.0, 0usize);
    match teacher.task {
        Task::Sentence => {
            for (t, s) in teacher.probs.iter().zip(&student.probs) {
                total += kl_divergence(&t[0], &s[0])?;
                units += 1;
            }
        }
        Task::Word => {
            let alignment = alignment.ok_or(DistillError::MissingAlignment)?;
            if alignment.len() != teacher.len() {
                return Err(DistillError::Length(alignment.len(), teacher.len()).into());
            }
            for ((t, s), pairs) in teacher.probs.iter().zip(&student.probs).zip(alignment) {
                if pairs.len() != t.len() || pairs.len() != s.len() {
                    return Err(TokenizeError::WordCountMismatch {
                        teacher: t.len(),
                        student: s.len(),
                    }
                    .into());
                }
                for k in 0..pairs.len() {
                    total += kl_divergence(&t[k], &s[k])?;
                    units += 1;
                }
            }
        }
    }
    Ok(if units == 0 { 0.0 } else { total / units as f64 })
}

/// Summed row-wise KL(teacher ‖ softmax(logits)) as a graph node, so the
/// gradient reaches the student only.
pub fn kd_loss_graph<T: Real>(g: &mut Graph<T>, logits: Var, teacher: &Tensor<T>) -> Result<Var, Error> {
    let logp = g.log_softmax(logits)?;
    if g.value(logp).shape() != teacher.shape() {
        return Err(DistillError::Length(g.value(logp).len(), teacher.len()).into());
    }
    let entropy: f64 = teacher
        .data()
        .iter()
        .map(|x| x.to_f64_lossy())
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    let t = g.constant(teacher.clone());
    let cross = g.mul(logp, t)?;
    let cross = g.sum(cross);
    let cross = g.scale(cross, -1.0);
    let h = g.constant(Tensor::scalar(T::from_f64_lossy(entropy)));
    Ok(g.add(cross, h)?)
}

/// Frozen-teacher distributions keyed by example id.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub task: Task,
    pub categories: Vec<String>,
    entries: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    task: Task,
    categories: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    probs: Vec<Vec<f64>>,
}

impl TeacherCache {
    /// One eval-mode teacher pass over the words of `corpus`.
    pub fn compute(teacher: &Teacher, corpus: &Corpus, task: Task) -> Result<Self, Error> {
        let p = teacher.model.predict_corpus(teacher.vocab, corpus, task)?;
        Ok(Self {
            task,
            categories: p.categories,
            entries: p.ids.into_iter().zip(p.probs).collect(),
        })
    }

    pub fn get(&self, id: &str) -> Option<&Vec<Vec<f64>>> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<Vec<f64>>)> {
        self.entries.iter()
    }

    /// Header line, then one `{"id", "probs"}` object per example.
    pub fn to_jsonl(&self) -> String {
        let header = CacheHeader {
            task: self.task,
            categories: self.categories.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes") + "\n";
        for (id, probs) in &self.entries {
            let line = CacheLine {
                id: id.clone(),
                probs: probs.clone(),
            };
            out += &(serde_json::to_string(&line).expect("line serializes") + "\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, Error> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: CacheHeader = serde_json::from_str(lines.next().ok_or_else(|| DistillError::Cache("empty file".into()))?)?;
        let mut entries = BTreeMap::new();
        for l in lines {
            let line: CacheLine = serde_json::from_str(l)?;
            entries.insert(line.id, line.probs);
        }
        Ok(Self {
            task: header.task,
            categories: header.categories,
            entries,
        })
    }
}

/// A frozen model together with its tokenizer.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a SubwordVocab,
}

/// Where a training set's soft targets come from.
#[derive(Clone, Copy)]
pub enum Targets<'a> {
    /// Run the job's teacher on the set.
    Teacher,
    /// Look each example up by its own id.
    Cached(&'a TeacherCache),
    /// Look each example up by the id it was translated from; word rows
    /// follow the translation alignment.
    Inherited(&'a TeacherCache),
}

#[derive(Clone, Copy)]
pub struct KdSet<'a> {
    pub corpus: &'a Corpus,
    pub targets: Targets<'a>,
    /// Examples drawn per epoch, as a multiple of the set size.
    pub weight: f64,
}

impl<'a> KdSet<'a> {
    pub fn new(corpus: &'a Corpus, targets: Targets<'a>) -> Self {
        Self {
            corpus,
            targets,
            weight: 1.0,
        }
    }

    /// Soft targets for every example, in corpus order.
    pub fn resolve(&self, teacher: &Teacher, task: Task) -> Result<Vec<Vec<Vec<f64>>>, Error> {
        let computed;
        let (cache, by_origin) = match self.targets {
            Targets::Teacher => {
                computed = TeacherCache::compute(teacher, self.corpus, task)?;
                (&computed, false)
            }
            Targets::Cached(c) => (c, false),
            Targets::Inherited(c) => (c, true),
        };
        if cache.task != task || cache.categories != teacher.model.config.categories(task) {
            return Err(DistillError::CategoryMismatch.into());
        }
        let mut out = Vec::with_capacity(self.corpus.len());
        for e in self.corpus.examples() {
            let key = if by_origin { e.origin().unwrap_or(e.id()) } else { e.id() };
            let rows = cache.get(key).ok_or_else(|| DistillError::MissingTarget(e.id().to_string()))?;
            let rows = match (task, by_origin, e.alignment()) {
                (Task::Word, true, Some(a)) => a
                    .iter()
                    .map(|&k| rows.get(k).cloned().ok_or_else(|| DistillError::MissingTarget(e.id().to_string())))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => rows.clone(),
            };
            out.push(rows);
        }
        Ok(out)
    }
}

pub struct DistillJob<'a> {
    pub name: String,
    pub teacher: Teacher<'a>,
    /// Initial student; its head must share the teacher's categories.
    pub student: EncoderModel,
    pub student_vocab: &'a SubwordVocab,
    pub task: Task,
    pub train: Vec<KdSet<'a>>,
    /// Held-out unlabeled slice scored by agreement with the teacher.
    pub validation: &'a Corpus,
    pub settings: TrainSettings,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub model: EncoderModel,
    pub fit: FitReport,
    /// Student/teacher arg-max agreement on the validation slice at the kept epoch.
    pub agreement: f64,
    pub items_per_epoch: usize,
}

pub(crate) struct KdItem {
    tok: Tokenization,
    target: Tensor<f32>,
}

fn kd_item(tok: Tokenization, rows: &[Vec<f64>], id: &str, task: Task) -> Result<KdItem, Error> {
    let units = match task {
        Task::Sentence => 1,
        Task::Word => tok.word_count(),
    };
    if rows.len() != units {
        return Err(TokenizeError::WordCountMismatch {
            teacher: rows.len(),
            student: units,
        }
        .into());
    }
    let cols = rows.first().map_or(0, Vec::len);
    let data: Vec<f32> = rows.iter().flatten().map(|&p| p as f32).collect();
    let target = Tensor::matrix(units, cols, data).map_err(|e| DistillError::Cache(format!("{id}: {e}")))?;
    Ok(KdItem { tok, target })
}

/// Fraction of units where two prediction sets pick the same class.
pub fn agreement(a: &PredictionSet, b: &PredictionSet) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for (x, y) in a.probs.iter().zip(&b.probs) {
        for (p, q) in x.iter().zip(y) {
            same += usize::from(argmax(p) == argmax(q));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

/// Hex SHA-256 over ids and words (never labels).
pub fn corpus_fingerprint(c: &Corpus) -> String {
    let mut h = Sha256::new();
    for e in c.examples() {
        h.update(e.id().as_bytes());
        h.update([0]);
        for w in e.words() {
            h.update(w.as_bytes());
            h.update([1]);
        }
        h.update([2]);
    }
    hex::encode(h.finalize())
}

/// Train the student to match the frozen teacher on unlabeled data.
pub fn distill(job: DistillJob) -> Result<DistillOutcome, Error> {
    let task = job.task;
    if job.teacher.model.config.categories(task) != job.student.config.categories(task) {
        return Err(DistillError::CategoryMismatch.into());
    }
    for c in job.train.iter().map(|s| s.corpus).chain([job.validation]) {
        if c.is_labeled() {
            return Err(DistillError::LabeledCorpus(c.name().to_string()).into());
        }
    }
    let needs_start = job.student.config.needs_sentence_start();
    let mut items = Vec::new();
    for set in &job.train {
        let targets = set.resolve(&job.teacher, task)?;
        let n = set.corpus.len();
        let draw = (set.weight * n as f64).round() as usize;
        for k in 0..draw {
            let i = k % n;
            let tok = job.student_vocab.encode(set.corpus.words(i), needs_start);
            items.push(kd_item(tok, &targets[i], set.corpus.id(i), task)?);
        }
    }
    let val_teacher = job.teacher.model.predict_corpus(job.teacher.vocab, job.validation, task)?;
    let val_toks: Vec<Tokenization> = job
        .validation
        .examples()
        .map(|e| job.student_vocab.encode(e.words(), needs_start))
        .collect();
    let config = job.student.config.clone();
    let loss = |s: &mut crate::numeric::Session<f32>, it: &KdItem| -> Result<(Var, f64), Error> {
        let logits = task_logits(&config, s, &it.tok, task)?;
        let kl = kd_loss_graph(&mut s.graph, logits, &it.target)?;
        Ok((kl, it.target.rows() as f64))
    };
    let validate = |p: &crate::numeric::ParamStore<f32>| -> Result<f64, Error> {
        let student = predict_with(&config, p, &val_toks, task)?;
        Ok(agreement(&val_teacher, &student))
    };
    let mut student = job.student;
    log::info!("{}: distilling on {} items per epoch", job.name, items.len());
    let report = fit(&mut student.params, &items, loss, validate, &job.settings)?;
    Ok(DistillOutcome {
        agreement: report.best_score,
        items_per_epoch: items.len(),
        model: student,
        fit: report,
    })
}

#[cfg(test)]
mod tests;
