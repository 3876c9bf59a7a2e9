//! Intent accuracy, span F1, per-language rows, transfer grids and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::{argmax, Family, PredictionSet, Task};
use crate::synthlang::bio::{extract_spans, Span};
use crate::synthlang::Corpus;
use crate::Error;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("predictions do not match the gold corpus: {0}")]
    Mismatch(String),
    #[error("example {example}: {predicted} predicted tags for {gold} gold tags")]
    Length { example: usize, predicted: usize, gold: usize },
    #[error("rows cover different languages: {0}")]
    Languages(String),
}

fn check_ids(pred: &PredictionSet, gold: &Corpus) -> Result<(), EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Mismatch(format!("{} predictions for {} examples", pred.len(), gold.len())));
    }
    if pred.ids.len() != gold.len() {
        return Err(EvalError::Mismatch("predictions carry no example ids".into()));
    }
    for (i, id) in pred.ids.iter().enumerate() {
        if id != gold.id(i) {
            return Err(EvalError::Mismatch(format!("example {i} is `{id}`, gold has `{}`", gold.id(i))));
        }
    }
    Ok(())
}

/// Fraction of examples whose arg-max intent equals the gold intent.
pub fn accuracy(pred: &PredictionSet, gold: &Corpus) -> Result<f64, Error> {
    if pred.task != Task::Sentence {
        return Err(EvalError::Mismatch("accuracy needs sentence predictions".into()).into());
    }
    check_ids(pred, gold)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (i, probs) in pred.probs.iter().enumerate() {
        let want = gold
            .intent(i)?
            .ok_or_else(|| EvalError::Mismatch(format!("{} has no intent", gold.id(i))))?;
        hit += usize::from(pred.categories[argmax(&probs[0])] == want);
    }
    Ok(hit as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SpanScores {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            correct,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged exact-match span scores over a corpus of tag sequences.
/// Stray `I-` tags open a new span before matching.
pub fn span_f1<P: AsRef<str>, G: AsRef<str>>(pred: &[Vec<P>], gold: &[Vec<G>]) -> Result<SpanScores, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Mismatch(format!("{} predicted sequences for {} gold", pred.len(), gold.len())));
    }
    let (mut correct, mut predicted, mut total) = (0, 0, 0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::Length {
                example: i,
                predicted: p.len(),
                gold: g.len(),
            });
        }
        let ps: BTreeSet<Span> = extract_spans(p).into_iter().collect();
        let gs: BTreeSet<Span> = extract_spans(g).into_iter().collect();
        correct += ps.intersection(&gs).count();
        predicted += ps.len();
        total += gs.len();
    }
    Ok(SpanScores::from_counts(correct, predicted, total))
}

/// Span scores of word-task predictions against a labeled corpus.
pub fn tagging_f1(pred: &PredictionSet, gold: &Corpus) -> Result<SpanScores, Error> {
    if pred.task != Task::Word {
        return Err(EvalError::Mismatch("span F1 needs word predictions".into()).into());
    }
    check_ids(pred, gold)?;
    let mut tags = Vec::with_capacity(gold.len());
    for i in 0..gold.len() {
        let t = gold
            .slots(i)?
            .ok_or_else(|| EvalError::Mismatch(format!("{} has no slots", gold.id(i))))?;
        tags.push(t.to_vec());
    }
    Ok(span_f1(&pred.labels(), &tags)?)
}

/// Task score: intent accuracy or slot F1.
pub fn score(pred: &PredictionSet, gold: &Corpus) -> Result<f64, Error> {
    match pred.task {
        Task::Sentence => accuracy(pred, gold),
        Task::Word => Ok(tagging_f1(pred, gold)?.f1),
    }
}

/// Where a row sits in a report; rows render in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Source,
    Reference,
    Baseline,
    Ours,
    Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub kind: RowKind,
    pub task: Task,
    pub source_lang: String,
    /// Score per language, including the source language when measured.
    pub scores: BTreeMap<String, f64>,
    pub source: Option<f64>,
    /// Mean over target languages only.
    pub average: f64,
}

impl MetricsRow {
    pub fn new(
        model: impl Into<String>,
        kind: RowKind,
        task: Task,
        source_lang: &str,
        scores: BTreeMap<String, f64>,
    ) -> Result<Self, EvalError> {
        let targets: Vec<f64> = scores.iter().filter(|(l, _)| *l != source_lang).map(|(_, &v)| v).collect();
        if targets.is_empty() {
            return Err(EvalError::Languages("row has no target-language score".into()));
        }
        Ok(Self {
            model: model.into(),
            kind,
            task,
            source_lang: source_lang.to_string(),
            source: scores.get(source_lang).copied(),
            average: targets.iter().sum::<f64>() / targets.len() as f64,
            scores,
        })
    }
}

/// Stage-2 minus stage-1 scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub label: String,
    pub per_lang: BTreeMap<String, f64>,
    pub average: f64,
}

impl Delta {
    /// Difference of two deltas, e.g. between pivot sizes.
    pub fn minus(&self, other: &Delta) -> Result<Delta, EvalError> {
        same_langs(&self.per_lang, &other.per_lang)?;
        Ok(Delta {
            label: format!("{} vs {}", self.label, other.label),
            per_lang: self.per_lang.iter().map(|(l, v)| (l.clone(), v - other.per_lang[l])).collect(),
            average: self.average - other.average,
        })
    }
}

fn same_langs(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<(), EvalError> {
    if a.keys().eq(b.keys()) {
        Ok(())
    } else {
        let names = |m: &BTreeMap<String, f64>| m.keys().cloned().collect::<Vec<_>>().join(",");
        Err(EvalError::Languages(format!("[{}] vs [{}]", names(a), names(b))))
    }
}

/// How much the second distillation step loses (negative) or gains.
pub fn dissipation_delta(stage1: &MetricsRow, stage2: &MetricsRow) -> Result<Delta, EvalError> {
    same_langs(&stage1.scores, &stage2.scores)?;
    Ok(Delta {
        label: stage2.model.clone(),
        per_lang: stage1
            .scores
            .iter()
            .map(|(l, v)| (l.clone(), stage2.scores[l] - v))
            .collect(),
        average: stage2.average - stage1.average,
    })
}

/// Source-architecture rows by target-architecture columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferGrid {
    pub label: String,
    pub task: Task,
    pub families: Vec<Family>,
    /// The source model's own score on source-language test data, per row.
    pub source_scores: Vec<Option<f64>>,
    pub scores: Vec<Vec<Option<f64>>>,
    /// `source_scores[r] - scores[r][c]`.
    pub drops: Vec<Vec<Option<f64>>>,
}

impl TransferGrid {
    pub fn new(label: impl Into<String>, task: Task) -> Self {
        let n = Family::ALL.len();
        Self {
            label: label.into(),
            task,
            families: Family::ALL.to_vec(),
            source_scores: vec![None; n],
            scores: vec![vec![None; n]; n],
            drops: vec![vec![None; n]; n],
        }
    }

    fn index(&self, f: Family) -> usize {
        self.families.iter().position(|&x| x == f).expect("grid covers every family")
    }

    pub fn set_source_score(&mut self, src: Family, score: f64) {
        let r = self.index(src);
        self.source_scores[r] = Some(score);
        self.refresh(r);
    }

    pub fn set(&mut self, src: Family, tgt: Family, score: f64) {
        let (r, c) = (self.index(src), self.index(tgt));
        self.scores[r][c] = Some(score);
        self.refresh(r);
    }

    fn refresh(&mut self, r: usize) {
        for c in 0..self.families.len() {
            self.drops[r][c] = match (self.source_scores[r], self.scores[r][c]) {
                (Some(s), Some(v)) => Some(s - v),
                _ => None,
            };
        }
    }

    pub fn get(&self, src: Family, tgt: Family) -> Option<f64> {
        self.scores[self.index(src)][self.index(tgt)]
    }

    pub fn is_complete(&self) -> bool {
        self.scores.iter().flatten().all(Option::is_some)
    }

    pub fn is_empty(&self) -> bool {
        self.scores.iter().flatten().all(Option::is_none)
    }

    /// Rows and columns in the fixed family order; blank cells stay empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("source");
        for f in &self.families {
            let _ = write!(out, ",{f}");
        }
        out.push_str(",source_score\n");
        for (r, f) in self.families.iter().enumerate() {
            out.push_str(f.name());
            for c in 0..self.families.len() {
                let _ = write!(out, ",{}", cell(self.scores[r][c]));
            }
            let _ = writeln!(out, ",{}", cell(self.source_scores[r]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub title: String,
    pub notes: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub deltas: Vec<Delta>,
    pub grids: Vec<TransferGrid>,
}

pub const SCORING_NOTES: [&str; 2] = [
    "Slot F1 is micro-averaged exact span match over the whole test set.",
    "Tag sequences are repaired before span extraction: an I- tag that does not continue a span opens one.",
];

/// Assemble rows (stable-sorted by kind), deltas and non-empty grids.
pub fn build_report(title: &str, mut rows: Vec<MetricsRow>, deltas: Vec<Delta>, grids: Vec<TransferGrid>) -> ExperimentReport {
    rows.sort_by_key(|r| r.kind);
    ExperimentReport {
        title: title.to_string(),
        notes: SCORING_NOTES.iter().map(|s| s.to_string()).collect(),
        rows,
        deltas,
        grids: grids.into_iter().filter(|g| !g.is_empty()).collect(),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn signed_pct(v: f64) -> String {
    format!("{:+.1}", 100.0 * v)
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Languages seen in any row, source first.
    fn languages(&self) -> Vec<String> {
        let mut src: Vec<String> = Vec::new();
        let mut rest = BTreeSet::new();
        for r in &self.rows {
            for l in r.scores.keys() {
                if *l == r.source_lang {
                    if !src.contains(l) {
                        src.push(l.clone());
                    }
                } else {
                    rest.insert(l.clone());
                }
            }
        }
        src.into_iter().chain(rest.into_iter()).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.title);
        for n in &self.notes {
            let _ = writeln!(out, "- {n}");
        }
        for task in [Task::Sentence, Task::Word] {
            let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.task == task).collect();
            if rows.is_empty() {
                continue;
            }
            let langs: Vec<String> = self
                .languages()
                .into_iter()
                .filter(|l| rows.iter().any(|r| r.scores.contains_key(l)))
                .collect();
            let metric = match task {
                Task::Sentence => "Intent accuracy",
                Task::Word => "Slot F1",
            };
            let _ = writeln!(out, "\n## {metric}\n");
            let _ = writeln!(out, "| Model | {} | Avg |", langs.join(" | "));
            let _ = writeln!(out, "|---|{}---|", "---|".repeat(langs.len()));
            for r in rows {
                let cells: Vec<String> = langs.iter().map(|l| pct(r.scores.get(l).copied())).collect();
                let _ = writeln!(out, "| {} | {} | {} |", r.model, cells.join(" | "), pct(Some(r.average)));
            }
        }
        if !self.deltas.is_empty() {
            let langs: BTreeSet<&String> = self.deltas.iter().flat_map(|d| d.per_lang.keys()).collect();
            let langs: Vec<&String> = langs.into_iter().collect();
            let _ = writeln!(out, "\n## Dissipation (stage 2 minus stage 1)\n");
            let _ = writeln!(
                out,
                "| Run | {} | Δ avg |",
                langs.iter().map(|l| l.as_str()).collect::<Vec<_>>().join(" | ")
            );
            let _ = writeln!(out, "|---|{}---|", "---|".repeat(langs.len()));
            for d in &self.deltas {
                let cells: Vec<String> = langs
                    .iter()
                    .map(|l| d.per_lang.get(*l).map(|&v| signed_pct(v)).unwrap_or_else(|| "-".into()))
                    .collect();
                let _ = writeln!(out, "| {} | {} | {} |", d.label, cells.join(" | "), signed_pct(d.average));
            }
        }
        for g in &self.grids {
            for (title, m) in [("target average", &g.scores), ("drop from source model", &g.drops)] {
                let _ = writeln!(out, "\n## {} ({title}; rows: source, columns: target)\n", g.label);
                let names: Vec<&str> = g.families.iter().map(|f| f.name()).collect();
                let _ = writeln!(out, "| | {} |", names.join(" | "));
                let _ = writeln!(out, "|---|{}", "---|".repeat(names.len()));
                for (r, name) in names.iter().enumerate() {
                    let cells: Vec<String> = m[r].iter().map(|&v| pct(v)).collect();
                    let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
