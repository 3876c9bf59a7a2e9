use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::SynthError;

/// One utterance. Gold labels are private and only reachable through a
/// labeled [`Corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    id: String,
    lang: String,
    words: Vec<String>,
    intent: Option<String>,
    slots: Option<Vec<String>>,
    /// Id of the example this one was translated or paraphrased from.
    origin: Option<String>,
    /// `alignment[i]` is the position in the origin example of word `i`.
    alignment: Option<Vec<usize>>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        lang: impl Into<String>,
        words: Vec<String>,
        intent: Option<String>,
        slots: Option<Vec<String>>,
    ) -> Result<Self, SynthError> {
        let id = id.into();
        if let Some(s) = &slots {
            if s.len() != words.len() {
                return Err(SynthError::Invalid(format!(
                    "example {id}: {} slot tags for {} words",
                    s.len(),
                    words.len()
                )));
            }
        }
        Ok(Self {
            id,
            lang: lang.into(),
            words,
            intent,
            slots,
            origin: None,
            alignment: None,
        })
    }

    pub(crate) fn with_origin(mut self, origin: String, alignment: Option<Vec<usize>>) -> Self {
        self.origin = Some(origin);
        self.alignment = alignment;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    pub fn alignment(&self) -> Option<&[usize]> {
        self.alignment.as_deref()
    }

    pub(crate) fn has_labels(&self) -> bool {
        self.intent.is_some() || self.slots.is_some()
    }

    pub(crate) fn strip_labels(&self) -> Example {
        Example {
            intent: None,
            slots: None,
            ..self.clone()
        }
    }
}

/// Counts label reads against one corpus (shared by every view and derivative of it).
#[derive(Debug, Default)]
pub struct LabelAudit {
    attempted: AtomicU64,
    successful: AtomicU64,
}

impl LabelAudit {
    pub fn attempted(&self) -> u64 {
        self.attempted.load(Ordering::SeqCst)
    }

    pub fn successful(&self) -> u64 {
        self.successful.load(Ordering::SeqCst)
    }

    pub fn blocked(&self) -> u64 {
        self.attempted() - self.successful()
    }

    fn record(&self, allowed: bool) {
        self.attempted.fetch_add(1, Ordering::SeqCst);
        if allowed {
            self.successful.fetch_add(1, Ordering::SeqCst);
        }
    }
}

/// A language-homogeneous collection of examples behind a label gate.
#[derive(Clone, Debug)]
pub struct Corpus {
    name: String,
    lang: String,
    examples: Arc<Vec<Example>>,
    labels_visible: bool,
    audit: Arc<LabelAudit>,
}

pub const LABEL_GATE_MESSAGE: &str = "label access in label-free pipeline";

impl Corpus {
    pub fn new(name: impl Into<String>, lang: impl Into<String>, examples: Vec<Example>) -> Result<Self, SynthError> {
        let lang = lang.into();
        if let Some(e) = examples.iter().find(|e| e.lang != lang) {
            return Err(SynthError::Invalid(format!(
                "example {} has language {} in a {} corpus",
                e.id, e.lang, lang
            )));
        }
        Ok(Self {
            name: name.into(),
            lang,
            examples: Arc::new(examples),
            labels_visible: true,
            audit: Arc::new(LabelAudit::default()),
        })
    }

    /// A corpus derived from `parent` (translation, paraphrase); label reads are
    /// charged to the parent's audit.
    pub(crate) fn derived(parent: &Corpus, name: String, lang: String, examples: Vec<Example>) -> Self {
        let labels_visible = parent.labels_visible;
        let examples = if labels_visible {
            examples
        } else {
            examples.iter().map(Example::strip_labels).collect()
        };
        Self {
            name,
            lang,
            examples: Arc::new(examples),
            labels_visible,
            audit: Arc::clone(&parent.audit),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels_visible
    }

    pub fn audit(&self) -> &LabelAudit {
        &self.audit
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn examples(&self) -> impl ExactSizeIterator<Item = &Example> {
        self.examples.iter()
    }

    pub fn words(&self, i: usize) -> &[String] {
        &self.examples[i].words
    }

    pub fn id(&self, i: usize) -> &str {
        &self.examples[i].id
    }

    /// Same examples with labels hidden; every label read through it fails and is counted.
    pub fn unlabeled_view(&self) -> Corpus {
        Corpus {
            labels_visible: false,
            ..self.clone()
        }
    }

    fn gate(&self) -> Result<(), SynthError> {
        self.audit.record(self.labels_visible);
        if self.labels_visible {
            Ok(())
        } else {
            Err(SynthError::LabelGate(self.name.clone()))
        }
    }

    pub fn intent(&self, i: usize) -> Result<Option<&str>, SynthError> {
        self.gate()?;
        Ok(self.examples[i].intent.as_deref())
    }

    pub fn slots(&self, i: usize) -> Result<Option<&[String]>, SynthError> {
        self.gate()?;
        Ok(self.examples[i].slots.as_deref())
    }

    /// Both labels in one counted read.
    pub(crate) fn labels(&self, i: usize) -> Result<(Option<&str>, Option<&[String]>), SynthError> {
        self.gate()?;
        let e = &self.examples[i];
        Ok((e.intent.as_deref(), e.slots.as_deref()))
    }

    pub(crate) fn rebuild(&self, name: String, examples: Vec<Example>) -> Corpus {
        Corpus::derived(self, name, self.lang.clone(), examples)
    }

    /// First `n` examples as a separate view sharing the audit.
    pub fn head(&self, n: usize) -> Corpus {
        let ex: Vec<Example> = self.examples.iter().take(n).cloned().collect();
        Corpus::derived(self, format!("{}[..{n}]", self.name), self.lang.clone(), ex)
    }

    /// True when no example carries gold labels at all.
    pub fn is_label_free(&self) -> bool {
        !self.examples.iter().any(Example::has_labels)
    }
}
