//! Synthetic intent/slot benchmark: a template grammar, cipher languages that
//! act as an exact translation oracle, a rule-based paraphraser and gated corpora.

pub mod bio;
mod corpus;
mod generate;
mod grammar;
mod io;
mod transform;

pub use corpus::{Corpus, Example, LabelAudit, LABEL_GATE_MESSAGE};
pub use generate::{generate, paraphrase, translate, Benchmark, LanguageSplits, SplitSizes, SPLITS};
pub use grammar::{Grammar, GrammarConfig, IntentConfig, LexiconConfig, SlotTypeConfig, Utterance, WordClass};
pub use io::{from_jsonl, to_jsonl};
pub use transform::{LanguageSpec, LanguageTransform, Languages, Reorder, SynthConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid grammar or language config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("word `{word}` is not in the {lang} vocabulary")]
    Oov { word: String, lang: String },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("label access in label-free pipeline (corpus {0})")]
    LabelGate(String),
    #[error("corpus io: {0}")]
    Io(String),
}
