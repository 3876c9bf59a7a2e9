use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Transformer,
    Bilstm,
    Cnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Transformer, Family::Bilstm, Family::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::Bilstm => "bilstm",
            Family::Cnn => "cnn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(Family::Transformer),
            "bilstm" => Ok(Family::Bilstm),
            "cnn" => Ok(Family::Cnn),
            other => Err(ModelError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sentence,
    Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Sentence,
    Word,
    Both,
}

impl HeadKind {
    pub fn has(self, task: Task) -> bool {
        matches!(
            (self, task),
            (HeadKind::Both, _) | (HeadKind::Sentence, Task::Sentence) | (HeadKind::Word, Task::Word)
        )
    }
}

impl From<Task> for HeadKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Sentence => HeadKind::Sentence,
            Task::Word => HeadKind::Word,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Edge,
    Pivot,
}

/// Shape of one encoder plus its heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub embed: usize,
    /// Transformer width, concatenated BiLSTM state size, or CNN channels per kernel.
    pub hidden: usize,
    pub layers: usize,
    /// Attention heads (transformer only).
    pub heads: usize,
    /// Feed-forward inner width (transformer only).
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub head: HeadKind,
    pub dropout: f64,
    pub size: SizeClass,
    pub intents: Vec<String>,
    pub tags: Vec<String>,
}

pub const CNN_SENTENCE_KERNELS: [usize; 3] = [3, 4, 5];
pub const CNN_TAGGER_KERNEL: usize = 3;

impl ArchConfig {
    /// Desk-scale edge model. Widths are chosen so the three families land
    /// within a few percent of each other in parameter count.
    pub fn edge(family: Family, head: HeadKind, vocab_size: usize, intents: Vec<String>, tags: Vec<String>) -> Self {
        let (embed, hidden) = match (family, head) {
            (Family::Transformer, _) => (64, 64),
            (Family::Bilstm, _) => (64, 88),
            (Family::Cnn, HeadKind::Word) => (64, 144),
            (Family::Cnn, _) => (64, 112),
        };
        Self {
            family,
            embed,
            hidden,
            layers: 2,
            heads: 4,
            ffn: 3 * hidden,
            max_len: 64,
            vocab_size,
            vocab_hash: String::new(),
            head,
            dropout: 0.1,
            size: SizeClass::Edge,
            intents,
            tags,
        }
    }

    /// Shared-vocabulary transformer pivot of the given width.
    pub fn pivot(hidden: usize, layers: usize, vocab_size: usize, intents: Vec<String>, tags: Vec<String>) -> Self {
        Self {
            family: Family::Transformer,
            embed: hidden,
            hidden,
            layers,
            heads: 4,
            ffn: 3 * hidden,
            max_len: 64,
            vocab_size,
            vocab_hash: String::new(),
            head: HeadKind::Both,
            dropout: 0.1,
            size: SizeClass::Pivot,
            intents,
            tags,
        }
    }

    /// Width of the vector the sentence head reads.
    pub fn sentence_features(&self) -> usize {
        match self.family {
            Family::Cnn => CNN_SENTENCE_KERNELS.len() * self.hidden,
            _ => self.hidden,
        }
    }

    /// Pivots carry a masked-token output bias (the output matrix is tied to the embeddings).
    pub fn has_mlm_head(&self) -> bool {
        self.family == Family::Transformer && self.size == SizeClass::Pivot
    }

    pub fn needs_sentence_start(&self) -> bool {
        self.family == Family::Transformer
    }

    pub fn categories(&self, task: Task) -> &[String] {
        match task {
            Task::Sentence => &self.intents,
            Task::Word => &self.tags,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed == 0 || self.hidden == 0 || self.layers == 0 || self.vocab_size == 0 {
            return bad("sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.head.has(Task::Sentence) && self.intents.is_empty() {
            return bad("sentence head needs intent labels");
        }
        if self.head.has(Task::Word) && self.tags.is_empty() {
            return bad("word head needs tag labels");
        }
        match self.family {
            Family::Transformer => {
                if self.embed != self.hidden {
                    return bad("transformer embed and hidden sizes must match");
                }
                if self.heads == 0 || self.hidden % self.heads != 0 {
                    return bad("transformer hidden size must divide into heads");
                }
                if self.ffn == 0 || self.max_len == 0 {
                    return bad("transformer ffn and max_len must be positive");
                }
            }
            Family::Bilstm => {
                if self.hidden % 2 != 0 {
                    return bad("bilstm hidden size must be even (two directions)");
                }
            }
            Family::Cnn => {}
        }
        Ok(())
    }

    /// Parameter count implied by the config, without building the model.
    pub fn param_count(&self) -> usize {
        let (e, h, v) = (self.embed, self.hidden, self.vocab_size);
        let mut n = v * e;
        match self.family {
            Family::Transformer => {
                n += self.max_len * h;
                let per_layer = 4 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * self.ffn + self.ffn) + (self.ffn * h + h);
                n += self.layers * per_layer + 2 * h;
            }
            Family::Bilstm => {
                let d = h / 2;
                for l in 0..self.layers {
                    let input = if l == 0 { e } else { h };
                    n += 2 * (input * 4 * d + d * 4 * d + 4 * d);
                }
            }
            Family::Cnn => {
                if self.head.has(Task::Sentence) {
                    n += CNN_SENTENCE_KERNELS.iter().map(|k| k * e * h + h).sum::<usize>();
                }
                if self.head.has(Task::Word) {
                    for l in 0..self.layers {
                        let input = if l == 0 { e } else { h };
                        n += CNN_TAGGER_KERNEL * input * h + h;
                    }
                }
            }
        }
        if self.head.has(Task::Sentence) {
            n += self.sentence_features() * self.intents.len() + self.intents.len();
        }
        if self.head.has(Task::Word) {
            n += h * self.tags.len() + self.tags.len();
        }
        if self.has_mlm_head() {
            n += v;
        }
        n
    }
}
