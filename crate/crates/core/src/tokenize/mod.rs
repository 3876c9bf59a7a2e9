//! Word-internal byte-pair vocabularies and word/subword index bookkeeping.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synthlang::Corpus;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<s>";
pub const MASK: &str = "<mask>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const MASK_ID: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizeError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("target size {target} is below the character inventory ({inventory})")]
    TargetTooSmall { target: usize, inventory: usize },
    #[error("word count mismatch: teacher has {teacher} words, student has {student}")]
    WordCountMismatch { teacher: usize, student: usize },
    #[error("vocabulary file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Language(String),
    Shared(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<(String, String)>,
    specials: Vec<String>,
    scope: Scope,
    alphabet: Vec<String>,
}

/// Byte-pair vocabulary. Token ids: the four specials, then the alphabet,
/// then merged tokens in merge order.
#[derive(Clone, Debug)]
pub struct SubwordVocab {
    scope: Scope,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

/// Subword ids of one sentence and where each word landed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenization {
    pub ids: Vec<usize>,
    /// Half-open subword range of each word, in `ids` coordinates.
    pub spans: Vec<(usize, usize)>,
    /// `spans[i].0` for every word.
    pub first: Vec<usize>,
    /// 1 when a sentence-start token was prepended.
    pub offset: usize,
}

impl Tokenization {
    pub fn word_count(&self) -> usize {
        self.spans.len()
    }
}

fn specials() -> Vec<String> {
    [PAD, UNK, CLS, MASK].iter().map(|s| s.to_string()).collect()
}

impl SubwordVocab {
    fn assemble(scope: Scope, alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        let mut tokens = specials();
        tokens.extend(alphabet.iter().map(|c| c.to_string()));
        let mut ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut ranks = HashMap::new();
        for (r, (a, b)) in merges.iter().enumerate() {
            let t = format!("{a}{b}");
            if !ids.contains_key(&t) {
                ids.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
            ranks.entry((a.clone(), b.clone())).or_insert(r);
        }
        Self {
            scope,
            alphabet,
            merges,
            tokens,
            ids,
            ranks,
        }
    }

    pub fn scope(&self) -> &Scope {
        &self.scope
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Subword strings of one word.
    pub fn split_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(r) = best else { break };
            let (a, b) = &self.merges[r];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S], sentence_start: bool) -> Tokenization {
        let offset = usize::from(sentence_start);
        let mut ids = Vec::new();
        if sentence_start {
            ids.push(CLS_ID);
        }
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            for piece in self.split_word(w.as_ref()) {
                ids.push(self.id(&piece).unwrap_or(UNK_ID));
            }
            if ids.len() == start {
                ids.push(UNK_ID);
            }
            spans.push((start, ids.len()));
        }
        let first = spans.iter().map(|s| s.0).collect();
        Tokenization {
            ids,
            spans,
            first,
            offset,
        }
    }

    pub fn decode(&self, tok: &Tokenization) -> Vec<String> {
        tok.spans
            .iter()
            .map(|&(s, e)| tok.ids[s..e].iter().map(|&id| self.token(id).unwrap_or(UNK)).collect())
            .collect()
    }

    /// Fraction of emitted subwords that are the unknown token.
    pub fn unknown_rate<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for s in sentences {
            let t = self.encode(s, false);
            unk += t.ids.iter().filter(|&&i| i == UNK_ID).count();
            total += t.ids.len();
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> String {
        let f = VocabFile {
            merges: self.merges.clone(),
            specials: specials(),
            scope: self.scope.clone(),
            alphabet: self.alphabet.iter().map(|c| c.to_string()).collect(),
        };
        serde_json::to_string(&f).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizeError> {
        let f: VocabFile = serde_json::from_str(text).map_err(|e| TokenizeError::Format(e.to_string()))?;
        if f.specials != specials() {
            return Err(TokenizeError::Format(format!("unexpected specials {:?}", f.specials)));
        }
        let mut alphabet = Vec::with_capacity(f.alphabet.len());
        for s in &f.alphabet {
            let mut cs = s.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => return Err(TokenizeError::Format(format!("alphabet entry `{s}` is not one character"))),
            }
        }
        Ok(Self::assemble(f.scope, alphabet, f.merges))
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Learn merges over the words of `corpora` until `target_size` non-special
/// tokens exist or no adjacent pair occurs twice. Ties go to the
/// lexicographically smallest merged token, then the smallest pair.
pub fn train_bpe(corpora: &[&Corpus], target_size: usize, scope: Scope) -> Result<SubwordVocab, TokenizeError> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for c in corpora {
        for e in c.examples() {
            for w in e.words() {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    train_bpe_counts(&freq, target_size, scope)
}

pub fn train_bpe_counts(freq: &BTreeMap<&str, usize>, target_size: usize, scope: Scope) -> Result<SubwordVocab, TokenizeError> {
    if freq.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut alphabet: Vec<char> = freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    if target_size < alphabet.len() {
        return Err(TokenizeError::TargetTooSmall {
            target: target_size,
            inventory: alphabet.len(),
        });
    }
    let mut words: Vec<(Vec<String>, usize)> = freq
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| c.to_string()).collect(), n))
        .collect();
    let mut known: std::collections::HashSet<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut merges = Vec::new();
    while known.len() < target_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb)
                    .then_with(|| format!("{}{}", pb.0, pb.1).cmp(&format!("{}{}", pa.0, pa.1)))
                    .then_with(|| pb.cmp(pa))
            })
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((a, b)) = best else { break };
        let joined = format!("{a}{b}");
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        known.insert(joined);
        merges.push((a, b));
    }
    Ok(SubwordVocab::assemble(scope, alphabet, merges))
}

/// Pair every word's first subword in the teacher tokenization with the one
/// in the student tokenization.
pub fn align_first_subwords(teacher: &Tokenization, student: &Tokenization) -> Result<Vec<(usize, usize)>, TokenizeError> {
    if teacher.word_count() != student.word_count() {
        return Err(TokenizeError::WordCountMismatch {
            teacher: teacher.word_count(),
            student: student.word_count(),
        });
    }
    Ok(teacher.first.iter().copied().zip(student.first.iter().copied()).collect())
}
