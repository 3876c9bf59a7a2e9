use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{Grammar, GrammarConfig, WordClass};
use super::SynthError;
use crate::seed::derive_seed;

/// Word-order rule of a synthetic language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    None,
    /// Whole sentence reversed.
    Reverse,
    /// Each preposition follows its phrase and the material before the first
    /// preposition moves to the end: `H p1 r1 p2 r2` becomes `r1 p1 r2 p2 H`.
    HeadFinal,
    /// `out[i] = in[perm[i]]`; only applies to sentences of exactly this length.
    Fixed(Vec<usize>),
}

impl Reorder {
    /// Forward permutation `p` with `out[i] = in[p[i]]`.
    pub fn forward(&self, is_prep: &[bool]) -> Result<Vec<usize>, SynthError> {
        let n = is_prep.len();
        Ok(match self {
            Reorder::None => (0..n).collect(),
            Reorder::Reverse => (0..n).rev().collect(),
            Reorder::HeadFinal => {
                let preps: Vec<usize> = (0..n).filter(|&i| is_prep[i]).collect();
                let Some(&first) = preps.first() else {
                    return Ok((0..n).collect());
                };
                let mut out = Vec::with_capacity(n);
                for (k, &p) in preps.iter().enumerate() {
                    let end = preps.get(k + 1).copied().unwrap_or(n);
                    out.extend(p + 1..end);
                    out.push(p);
                }
                out.extend(0..first);
                out
            }
            Reorder::Fixed(perm) => {
                check_perm(perm, n)?;
                perm.clone()
            }
        })
    }

    /// Inverse permutation `m` with `src[j] = out[m[j]]`, computed from the
    /// reordered sentence alone.
    pub fn inverse(&self, is_prep: &[bool]) -> Result<Vec<usize>, SynthError> {
        let n = is_prep.len();
        Ok(match self {
            Reorder::None => (0..n).collect(),
            Reorder::Reverse => (0..n).rev().collect(),
            Reorder::HeadFinal => {
                let preps: Vec<usize> = (0..n).filter(|&i| is_prep[i]).collect();
                let Some(&last) = preps.last() else {
                    return Ok((0..n).collect());
                };
                let mut src: Vec<usize> = (last + 1..n).collect();
                let mut seg_start = 0;
                for &p in &preps {
                    src.push(p);
                    src.extend(seg_start..p);
                    seg_start = p + 1;
                }
                src
            }
            Reorder::Fixed(perm) => {
                check_perm(perm, n)?;
                let mut inv = vec![0; n];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                inv
            }
        })
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<(), SynthError> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(SynthError::Invalid(format!(
            "fixed reorder {perm:?} does not fit a sentence of {n} words"
        )));
    }
    Ok(())
}

/// How a target language is derived from the source grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    /// Number of letter transpositions in the spelling cipher (13 scrambles
    /// the whole alphabet).
    pub letter_swaps: usize,
    /// Appended to every content word.
    #[serde(default)]
    pub suffix: Option<String>,
    pub reorder: Reorder,
}

/// Bijective word cipher plus a reorder rule.
#[derive(Clone, Debug)]
pub struct LanguageTransform {
    id: String,
    forward: BTreeMap<String, String>,
    backward: BTreeMap<String, String>,
    reorder: Reorder,
    prepositions: Arc<BTreeSet<String>>,
}

impl LanguageTransform {
    /// `cipher` maps source words to target words; `prepositions` are source words.
    pub fn new(
        id: impl Into<String>,
        cipher: BTreeMap<String, String>,
        reorder: Reorder,
        prepositions: BTreeSet<String>,
    ) -> Result<Self, SynthError> {
        let id = id.into();
        let mut backward = BTreeMap::new();
        for (s, t) in &cipher {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(SynthError::Config(format!("{id}: `{s}` maps to invalid word `{t}`")));
            }
            if let Some(prev) = backward.insert(t.clone(), s.clone()) {
                return Err(SynthError::Config(format!(
                    "{id}: cipher maps both `{prev}` and `{s}` to `{t}`"
                )));
            }
        }
        Ok(Self {
            id,
            forward: cipher,
            backward,
            reorder,
            prepositions: Arc::new(prepositions),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn reorder(&self) -> &Reorder {
        &self.reorder
    }

    pub fn with_reorder(&self, reorder: Reorder) -> Self {
        Self {
            reorder,
            ..self.clone()
        }
    }

    pub fn cipher(&self) -> &BTreeMap<String, String> {
        &self.forward
    }

    pub fn encode_word(&self, w: &str) -> Result<&str, SynthError> {
        self.forward.get(w).map(String::as_str).ok_or_else(|| SynthError::Oov {
            word: w.to_string(),
            lang: self.id.clone(),
        })
    }

    pub fn decode_word(&self, w: &str) -> Result<&str, SynthError> {
        self.backward.get(w).map(String::as_str).ok_or_else(|| SynthError::Oov {
            word: w.to_string(),
            lang: self.id.clone(),
        })
    }

    /// Source sentence to this language; returns the words and `p` with
    /// `out[i]` coming from `src[p[i]]`.
    pub fn encode(&self, src: &[String]) -> Result<(Vec<String>, Vec<usize>), SynthError> {
        let is_prep: Vec<bool> = src.iter().map(|w| self.prepositions.contains(w)).collect();
        let p = self.reorder.forward(&is_prep)?;
        let out = p
            .iter()
            .map(|&j| self.encode_word(&src[j]).map(str::to_string))
            .collect::<Result<_, _>>()?;
        Ok((out, p))
    }

    /// Sentence in this language back to the source; returns the words and
    /// `m` with `src[j]` coming from `words[m[j]]`.
    pub fn decode(&self, words: &[String]) -> Result<(Vec<String>, Vec<usize>), SynthError> {
        let plain: Vec<String> = words
            .iter()
            .map(|w| self.decode_word(w).map(str::to_string))
            .collect::<Result<_, _>>()?;
        let is_prep: Vec<bool> = plain.iter().map(|w| self.prepositions.contains(w)).collect();
        let m = self.reorder.inverse(&is_prep)?;
        Ok((m.iter().map(|&i| plain[i].clone()).collect(), m))
    }
}

/// Grammar plus source and target languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub source: String,
    pub grammar: GrammarConfig,
    pub targets: Vec<LanguageSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source: "en".into(),
            grammar: Grammar::default_config(),
            targets: vec![
                LanguageSpec {
                    id: "xa".into(),
                    letter_swaps: 3,
                    suffix: None,
                    reorder: Reorder::None,
                },
                LanguageSpec {
                    id: "xb".into(),
                    letter_swaps: 6,
                    suffix: Some("en".into()),
                    reorder: Reorder::HeadFinal,
                },
                LanguageSpec {
                    id: "xc".into(),
                    letter_swaps: 13,
                    suffix: Some("ak".into()),
                    reorder: Reorder::Reverse,
                },
            ],
        }
    }
}

impl SynthConfig {
    /// Same languages with every reorder rule switched off.
    pub fn without_reordering(mut self) -> Self {
        for t in &mut self.targets {
            t.reorder = Reorder::None;
        }
        self
    }
}

fn letter_map(spec: &LanguageSpec) -> BTreeMap<char, char> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &["cipher", &spec.id]));
    let mut letters: Vec<char> = ('a'..='z').collect();
    letters.shuffle(&mut rng);
    let mut map: BTreeMap<char, char> = ('a'..='z').map(|c| (c, c)).collect();
    if spec.letter_swaps >= 13 {
        let mut shuffled = letters.clone();
        shuffled.shuffle(&mut rng);
        for (a, b) in letters.iter().zip(shuffled) {
            map.insert(*a, b);
        }
    } else {
        for pair in letters.chunks(2).take(spec.letter_swaps) {
            map.insert(pair[0], pair[1]);
            map.insert(pair[1], pair[0]);
        }
    }
    map
}

/// Every language of a benchmark, keyed by id. The source language uses the
/// identity transform.
#[derive(Clone, Debug)]
pub struct Languages {
    source: String,
    grammar: Arc<Grammar>,
    transforms: BTreeMap<String, LanguageTransform>,
    order: Vec<String>,
}

impl Languages {
    pub fn new(config: &SynthConfig) -> Result<Self, SynthError> {
        let grammar = Grammar::new(config.grammar.clone())?;
        let vocab = grammar.vocabulary();
        let preps: BTreeSet<String> = vocab.iter().filter(|w| grammar.is_preposition(w)).cloned().collect();
        let mut transforms = BTreeMap::new();
        let identity = vocab.iter().map(|w| (w.clone(), w.clone())).collect();
        transforms.insert(
            config.source.clone(),
            LanguageTransform::new(config.source.clone(), identity, Reorder::None, preps.clone())?,
        );
        let mut order = vec![config.source.clone()];
        for spec in &config.targets {
            if transforms.contains_key(&spec.id) {
                return Err(SynthError::Config(format!("language `{}` declared twice", spec.id)));
            }
            let letters = letter_map(spec);
            let mut cipher = BTreeMap::new();
            for w in &vocab {
                let class = grammar.class(w).unwrap_or(WordClass::Content);
                let t = if class == WordClass::Entity {
                    w.clone()
                } else {
                    let mut t: String = w.chars().map(|c| *letters.get(&c).unwrap_or(&c)).collect();
                    if class == WordClass::Content {
                        if let Some(s) = &spec.suffix {
                            t.push_str(s);
                        }
                    }
                    t
                };
                cipher.insert(w.clone(), t);
            }
            transforms.insert(
                spec.id.clone(),
                LanguageTransform::new(spec.id.clone(), cipher, spec.reorder.clone(), preps.clone())?,
            );
            order.push(spec.id.clone());
        }
        Ok(Self {
            source: config.source.clone(),
            grammar: Arc::new(grammar),
            transforms,
            order,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Target language ids in declaration order.
    pub fn targets(&self) -> &[String] {
        &self.order[1..]
    }

    /// Source first, then targets.
    pub fn all(&self) -> &[String] {
        &self.order
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn get(&self, lang: &str) -> Result<&LanguageTransform, SynthError> {
        self.transforms
            .get(lang)
            .ok_or_else(|| SynthError::UnknownLanguage(lang.to_string()))
    }

    /// Words of `lang` mapped to `to`; `alignment[i]` is the input position of output word `i`.
    pub fn translate_words(
        &self,
        words: &[String],
        from: &str,
        to: &str,
    ) -> Result<(Vec<String>, Vec<usize>), SynthError> {
        let (src, m) = self.get(from)?.decode(words)?;
        let (out, p) = self.get(to)?.encode(&src)?;
        Ok((out, p.iter().map(|&j| m[j]).collect()))
    }
}
