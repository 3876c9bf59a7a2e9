use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bio::project_tags;
use super::corpus::{Corpus, Example};
use super::transform::Languages;
use super::SynthError;
use crate::seed::derive_seed;

pub const SPLITS: [&str; 4] = ["annotated", "unannotated", "validation", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub annotated: usize,
    pub unannotated: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Training pool cut into annotated and unannotated halves.
    pub fn balanced(train_total: usize, validation: usize, test: usize) -> Self {
        Self {
            annotated: train_total.div_ceil(2),
            unannotated: train_total / 2,
            validation,
            test,
        }
    }

    fn get(&self, split: &str) -> usize {
        match split {
            "annotated" => self.annotated,
            "unannotated" => self.unannotated,
            "validation" => self.validation,
            _ => self.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LanguageSplits {
    pub lang: String,
    pub annotated: Corpus,
    pub unannotated: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

impl LanguageSplits {
    pub fn split(&self, name: &str) -> Result<&Corpus, SynthError> {
        match name {
            "annotated" => Ok(&self.annotated),
            "unannotated" => Ok(&self.unannotated),
            "validation" => Ok(&self.validation),
            "test" => Ok(&self.test),
            _ => Err(SynthError::Invalid(format!("unknown split `{name}`"))),
        }
    }
}

/// Generated splits for every language.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub languages: Languages,
    pub splits: BTreeMap<String, LanguageSplits>,
}

impl Benchmark {
    pub fn lang(&self, lang: &str) -> Result<&LanguageSplits, SynthError> {
        self.splits
            .get(lang)
            .ok_or_else(|| SynthError::UnknownLanguage(lang.to_string()))
    }

    pub fn source(&self) -> &LanguageSplits {
        &self.splits[self.languages.source()]
    }
}

fn sample_split(langs: &Languages, lang: &str, split: &str, n: usize, seed: u64) -> Result<Corpus, SynthError> {
    let grammar = langs.grammar();
    let transform = langs.get(lang)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["generate", lang, split]));
    let n_intents = grammar.intents().len();
    let mut intents: Vec<usize> = (0..n).map(|i| i % n_intents).collect();
    intents.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(n);
    for (i, &k) in intents.iter().enumerate() {
        let u = grammar.sample(k, &mut rng);
        let (words, p) = transform.encode(&u.words)?;
        let slots = project_tags(&u.slots, &p);
        examples.push(Example::new(
            format!("{lang}-{split}-{i:05}"),
            lang,
            words,
            Some(u.intent),
            Some(slots),
        )?);
    }
    Corpus::new(format!("{lang}/{split}"), lang, examples)
}

/// Sample every split of every language. Each language and split draws its
/// own source sample, so corpora are never parallel across languages.
pub fn generate(langs: &Languages, sizes: SplitSizes, seed: u64) -> Result<Benchmark, SynthError> {
    for split in SPLITS {
        if sizes.get(split) < 50 {
            return Err(SynthError::Invalid(format!("split `{split}` needs at least 50 examples")));
        }
    }
    let mut splits = BTreeMap::new();
    for lang in langs.all() {
        let mut c: Vec<Corpus> = Vec::with_capacity(4);
        for split in SPLITS {
            c.push(sample_split(langs, lang, split, sizes.get(split), seed)?);
        }
        let mut it = c.into_iter();
        let mut next = || it.next().expect("four splits");
        splits.insert(
            lang.clone(),
            LanguageSplits {
                lang: lang.clone(),
                annotated: next(),
                unannotated: next(),
                validation: next(),
                test: next(),
            },
        );
    }
    Ok(Benchmark {
        languages: langs.clone(),
        splits,
    })
}

/// Translate every example of `corpus` (written in `from`) into `to`.
pub fn translate(langs: &Languages, corpus: &Corpus, from: &str, to: &str) -> Result<Corpus, SynthError> {
    if corpus.lang() != from {
        return Err(SynthError::Invalid(format!(
            "corpus {} is in {}, not {from}",
            corpus.name(),
            corpus.lang()
        )));
    }
    langs.get(to)?;
    let mut out = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let e = corpus.example(i);
        let (words, alignment) = langs.translate_words(e.words(), from, to)?;
        let (intent, slots) = if corpus.is_labeled() {
            let (intent, slots) = corpus.labels(i)?;
            (intent.map(str::to_string), slots.map(|s| project_tags(s, &alignment)))
        } else {
            (None, None)
        };
        let ex = Example::new(format!("{}>{to}", e.id()), to, words, intent, slots)?
            .with_origin(e.id().to_string(), Some(alignment));
        out.push(ex);
    }
    Ok(Corpus::derived(corpus, format!("{}>{to}", corpus.name()), to.to_string(), out))
}

/// Rule-based paraphrases: each word with synonyms is swapped with probability
/// one half, and sentences with at least one such word may gain a leading filler.
pub fn paraphrase(langs: &Languages, corpus: &Corpus, seed: u64) -> Result<Corpus, SynthError> {
    let grammar = langs.grammar();
    let transform = langs.get(corpus.lang())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["paraphrase", corpus.name()]));
    let mut out = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let e = corpus.example(i);
        let mut words = Vec::with_capacity(e.words().len() + 1);
        let mut eligible = false;
        for w in e.words() {
            let group = transform
                .decode_word(w)
                .ok()
                .and_then(|src| grammar.synonyms(src).map(|g| (src, g)))
                .filter(|(_, g)| g.len() > 1);
            match group {
                Some((src, g)) => {
                    eligible = true;
                    if rng.gen_bool(0.5) {
                        let others: Vec<&String> = g.iter().filter(|m| m.as_str() != src).collect();
                        let pick = others[rng.gen_range(0..others.len())];
                        words.push(transform.encode_word(pick)?.to_string());
                    } else {
                        words.push(w.clone());
                    }
                }
                None => words.push(w.clone()),
            }
        }
        let inserted = eligible && !grammar.fillers().is_empty() && rng.gen_bool(0.5);
        if inserted {
            let f = &grammar.fillers()[rng.gen_range(0..grammar.fillers().len())];
            words.insert(0, transform.encode_word(f)?.to_string());
        }
        let (intent, slots) = if corpus.is_labeled() {
            let (intent, slots) = corpus.labels(i)?;
            let slots = slots.map(|s| {
                let mut s = s.to_vec();
                if inserted {
                    s.insert(0, "O".to_string());
                }
                s
            });
            (intent.map(str::to_string), slots)
        } else {
            (None, None)
        };
        let ex = Example::new(format!("{}~p", e.id()), corpus.lang(), words, intent, slots)?
            .with_origin(e.id().to_string(), None);
        out.push(ex);
    }
    Ok(corpus.rebuild(format!("{}~p", corpus.name()), out))
}
