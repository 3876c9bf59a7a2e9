use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;

/// On-disk grammar description.
///
/// Template syntax: `$type` inserts a slot value, `@group` a member of a
/// synonym group, anything else is a literal word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub intents: Vec<IntentConfig>,
    pub slot_types: Vec<SlotTypeConfig>,
    pub lexicons: BTreeMap<String, LexiconConfig>,
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub prepositions: Vec<String>,
    pub function_words: Vec<String>,
    /// Words the paraphraser may insert.
    pub fillers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentConfig {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotTypeConfig {
    pub name: String,
    pub lexicon: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconConfig {
    /// Entity names keep their spelling in every language.
    #[serde(default)]
    pub entity: bool,
    /// Each entry is a group of interchangeable phrases for one value.
    pub values: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordClass {
    Preposition,
    Function,
    Entity,
    Content,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Group(String),
    Slot(usize),
}

#[derive(Clone, Debug)]
struct Template {
    pieces: Vec<Piece>,
}

/// A validated grammar ready for sampling.
#[derive(Clone, Debug)]
pub struct Grammar {
    config: GrammarConfig,
    templates: Vec<Vec<Template>>,
    classes: BTreeMap<String, WordClass>,
    synonym_of: BTreeMap<String, usize>,
    synonym_groups: Vec<Vec<String>>,
}

/// A sampled source-language utterance with gold labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub intent: String,
    pub words: Vec<String>,
    pub slots: Vec<String>,
}

fn zipf_pick<'a, R: Rng>(items: &'a [String], rng: &mut R) -> &'a str {
    let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for (r, item) in items.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return item;
        }
    }
    &items[items.len() - 1]
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Result<Self, SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if config.intents.is_empty() {
            return bad("grammar has no intents".into());
        }
        let mut seen_intents = BTreeSet::new();
        for i in &config.intents {
            if !seen_intents.insert(&i.name) {
                return bad(format!("intent `{}` declared twice", i.name));
            }
            if i.templates.len() < 2 {
                return bad(format!("intent `{}` has fewer than 2 templates", i.name));
            }
        }
        let slot_index: BTreeMap<&str, usize> =
            config.slot_types.iter().enumerate().map(|(k, s)| (s.name.as_str(), k)).collect();
        if slot_index.len() != config.slot_types.len() {
            return bad("duplicate slot type".into());
        }
        for s in &config.slot_types {
            let Some(lex) = config.lexicons.get(&s.lexicon) else {
                return bad(format!("slot type `{}` uses unknown lexicon `{}`", s.name, s.lexicon));
            };
            if lex.values.len() < 4 {
                return bad(format!("lexicon `{}` has fewer than 4 entries", s.lexicon));
            }
            if s.name.is_empty() || s.name.contains(char::is_whitespace) {
                return bad(format!("invalid slot type name `{}`", s.name));
            }
        }

        let preps: BTreeSet<&str> = config.prepositions.iter().map(String::as_str).collect();
        let funcs: BTreeSet<&str> = config.function_words.iter().map(String::as_str).collect();
        if let Some(w) = preps.intersection(&funcs).next() {
            return bad(format!("`{w}` is both a preposition and a function word"));
        }

        let mut classes: BTreeMap<String, WordClass> = BTreeMap::new();
        for w in &config.prepositions {
            classes.insert(w.clone(), WordClass::Preposition);
        }
        for w in config.function_words.iter().chain(&config.fillers) {
            if preps.contains(w.as_str()) {
                return bad(format!("filler `{w}` is a preposition"));
            }
            classes.insert(w.clone(), WordClass::Function);
        }
        for (name, lex) in &config.lexicons {
            for group in &lex.values {
                if group.is_empty() {
                    return bad(format!("empty value group in lexicon `{name}`"));
                }
                for phrase in group {
                    let words: Vec<&str> = phrase.split_whitespace().collect();
                    if words.is_empty() {
                        return bad(format!("empty phrase in lexicon `{name}`"));
                    }
                    for w in words {
                        if preps.contains(w) {
                            return bad(format!("slot value `{phrase}` contains preposition `{w}`"));
                        }
                        let class = if lex.entity {
                            WordClass::Entity
                        } else if funcs.contains(w) {
                            WordClass::Function
                        } else {
                            WordClass::Content
                        };
                        match classes.get(w) {
                            Some(&c) if c != class => {
                                return bad(format!("word `{w}` has conflicting classes {c:?} and {class:?}"))
                            }
                            _ => {
                                classes.insert(w.to_string(), class);
                            }
                        }
                    }
                }
            }
        }

        let mut synonym_groups: Vec<Vec<String>> = Vec::new();
        for (name, members) in &config.synonyms {
            if members.is_empty() {
                return bad(format!("synonym group `{name}` is empty"));
            }
            for w in members {
                if w.split_whitespace().count() != 1 {
                    return bad(format!("synonym `{w}` in `{name}` must be a single word"));
                }
                classes.entry(w.clone()).or_insert(if funcs.contains(w.as_str()) {
                    WordClass::Function
                } else {
                    WordClass::Content
                });
            }
            synonym_groups.push(members.clone());
        }
        for lex in config.lexicons.values() {
            for group in &lex.values {
                if group.len() > 1 && group.iter().all(|p| p.split_whitespace().count() == 1) {
                    synonym_groups.push(group.clone());
                }
            }
        }
        let mut synonym_of = BTreeMap::new();
        for (k, group) in synonym_groups.iter().enumerate() {
            for w in group {
                if let Some(prev) = synonym_of.insert(w.clone(), k) {
                    if prev != k {
                        return bad(format!("word `{w}` belongs to two synonym groups"));
                    }
                }
            }
        }

        let mut templates = Vec::with_capacity(config.intents.len());
        for intent in &config.intents {
            let mut parsed = Vec::new();
            for t in &intent.templates {
                let mut pieces = Vec::new();
                for tok in t.split_whitespace() {
                    if let Some(name) = tok.strip_prefix('$') {
                        let Some(&k) = slot_index.get(name) else {
                            return bad(format!("template `{t}` uses unknown slot type `{name}`"));
                        };
                        pieces.push(Piece::Slot(k));
                    } else if let Some(name) = tok.strip_prefix('@') {
                        if !config.synonyms.contains_key(name) {
                            return bad(format!("template `{t}` uses unknown synonym group `{name}`"));
                        }
                        pieces.push(Piece::Group(name.to_string()));
                    } else {
                        classes.entry(tok.to_string()).or_insert(WordClass::Content);
                        pieces.push(Piece::Word(tok.to_string()));
                    }
                }
                if pieces.is_empty() {
                    return bad(format!("empty template in intent `{}`", intent.name));
                }
                parsed.push(Template { pieces });
            }
            templates.push(parsed);
        }

        Ok(Self {
            config,
            templates,
            classes,
            synonym_of,
            synonym_groups,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    pub fn intents(&self) -> Vec<String> {
        self.config.intents.iter().map(|i| i.name.clone()).collect()
    }

    /// `O` followed by `B-`/`I-` for every slot type, in declaration order.
    pub fn slot_labels(&self) -> Vec<String> {
        let mut out = vec!["O".to_string()];
        for s in &self.config.slot_types {
            out.push(format!("B-{}", s.name));
            out.push(format!("I-{}", s.name));
        }
        out
    }

    /// Every word the grammar can emit, sorted.
    pub fn vocabulary(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    pub fn class(&self, word: &str) -> Option<WordClass> {
        self.classes.get(word).copied()
    }

    pub fn is_preposition(&self, word: &str) -> bool {
        self.class(word) == Some(WordClass::Preposition)
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.synonym_of.get(word).map(|&k| self.synonym_groups[k].as_slice())
    }

    pub fn fillers(&self) -> &[String] {
        &self.config.fillers
    }

    /// Sample one utterance of the given intent.
    pub fn sample<R: Rng>(&self, intent: usize, rng: &mut R) -> Utterance {
        let ts = &self.templates[intent];
        let t = &ts[rng.gen_range(0..ts.len())];
        let mut words = Vec::new();
        let mut slots = Vec::new();
        let mut used: BTreeSet<(&str, usize)> = BTreeSet::new();
        for piece in &t.pieces {
            match piece {
                Piece::Word(w) => {
                    words.push(w.clone());
                    slots.push("O".to_string());
                }
                Piece::Group(g) => {
                    words.push(zipf_pick(&self.config.synonyms[g], rng).to_string());
                    slots.push("O".to_string());
                }
                Piece::Slot(k) => {
                    let st = &self.config.slot_types[*k];
                    let lex = &self.config.lexicons[&st.lexicon];
                    let mut v = rng.gen_range(0..lex.values.len());
                    // Two slots drawing from one lexicon get distinct values.
                    for _ in 0..8 {
                        if used.insert((st.lexicon.as_str(), v)) {
                            break;
                        }
                        v = rng.gen_range(0..lex.values.len());
                    }
                    let phrase = zipf_pick(&lex.values[v], rng);
                    for (j, w) in phrase.split_whitespace().enumerate() {
                        words.push(w.to_string());
                        slots.push(format!("{}-{}", if j == 0 { "B" } else { "I" }, st.name));
                    }
                }
            }
        }
        Utterance {
            intent: self.config.intents[intent].name.clone(),
            words,
            slots,
        }
    }

    /// The default flight-booking benchmark grammar.
    pub fn default_config() -> GrammarConfig {
        fn v(items: &[&str]) -> Vec<String> {
            items.iter().map(|s| s.to_string()).collect()
        }
        fn singles(items: &[&str]) -> Vec<Vec<String>> {
            items.iter().map(|s| vec![s.to_string()]).collect()
        }
        let intents = vec![
            (
                "flight",
                vec![
                    "@show me @flights from $fromloc to $toloc",
                    "i @want a flight from $fromloc to $toloc on $depart_date",
                    "@show @flights from $fromloc to $toloc $depart_time",
                    "are there any @flights to $toloc from $fromloc on $depart_date $depart_time",
                    "@show $airline_name @flights from $fromloc to $toloc on $depart_date",
                    "$fromloc to $toloc $depart_date",
                ],
            ),
            (
                "airfare",
                vec![
                    "what is the @fare from $fromloc to $toloc",
                    "@show me the @cheap @fare from $fromloc to $toloc on $depart_date",
                    "how much is a $class_type ticket from $fromloc to $toloc",
                    "@cheap $class_type @fare to $toloc",
                    "$fromloc to $toloc $depart_date",
                ],
            ),
            (
                "ground_service",
                vec![
                    "what ground @transport is available in $toloc",
                    "@show me ground @transport at $toloc airport",
                    "i @want ground @transport from the airport to downtown $toloc",
                ],
            ),
            (
                "airline",
                vec![
                    "which @carriers fly from $fromloc to $toloc",
                    "what @carriers have @flights to $toloc on $depart_date",
                    "@show me the @carriers that serve $fromloc",
                ],
            ),
            (
                "flight_time",
                vec![
                    "what @times does the $airline_name flight leave $fromloc",
                    "@show me the departure @times for @flights from $fromloc to $toloc",
                    "when does $airline_name arrive in $toloc $depart_time",
                ],
            ),
            (
                "aircraft",
                vec![
                    "what @kind of @aircraft does $airline_name use from $fromloc to $toloc",
                    "which @aircraft flies from $fromloc to $toloc $depart_time",
                    "@show me the @aircraft @kind for $airline_name flight to $toloc",
                ],
            ),
            (
                "distance",
                vec![
                    "how far is $toloc from the airport",
                    "what is the @distance from $fromloc to $toloc",
                    "@show the @distance between $fromloc and $toloc",
                ],
            ),
            (
                "meal",
                vec![
                    "which @flights from $fromloc to $toloc serve @meal",
                    "is there a @meal on the $airline_name flight to $toloc",
                    "what @meal is served on $class_type @flights from $fromloc",
                ],
            ),
        ];
        let mut lexicons = BTreeMap::new();
        lexicons.insert(
            "city".to_string(),
            LexiconConfig {
                entity: true,
                values: singles(&[
                    "boston", "denver", "atlanta", "dallas", "chicago", "seattle", "miami", "phoenix",
                    "houston", "detroit", "orlando", "memphis", "nashville", "oakland", "pittsburgh",
                    "baltimore", "cleveland", "tampa", "charlotte", "toronto", "montreal", "minneapolis",
                    "new york", "san francisco", "los angeles", "salt lake city", "kansas city",
                    "las vegas", "st louis", "san diego", "fort worth", "washington",
                ]),
            },
        );
        lexicons.insert(
            "airline".to_string(),
            LexiconConfig {
                entity: true,
                values: singles(&[
                    "delta", "united", "american airlines", "us air", "continental", "alaska airlines",
                    "southwest", "northwest", "jet blue", "frontier", "lufthansa", "air canada",
                ]),
            },
        );
        let mut dates: Vec<Vec<String>> = singles(&[
            "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "today",
            "this weekend", "next week",
        ]);
        dates.push(v(&["tomorrow", "tmrw"]));
        for month in ["june", "july", "august"] {
            for day in ["first", "second", "third", "fifth", "tenth", "twentieth"] {
                dates.push(vec![format!("{month} {day}")]);
            }
        }
        lexicons.insert("date".to_string(), LexiconConfig { entity: false, values: dates });
        let mut times = singles(&[
            "early morning", "afternoon", "noon", "midnight", "late night", "before noon",
            "after five pm", "around seven am", "late evening",
        ]);
        times.push(v(&["morning", "am"]));
        times.push(v(&["evening", "pm", "tonight"]));
        lexicons.insert("time".to_string(), LexiconConfig { entity: false, values: times });
        let mut classes = singles(&["first class", "business class", "premium economy"]);
        classes.push(v(&["economy", "coach"]));
        classes.push(v(&["thrift", "discount"]));
        lexicons.insert("class".to_string(), LexiconConfig { entity: false, values: classes });

        let synonyms: BTreeMap<String, Vec<String>> = [
            ("show", &["show", "list", "give", "display", "find", "get"][..]),
            ("want", &["want", "need", "wish", "prefer"][..]),
            ("flights", &["flights", "connections", "departures", "routes"][..]),
            ("fare", &["fare", "price", "cost", "rates", "charges"][..]),
            ("cheap", &["cheapest", "lowest", "cheaper", "inexpensive"][..]),
            ("transport", &["transportation", "transport", "service", "shuttles"][..]),
            ("carriers", &["airlines", "carriers", "companies", "operators"][..]),
            ("times", &["time", "times", "schedule", "schedules"][..]),
            ("aircraft", &["aircraft", "plane", "airplane", "jet"][..]),
            ("kind", &["kind", "type", "model", "sort"][..]),
            ("distance", &["distance", "mileage", "length"][..]),
            ("meal", &["meals", "food", "snacks", "dinner"][..]),
        ]
        .into_iter()
        .map(|(k, ws)| (k.to_string(), v(ws)))
        .collect();

        GrammarConfig {
            intents: intents
                .into_iter()
                .map(|(n, ts)| IntentConfig {
                    name: n.to_string(),
                    templates: v(&ts),
                })
                .collect(),
            slot_types: [
                ("fromloc", "city"),
                ("toloc", "city"),
                ("depart_date", "date"),
                ("depart_time", "time"),
                ("airline_name", "airline"),
                ("class_type", "class"),
            ]
            .into_iter()
            .map(|(n, l)| SlotTypeConfig {
                name: n.to_string(),
                lexicon: l.to_string(),
            })
            .collect(),
            lexicons,
            synonyms,
            prepositions: v(&["from", "to", "on", "in", "at", "for", "between"]),
            function_words: v(&[
                "me", "a", "the", "is", "are", "there", "any", "what", "which", "how", "i", "does",
                "of", "that", "when", "and", "much", "have",
            ]),
            fillers: v(&["please", "just", "now", "also"]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::bio::is_well_formed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grammar_is_valid() {
        let g = Grammar::new(Grammar::default_config()).unwrap();
        assert_eq!(g.intents().len(), 8);
        assert_eq!(g.config().slot_types.len(), 6);
        let n = g.vocabulary().len();
        assert!((150..=400).contains(&n), "vocabulary size {n}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..2000 {
            let u = g.sample(k % 8, &mut rng);
            assert_eq!(u.words.len(), u.slots.len());
            assert!(is_well_formed(&u.slots), "{:?}", u.slots);
        }
    }

    #[test]
    fn inconsistencies_are_rejected() {
        let mut c = Grammar::default_config();
        c.intents[0].templates.truncate(1);
        assert!(Grammar::new(c).is_err());
        let mut c = Grammar::default_config();
        c.intents[1].templates.push("show $nope".into());
        assert!(Grammar::new(c).unwrap_err().to_string().contains("nope"));
        let mut c = Grammar::default_config();
        c.lexicons.get_mut("class").unwrap().values.truncate(3);
        assert!(Grammar::new(c).is_err());
    }
}
