use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Example};
use super::SynthError;

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    lang: String,
    words: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    intent: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    slots: Option<Vec<String>>,
}

/// One JSON object per line. Labels are written only for labeled corpora,
/// and every such write counts as a label read.
pub fn to_jsonl(corpus: &Corpus) -> Result<String, SynthError> {
    let mut out = String::new();
    for i in 0..corpus.len() {
        let e = corpus.example(i);
        let (intent, slots) = if corpus.is_labeled() {
            let (intent, slots) = corpus.labels(i)?;
            (intent.map(str::to_string), slots.map(<[String]>::to_vec))
        } else {
            (None, None)
        };
        let r = Record {
            id: e.id().to_string(),
            lang: e.lang().to_string(),
            words: e.words().to_vec(),
            intent,
            slots,
        };
        out.push_str(&serde_json::to_string(&r).map_err(|e| SynthError::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(name: &str, text: &str) -> Result<Corpus, SynthError> {
    let mut examples = Vec::new();
    let mut lang: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record =
            serde_json::from_str(line).map_err(|e| SynthError::Io(format!("{name}:{}: {e}", n + 1)))?;
        lang.get_or_insert_with(|| r.lang.clone());
        examples.push(Example::new(r.id, r.lang, r.words, r.intent, r.slots)?);
    }
    let lang = lang.ok_or_else(|| SynthError::Io(format!("{name}: empty corpus file")))?;
    Corpus::new(name, lang, examples)
}
