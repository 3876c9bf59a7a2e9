//! Transformer, BiLSTM and CNN encoders with sentence and word heads.

mod config;
mod gradcheck;
mod pretrain;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ArchConfig, Family, HeadKind, SizeClass, Task, CNN_SENTENCE_KERNELS, CNN_TAGGER_KERNEL};
pub use gradcheck::{model_gradient_check, ModelGradCheck};
pub use pretrain::{masked_accuracy, pivot_pretrain, MlmReport, MlmSettings};

use crate::numeric::{softmax_in_place, ParamStore, Real, Session, Tensor, Var};
use crate::synthlang::Corpus;
use crate::tokenize::{SubwordVocab, Tokenization};
use crate::Error;

pub const INIT_RANGE: f64 = 0.08;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} subwords exceeds the positional table ({max})")]
    TooLong { len: usize, max: usize },
    #[error("model has no {0:?} head")]
    MissingHead(Task),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

fn param_specs(c: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let (e, h) = (c.embed, c.hidden);
    let mut s: Vec<(String, Vec<usize>, Init)> = vec![("embed".into(), vec![c.vocab_size, e], Uniform)];
    let mut add = |name: String, shape: Vec<usize>, init: Init| s.push((name, shape, init));
    match c.family {
        Family::Transformer => {
            add("pos".into(), vec![c.max_len, h], Uniform);
            for l in 0..c.layers {
                add(format!("l{l}.ln1.g"), vec![1, h], Ones);
                add(format!("l{l}.ln1.b"), vec![1, h], Zeros);
                add(format!("l{l}.attn.qkv.w"), vec![h, 3 * h], Uniform);
                add(format!("l{l}.attn.qkv.b"), vec![1, 3 * h], Uniform);
                add(format!("l{l}.attn.o.w"), vec![h, h], Uniform);
                add(format!("l{l}.attn.o.b"), vec![1, h], Uniform);
                add(format!("l{l}.ln2.g"), vec![1, h], Ones);
                add(format!("l{l}.ln2.b"), vec![1, h], Zeros);
                add(format!("l{l}.ffn.1.w"), vec![h, c.ffn], Uniform);
                add(format!("l{l}.ffn.1.b"), vec![1, c.ffn], Uniform);
                add(format!("l{l}.ffn.2.w"), vec![c.ffn, h], Uniform);
                add(format!("l{l}.ffn.2.b"), vec![1, h], Uniform);
            }
            add("final.ln.g".into(), vec![1, h], Ones);
            add("final.ln.b".into(), vec![1, h], Zeros);
        }
        Family::Bilstm => {
            let d = h / 2;
            for l in 0..c.layers {
                let input = if l == 0 { e } else { h };
                for dir in ["fwd", "bwd"] {
                    add(format!("l{l}.{dir}.wx"), vec![input, 4 * d], Uniform);
                    add(format!("l{l}.{dir}.wh"), vec![d, 4 * d], Uniform);
                    add(format!("l{l}.{dir}.b"), vec![1, 4 * d], Uniform);
                }
            }
        }
        Family::Cnn => {
            if c.head.has(Task::Sentence) {
                for k in CNN_SENTENCE_KERNELS {
                    add(format!("conv{k}.w"), vec![k * e, h], Uniform);
                    add(format!("conv{k}.b"), vec![1, h], Uniform);
                }
            }
            if c.head.has(Task::Word) {
                for l in 0..c.layers {
                    let input = if l == 0 { e } else { h };
                    add(format!("dil{l}.w"), vec![CNN_TAGGER_KERNEL * input, h], Uniform);
                    add(format!("dil{l}.b"), vec![1, h], Uniform);
                }
            }
        }
    }
    if c.head.has(Task::Sentence) {
        add("head.intent.w".into(), vec![c.sentence_features(), c.intents.len()], Uniform);
        add("head.intent.b".into(), vec![1, c.intents.len()], Uniform);
    }
    if c.head.has(Task::Word) {
        add("head.tag.w".into(), vec![h, c.tags.len()], Uniform);
        add("head.tag.b".into(), vec![1, c.tags.len()], Uniform);
    }
    if c.has_mlm_head() {
        add("mlm.b".into(), vec![1, c.vocab_size], Zeros);
    }
    s
}

/// An encoder with its config and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ArchConfig,
    pub params: ParamStore<f32>,
    pub training: bool,
}

/// Class distributions for a batch: one vector per example (sentence task)
/// or one per word (word task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task: Task,
    /// Example ids when predicted from a corpus, empty otherwise.
    #[serde(default)]
    pub ids: Vec<String>,
    pub categories: Vec<String>,
    /// `probs[example][unit][class]`; a sentence example has a single unit.
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Arg-max class index per unit per example.
    pub fn argmax(&self) -> Vec<Vec<usize>> {
        self.probs.iter().map(|ex| ex.iter().map(|p| argmax(p)).collect()).collect()
    }

    /// Arg-max category names per unit per example.
    pub fn labels(&self) -> Vec<Vec<String>> {
        self.argmax()
            .into_iter()
            .map(|ex| ex.into_iter().map(|k| self.categories[k].clone()).collect())
            .collect()
    }
}

fn ffn_block<T: Real>(s: &mut Session<T>, x: Var, l: usize) -> Result<Var, Error> {
    let g = s.param(&format!("l{l}.ln2.g"))?;
    let b = s.param(&format!("l{l}.ln2.b"))?;
    let h = s.graph.layer_norm(x, g, b)?;
    let w1 = s.param(&format!("l{l}.ffn.1.w"))?;
    let b1 = s.param(&format!("l{l}.ffn.1.b"))?;
    let w2 = s.param(&format!("l{l}.ffn.2.w"))?;
    let b2 = s.param(&format!("l{l}.ffn.2.b"))?;
    let f = s.graph.matmul(h, w1)?;
    let f = s.graph.add_row(f, b1)?;
    let f = s.graph.relu(f);
    let f = s.graph.matmul(f, w2)?;
    let f = s.graph.add_row(f, b2)?;
    Ok(f)
}

fn attention_block<T: Real>(c: &ArchConfig, s: &mut Session<T>, x: Var, l: usize) -> Result<Var, Error> {
    let h = c.hidden;
    let dh = h / c.heads;
    let g = s.param(&format!("l{l}.ln1.g"))?;
    let b = s.param(&format!("l{l}.ln1.b"))?;
    let n = s.graph.layer_norm(x, g, b)?;
    let w = s.param(&format!("l{l}.attn.qkv.w"))?;
    let wb = s.param(&format!("l{l}.attn.qkv.b"))?;
    let qkv = s.graph.matmul(n, w)?;
    let qkv = s.graph.add_row(qkv, wb)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(c.heads);
    for k in 0..c.heads {
        let q = s.graph.slice_cols(qkv, k * dh, dh)?;
        let kk = s.graph.slice_cols(qkv, h + k * dh, dh)?;
        let v = s.graph.slice_cols(qkv, 2 * h + k * dh, dh)?;
        let sc = s.graph.matmul_nt(q, kk)?;
        let sc = s.graph.scale(sc, scale);
        let a = s.graph.softmax(sc)?;
        outs.push(s.graph.matmul(a, v)?);
    }
    let o = s.graph.concat_cols(&outs)?;
    let ow = s.param(&format!("l{l}.attn.o.w"))?;
    let ob = s.param(&format!("l{l}.attn.o.b"))?;
    let o = s.graph.matmul(o, ow)?;
    Ok(s.graph.add_row(o, ob)?)
}

/// Contextual vectors `[T, hidden]` for a transformer.
fn transformer_encode<T: Real>(c: &ArchConfig, s: &mut Session<T>, ids: &[usize]) -> Result<Var, Error> {
    if ids.len() > c.max_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: c.max_len,
        }
        .into());
    }
    let emb = s.param("embed")?;
    let pos = s.param("pos")?;
    let x = s.graph.embedding(emb, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = s.graph.embedding(pos, &positions)?;
    let mut x = s.graph.add(x, p)?;
    x = s.dropout(x, c.dropout);
    for l in 0..c.layers {
        let a = attention_block(c, s, x, l)?;
        let a = s.dropout(a, c.dropout);
        x = s.graph.add(x, a)?;
        let f = ffn_block(s, x, l)?;
        let f = s.dropout(f, c.dropout);
        x = s.graph.add(x, f)?;
    }
    let g = s.param("final.ln.g")?;
    let b = s.param("final.ln.b")?;
    Ok(s.graph.layer_norm(x, g, b)?)
}

fn lstm_direction<T: Real>(s: &mut Session<T>, x: Var, prefix: &str, d: usize, reverse: bool) -> Result<Var, Error> {
    let wx = s.param(&format!("{prefix}.wx"))?;
    let wh = s.param(&format!("{prefix}.wh"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let xw = s.graph.matmul(x, wx)?;
    let xw = s.graph.add_row(xw, b)?;
    let t_len = s.graph.value(xw).rows();
    let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    let mut outs: Vec<Option<Var>> = vec![None; t_len];
    let (mut h, mut c): (Option<Var>, Option<Var>) = (None, None);
    for t in order {
        let row = s.graph.select_rows(xw, &[t])?;
        let gates = match h {
            Some(hp) => {
                let r = s.graph.matmul(hp, wh)?;
                s.graph.add(row, r)?
            }
            None => row,
        };
        let sg = s.graph.sigmoid(gates);
        let i = s.graph.slice_cols(sg, 0, d)?;
        let f = s.graph.slice_cols(sg, d, d)?;
        let o = s.graph.slice_cols(sg, 3 * d, d)?;
        let gc = s.graph.slice_cols(gates, 2 * d, d)?;
        let gc = s.graph.tanh(gc);
        let ig = s.graph.mul(i, gc)?;
        let cn = match c {
            Some(cp) => {
                let fc = s.graph.mul(f, cp)?;
                s.graph.add(fc, ig)?
            }
            None => ig,
        };
        let tc = s.graph.tanh(cn);
        let hn = s.graph.mul(o, tc)?;
        outs[t] = Some(hn);
        h = Some(hn);
        c = Some(cn);
    }
    let rows: Vec<Var> = outs.into_iter().map(|v| v.expect("every step ran")).collect();
    Ok(s.graph.concat_rows(&rows)?)
}

/// Concatenated forward/backward states `[T, hidden]` for a BiLSTM.
fn bilstm_encode<T: Real>(c: &ArchConfig, s: &mut Session<T>, ids: &[usize]) -> Result<Var, Error> {
    let emb = s.param("embed")?;
    let mut x = s.graph.embedding(emb, ids)?;
    x = s.dropout(x, c.dropout);
    let d = c.hidden / 2;
    for l in 0..c.layers {
        let f = lstm_direction(s, x, &format!("l{l}.fwd"), d, false)?;
        let b = lstm_direction(s, x, &format!("l{l}.bwd"), d, true)?;
        x = s.graph.concat_cols(&[f, b])?;
        x = s.dropout(x, c.dropout);
    }
    Ok(x)
}

fn cnn_sentence_features<T: Real>(c: &ArchConfig, s: &mut Session<T>, ids: &[usize]) -> Result<Var, Error> {
    let emb = s.param("embed")?;
    let mut x = s.graph.embedding(emb, ids)?;
    x = s.dropout(x, c.dropout);
    let mut pooled = Vec::with_capacity(CNN_SENTENCE_KERNELS.len());
    for k in CNN_SENTENCE_KERNELS {
        let w = s.param(&format!("conv{k}.w"))?;
        let b = s.param(&format!("conv{k}.b"))?;
        let h = s.graph.conv1d(x, w, b, k, 1)?;
        let h = s.graph.relu(h);
        pooled.push(s.graph.max_over_time(h)?);
    }
    let f = s.graph.concat_cols(&pooled)?;
    Ok(s.dropout(f, c.dropout))
}

/// Dilated convolution stack `[T, hidden]`, dilation doubling per layer.
fn cnn_tagger_encode<T: Real>(c: &ArchConfig, s: &mut Session<T>, ids: &[usize]) -> Result<Var, Error> {
    let emb = s.param("embed")?;
    let mut x = s.graph.embedding(emb, ids)?;
    x = s.dropout(x, c.dropout);
    for l in 0..c.layers {
        let w = s.param(&format!("dil{l}.w"))?;
        let b = s.param(&format!("dil{l}.b"))?;
        x = s.graph.conv1d(x, w, b, CNN_TAGGER_KERNEL, 1 << l)?;
        x = s.graph.relu(x);
        x = s.dropout(x, c.dropout);
    }
    Ok(x)
}

fn linear<T: Real>(s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var, Error> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let y = s.graph.matmul(x, w)?;
    Ok(s.graph.add_row(y, b)?)
}

/// Intent logits `[1, |intents|]`.
pub fn sentence_logits<T: Real>(c: &ArchConfig, s: &mut Session<T>, tok: &Tokenization) -> Result<Var, Error> {
    if !c.head.has(Task::Sentence) {
        return Err(ModelError::MissingHead(Task::Sentence).into());
    }
    let feat = match c.family {
        Family::Transformer => {
            let h = transformer_encode(c, s, &tok.ids)?;
            let f = s.graph.select_rows(h, &[0])?;
            s.dropout(f, c.dropout)
        }
        Family::Bilstm => {
            let h = bilstm_encode(c, s, &tok.ids)?;
            let last = s.graph.value(h).rows() - 1;
            s.graph.select_rows(h, &[last])?
        }
        Family::Cnn => cnn_sentence_features(c, s, &tok.ids)?,
    };
    linear(s, feat, "head.intent")
}

/// Tag logits `[words, |tags|]`, read at each word's first subword.
pub fn word_logits<T: Real>(c: &ArchConfig, s: &mut Session<T>, tok: &Tokenization) -> Result<Var, Error> {
    if !c.head.has(Task::Word) {
        return Err(ModelError::MissingHead(Task::Word).into());
    }
    let h = match c.family {
        Family::Transformer => transformer_encode(c, s, &tok.ids)?,
        Family::Bilstm => bilstm_encode(c, s, &tok.ids)?,
        Family::Cnn => cnn_tagger_encode(c, s, &tok.ids)?,
    };
    let rows = s.graph.select_rows(h, &tok.first)?;
    linear(s, rows, "head.tag")
}

pub fn task_logits<T: Real>(c: &ArchConfig, s: &mut Session<T>, tok: &Tokenization, task: Task) -> Result<Var, Error> {
    match task {
        Task::Sentence => sentence_logits(c, s, tok),
        Task::Word => word_logits(c, s, tok),
    }
}

/// Vocabulary logits at `positions`, with the output matrix tied to the embeddings.
pub fn mlm_logits<T: Real>(c: &ArchConfig, s: &mut Session<T>, ids: &[usize], positions: &[usize]) -> Result<Var, Error> {
    if !c.has_mlm_head() {
        return Err(ModelError::Config("only pivot transformers carry a masked-token head".into()).into());
    }
    let h = transformer_encode(c, s, ids)?;
    let rows = s.graph.select_rows(h, positions)?;
    let emb = s.param("embed")?;
    let logits = s.graph.matmul_nt(rows, emb)?;
    let b = s.param("mlm.b")?;
    Ok(s.graph.add_row(logits, b)?)
}

const PREDICT_CHUNK: usize = 32;

/// Eval-mode class distributions from a config and a parameter store.
pub fn predict_with(config: &ArchConfig, params: &ParamStore<f32>, batch: &[Tokenization], task: Task) -> Result<PredictionSet, Error> {
    let mut probs = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(PREDICT_CHUNK) {
        let mut s = Session::new(params, false, 0);
        for tok in chunk {
            let logits = task_logits(config, &mut s, tok, task)?;
            let v = s.graph.value(logits);
            let cols = v.cols();
            let rows: Vec<Vec<f64>> = v
                .data()
                .chunks(cols)
                .map(|r| {
                    let mut p: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
                    softmax_in_place(&mut p);
                    p
                })
                .collect();
            probs.push(rows);
        }
    }
    Ok(PredictionSet {
        task,
        ids: Vec::new(),
        categories: config.categories(task).to_vec(),
        probs,
    })
}


#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ArchConfig,
    vocab_hash: String,
    params: Vec<ParamEntry>,
}

impl EncoderModel {
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Uniform => (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE) as f32).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.insert(name, Tensor::new(shape, data).expect("shape matches data"));
        }
        Ok(Self {
            config,
            params,
            training: false,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn tokenize<S: AsRef<str>>(&self, vocab: &SubwordVocab, words: &[S]) -> Tokenization {
        vocab.encode(words, self.config.needs_sentence_start())
    }

    /// Eval-mode class distributions.
    pub fn predict(&self, batch: &[Tokenization], task: Task) -> Result<PredictionSet, Error> {
        predict_with(&self.config, &self.params, batch, task)
    }

    /// Predict every example of a corpus (words only), keeping its ids.
    pub fn predict_corpus(&self, vocab: &SubwordVocab, corpus: &Corpus, task: Task) -> Result<PredictionSet, Error> {
        let toks: Vec<Tokenization> = corpus.examples().map(|e| self.tokenize(vocab, e.words())).collect();
        let mut p = self.predict(&toks, task)?;
        p.ids = corpus.examples().map(|e| e.id().to_string()).collect();
        Ok(p)
    }

    /// Hex SHA-256 over parameter names, shapes and raw bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        let f = ModelFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab_hash: self.config.vocab_hash.clone(),
            params,
        };
        serde_json::to_string(&f).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if f.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported format version {}", f.format_version)));
        }
        f.config.validate()?;
        let mut params = ParamStore::new();
        for e in f.params {
            let bytes = B64.decode(&e.data).map_err(|err| ModelError::Format(format!("{}: {err}", e.name)))?;
            if bytes.len() % 4 != 0 {
                return Err(ModelError::Format(format!("{}: truncated data", e.name)));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| ModelError::Format(format!("{}: {err}", e.name)))?;
            params.insert(e.name, t);
        }
        let expected = param_specs(&f.config);
        if expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, shape, _)| params.get(n).map(|t| t.shape() != shape.as_slice()).unwrap_or(true))
        {
            return Err(ModelError::Format("parameters do not match the config".into()));
        }
        Ok(Self {
            config: f.config,
            params,
            training: false,
        })
    }

    /// Reuse this encoder under a different head layout or label set; heads
    /// that no longer fit are re-initialized from `seed`.
    pub fn with_heads(&self, head: HeadKind, intents: Vec<String>, tags: Vec<String>, seed: u64) -> Result<Self, ModelError> {
        let mut config = self.config.clone();
        let keep_intent = config.intents == intents;
        let keep_tag = config.tags == tags;
        config.head = head;
        config.intents = intents;
        config.tags = tags;
        let mut fresh = EncoderModel::build(config, seed)?;
        for (name, t) in fresh.params.iter_mut() {
            let relabeled = (name.starts_with("head.intent") && !keep_intent) || (name.starts_with("head.tag") && !keep_tag);
            match self.params.get(name) {
                Some(old) if old.shape() == t.shape() && !relabeled => *t = old.clone(),
                _ => {}
            }
        }
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests;
