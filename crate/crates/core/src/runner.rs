//! Run directories: configuration, generated data, trained models, metric
//! rows and reports, all derived from one master seed.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.json            data-defining configuration (written by gen-data)
//! manifest.json          config hash, seeds, sha256 of every artifact
//! data/<lang>/<split>.jsonl, data/manifest.json
//! vocab/<lang>.json, vocab/shared.json
//! models/...             source, pivot and target models
//! stages/...             per-stage training records
//! rows/*.json            one metrics row per file
//! grids/*.json           transfer grids
//! report.json, report.md, grid-*.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{
    kd2_all, kd_step1, reference_gold_supervised, train_supervised, translate_test,
    translate_train_pseudo, PipelineOptions, PipelinePlan, StageRecord, TargetData, Teacher,
};
use crate::eval::{build_report, dissipation_delta, score, Delta, ExperimentReport, MetricsRow, RowKind, TransferGrid};
use crate::models::{pivot_pretrain, ArchConfig, EncoderModel, Family, HeadKind, MlmSettings, Task};
use crate::seed::derive_seed;
use crate::synthlang::{from_jsonl, generate, to_jsonl, Corpus, Languages, SplitSizes, SynthConfig, SPLITS};
use crate::tokenize::{train_bpe, Scope, SubwordVocab};
use crate::train::TrainSettings;
use crate::{in_stage, Error};

/// Optional shape overrides applied on top of the default edge configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeDims {
    pub embed: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSettings {
    /// Non-special BPE tokens per edge (single-language) vocabulary.
    pub edge: usize,
    pub shared: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self { edge: 800, shared: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PivotSettings {
    /// Pivot widths available to `--pivot-size`; the first is the default.
    pub sizes: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub mlm: MlmSettings,
}

impl Default for PivotSettings {
    fn default() -> Self {
        Self {
            sizes: vec![96, 128],
            layers: 2,
            heads: 4,
            mlm: MlmSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSettings {
    pub source: TrainSettings,
    pub kd1: TrainSettings,
    pub kd2: TrainSettings,
    pub pseudo: TrainSettings,
}

impl Default for StageSettings {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            source: t.clone(),
            kd1: t.clone(),
            kd2: t.clone(),
            pseudo: t,
        }
    }
}

/// Everything a run depends on. Serialized as one JSON document; unknown
/// fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Grammar and language definitions (JSON `SynthConfig`); built-in when absent.
    pub synth: Option<PathBuf>,
    /// False switches every reorder rule off.
    pub reordering: bool,
    pub sizes: SplitSizes,
    pub task: Task,
    pub arch: Family,
    /// Defaults to `arch`.
    pub target_arch: Option<Family>,
    pub options: PipelineOptions,
    /// Run every source/target architecture pair.
    pub grid: bool,
    /// Selected pivot width; defaults to the first of `pivot.sizes`.
    pub pivot_size: Option<usize>,
    pub edge: BTreeMap<Family, EdgeDims>,
    pub vocab: VocabSettings,
    pub pivot: PivotSettings,
    pub training: StageSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth: None,
            reordering: true,
            sizes: SplitSizes {
                annotated: 500,
                unannotated: 500,
                validation: 100,
                test: 200,
            },
            task: Task::Sentence,
            arch: Family::Transformer,
            target_arch: None,
            options: PipelineOptions::default(),
            grid: false,
            pivot_size: None,
            edge: BTreeMap::new(),
            vocab: VocabSettings::default(),
            pivot: PivotSettings::default(),
            training: StageSettings::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let c: RunConfig = serde_json::from_str(text).map_err(in_stage("config"))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(in_stage(format!("config {}", path.display())))?;
        Self::from_json(&text).map_err(in_stage(path.display().to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.pivot.sizes.is_empty() {
            return Err(invalid("config: pivot.sizes must not be empty"));
        }
        if let Some(s) = self.pivot_size {
            if !self.pivot.sizes.contains(&s) {
                return Err(invalid(format!("config: pivot_size {s} is not one of pivot.sizes {:?}", self.pivot.sizes)));
            }
        }
        if self.task == Task::Word && self.options.balanced {
            return Err(invalid("config: options.balanced is not available for the word task"));
        }
        for (name, t) in [
            ("source", &self.training.source),
            ("kd1", &self.training.kd1),
            ("kd2", &self.training.kd2),
            ("pseudo", &self.training.pseudo),
        ] {
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(invalid(format!("config: training.{name} needs epochs and batch_size above 0")));
            }
        }
        Ok(())
    }

    pub fn pivot_width(&self) -> usize {
        self.pivot_size.unwrap_or(self.pivot.sizes[0])
    }

    pub fn target_family(&self) -> Family {
        self.target_arch.unwrap_or(self.arch)
    }

    /// Only the fields that shape the generated data and vocabularies.
    fn data_key(&self) -> String {
        serde_json::json!({
            "seed": self.seed,
            "synth": self.synth,
            "reordering": self.reordering,
            "sizes": self.sizes,
            "vocab": self.vocab,
        })
        .to_string()
    }

    pub fn languages(&self) -> Result<Languages, Error> {
        let synth = match &self.synth {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(in_stage(format!("synth config {}", p.display())))?;
                serde_json::from_str::<SynthConfig>(&text).map_err(in_stage(format!("synth config {}", p.display())))?
            }
            None => SynthConfig::default(),
        };
        let synth = if self.reordering { synth } else { synth.without_reordering() };
        Ok(Languages::new(&synth)?)
    }

    /// Edge config for one family and task, with overrides applied.
    pub fn edge_config(&self, family: Family, task: Task, vocab: &SubwordVocab, langs: &Languages) -> ArchConfig {
        let g = langs.grammar();
        let mut c = ArchConfig::edge(family, HeadKind::from(task), vocab.len(), g.intents(), g.slot_labels());
        c.vocab_hash = vocab.hash();
        if let Some(d) = self.edge.get(&family) {
            if let Some(h) = d.hidden {
                c.hidden = h;
                c.ffn = 3 * h;
            }
            c.embed = d.embed.unwrap_or(c.embed);
            c.layers = d.layers.unwrap_or(c.layers);
            c.heads = d.heads.unwrap_or(c.heads);
            c.ffn = d.ffn.unwrap_or(c.ffn);
            c.dropout = d.dropout.unwrap_or(c.dropout);
        }
        c
    }
}

/// Line count and sha256 of one data file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub lines: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sizes: SplitSizes,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Derived seed of every stage run so far, by stage name.
    pub seeds: BTreeMap<String, u64>,
    /// Config hash each command last ran with.
    pub commands: BTreeMap<String, String>,
    /// sha256 of every file under the run directory except this manifest.
    pub artifacts: BTreeMap<String, String>,
}

/// Label reads charged to one loaded split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCount {
    pub lang: String,
    pub split: String,
    pub attempted: u64,
    pub successful: u64,
    pub blocked: u64,
}

/// A metrics row plus what the report needs to pair it with others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredRow {
    /// Pipeline runs sharing a KD-(1) stage share a group.
    pub group: Option<String>,
    pub pivot_size: Option<usize>,
    /// 1 for the pivot after the first step, 2 for final target models.
    pub stage: Option<u8>,
    /// Target-architecture key for pairing across pivot sizes.
    pub pairing: Option<String>,
    pub row: MetricsRow,
}

/// Which baseline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    TranslateTest,
    TranslateTrainPseudo,
}

/// Row label of a pipeline variant.
pub fn variant_label(options: PipelineOptions) -> &'static str {
    match (options.balanced, options.augment) {
        (false, false) => "2-step KD",
        (true, false) => "+ Balanced distillation",
        (true, true) => "+ Data augmentation",
        (false, true) => "2-step KD + data augmentation",
    }
}

fn variant_slug(options: PipelineOptions) -> &'static str {
    match (options.balanced, options.augment) {
        (false, false) => "kd",
        (true, false) => "balanced",
        (true, true) => "balanced-augmented",
        (false, true) => "augmented",
    }
}

fn task_slug(t: Task) -> &'static str {
    match t {
        Task::Sentence => "sentence",
        Task::Word => "word",
    }
}

/// An open run directory.
pub struct Run {
    dir: PathBuf,
    pub config: RunConfig,
    langs: Languages,
    corpora: BTreeMap<(String, String), Corpus>,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    /// Open `dir` for `config`. Fails if the directory already holds data
    /// generated from a different data configuration.
    pub fn open(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self, Error> {
        config.validate()?;
        let dir = dir.into();
        let existing = dir.join("config.json");
        if existing.exists() {
            let old = RunConfig::load(&existing)?;
            if old.data_key() != config.data_key() {
                return Err(invalid(format!(
                    "{} holds data for a different configuration (seed, synth, reordering, sizes or vocab differ)",
                    dir.display()
                )));
            }
        }
        let langs = config.languages()?;
        Ok(Self {
            dir,
            config,
            langs,
            corpora: BTreeMap::new(),
            seeds: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn languages(&self) -> &Languages {
        &self.langs
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<(), Error> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }

    fn read(&self, rel: &str) -> Result<String, Error> {
        fs::read_to_string(self.path(rel)).map_err(|e| invalid(format!("{}: {e}", self.path(rel).display())))
    }

    fn seed(&mut self, stage: &str, parts: &[&str]) -> u64 {
        let s = derive_seed(self.config.seed, parts);
        self.seeds.insert(stage.to_string(), s);
        s
    }

    /// Generate every split of every language, write them as JSONL with a
    /// dataset manifest, and train the tokenizers on the unannotated words.
    pub fn gen_data(&mut self) -> Result<DatasetManifest, Error> {
        let seed = self.seed("data", &["data"]);
        let bench = generate(&self.langs, self.config.sizes, seed)?;
        let mut files = BTreeMap::new();
        for (lang, splits) in &bench.splits {
            for split in SPLITS {
                let rel = format!("data/{lang}/{split}.jsonl");
                let text = to_jsonl(splits.split(split)?)?;
                files.insert(
                    rel.clone(),
                    FileEntry {
                        lines: text.lines().count(),
                        sha256: sha256_hex(text.as_bytes()),
                    },
                );
                self.write(&rel, &text)?;
            }
        }
        let manifest = DatasetManifest {
            seed,
            sizes: self.config.sizes,
            files,
        };
        self.write("data/manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
        self.write("config.json", &self.config.to_json())?;
        self.corpora.clear();

        let src = self.langs.source().to_string();
        let mut all = Vec::new();
        for lang in self.langs.all().to_vec() {
            let un = self.split(&lang, "unannotated")?.unlabeled_view();
            let mut parts = vec![un.clone()];
            if lang == src {
                parts.push(self.split(&lang, "annotated")?.unlabeled_view());
            }
            let refs: Vec<&Corpus> = parts.iter().collect();
            let v = train_bpe(&refs, self.config.vocab.edge, Scope::Language(lang.clone()))?;
            self.write(&format!("vocab/{lang}.json"), &v.to_json())?;
            all.push(un);
        }
        let refs: Vec<&Corpus> = all.iter().collect();
        let shared = train_bpe(&refs, self.config.vocab.shared, Scope::Shared(self.langs.all().to_vec()))?;
        self.write("vocab/shared.json", &shared.to_json())?;
        self.finish("gen-data")?;
        Ok(manifest)
    }

    /// A split as written by `gen_data`. Repeated loads share one label audit.
    pub fn split(&mut self, lang: &str, split: &str) -> Result<Corpus, Error> {
        let key = (lang.to_string(), split.to_string());
        if let Some(c) = self.corpora.get(&key) {
            return Ok(c.clone());
        }
        let rel = format!("data/{lang}/{split}.jsonl");
        if !self.path(&rel).exists() {
            return Err(invalid(format!("missing split {rel}; run gen-data first")));
        }
        let c = from_jsonl(&format!("{lang}/{split}"), &self.read(&rel)?)?;
        self.corpora.insert(key, c.clone());
        Ok(c)
    }

    pub fn vocab(&self, name: &str) -> Result<SubwordVocab, Error> {
        let rel = format!("vocab/{name}.json");
        if !self.path(&rel).exists() {
            return Err(invalid(format!("missing {rel}; run gen-data first")));
        }
        Ok(SubwordVocab::from_json(&self.read(&format!("vocab/{name}.json"))?)?)
    }

    /// The vocabulary whose hash matches `hash`.
    pub fn vocab_by_hash(&self, hash: &str) -> Result<SubwordVocab, Error> {
        let mut names: Vec<String> = self.langs.all().to_vec();
        names.push("shared".into());
        for n in names {
            let v = self.vocab(&n)?;
            if v.hash() == hash {
                return Ok(v);
            }
        }
        Err(invalid(format!("no vocabulary in the run matches hash {hash}")))
    }

    pub fn load_model(&self, rel: &str) -> Result<EncoderModel, Error> {
        let text = self.read(rel)?;
        Ok(EncoderModel::from_json(&text)?)
    }

    fn save_model(&self, rel: &str, m: &EncoderModel) -> Result<(), Error> {
        self.write(rel, &m.to_json())
    }

    fn save_stage(&self, r: &StageRecord) -> Result<(), Error> {
        let rel = format!("stages/{}.json", r.stage.replace('/', "."));
        self.write(&rel, &serde_json::to_string_pretty(r)?)
    }

    fn save_row(&self, name: &str, row: StoredRow) -> Result<(), Error> {
        self.write(&format!("rows/{name}.json"), &serde_json::to_string_pretty(&row)?)
    }

    pub fn rows(&self) -> Result<Vec<StoredRow>, Error> {
        read_dir_json(&self.path("rows"))
    }

    pub fn grids(&self) -> Result<Vec<TransferGrid>, Error> {
        read_dir_json(&self.path("grids"))
    }

    pub fn source_model_path(task: Task, arch: Family) -> String {
        format!("models/source-{}-{arch}.json", task_slug(task))
    }

    /// Score `model` on the test split of every language in `langs`.
    fn test_scores(&mut self, model: &EncoderModel, vocab: &SubwordVocab, langs: &[String], task: Task) -> Result<BTreeMap<String, f64>, Error> {
        let mut out = BTreeMap::new();
        for l in langs {
            let test = self.split(l, "test")?;
            let pred = model.predict_corpus(vocab, &test.unlabeled_view(), task)?;
            out.insert(l.clone(), score(&pred, &test)?);
        }
        Ok(out)
    }

    /// Supervised source-language model on the annotated source split: the
    /// only non-reference stage that reads gold training labels.
    pub fn train_source(&mut self, arch: Family) -> Result<(EncoderModel, MetricsRow), Error> {
        let task = self.config.task;
        let src = self.langs.source().to_string();
        let vocab = self.vocab(&src)?;
        let annotated = self.split(&src, "annotated")?;
        let validation = self.split(&src, "validation")?;
        let config = self.config.edge_config(arch, task, &vocab, &self.langs);
        let ts = task_slug(task);
        let init = self.seed(&format!("source-init/{ts}/{arch}"), &["source-init", ts, arch.name()]);
        let train_seed = self.seed(&format!("source/{ts}/{arch}"), &["source", ts, arch.name()]);
        let settings = TrainSettings {
            seed: train_seed,
            ..self.config.training.source.clone()
        };
        let (model, fit) = train_supervised(EncoderModel::build(config, init)?, &vocab, &annotated, &validation, task, &settings)?;
        self.save_model(&Self::source_model_path(task, arch), &model)?;
        self.save_stage(&StageRecord {
            stage: format!("source/{ts}/{arch}"),
            teacher: None,
            student: model.param_hash(),
            corpora: vec![(annotated.name().to_string(), crate::distill::corpus_fingerprint(&annotated))],
            seed: train_seed,
            agreement: None,
            fit,
        })?;
        let langs = self.langs.all().to_vec();
        let scores = self.test_scores(&model, &vocab, &langs, task)?;
        let row = MetricsRow::new(format!("Off-the-shelf source ({arch})"), RowKind::Source, task, &src, scores)?;
        self.save_row(
            &format!("source-{ts}-{arch}"),
            StoredRow {
                group: None,
                pivot_size: None,
                stage: None,
                pairing: None,
                row: row.clone(),
            },
        )?;
        self.finish(&format!("train-source/{ts}/{arch}"))?;
        Ok((model, row))
    }

    fn source_model(&self, arch: Family) -> Result<EncoderModel, Error> {
        let rel = Self::source_model_path(self.config.task, arch);
        if !self.path(&rel).exists() {
            return Err(invalid(format!("missing {rel}; run train-source --arch {arch} first")));
        }
        self.load_model(&rel)
    }

    /// MLM-pretrained pivot of width `size`, trained once per run directory.
    pub fn pretrained_pivot(&mut self, size: usize) -> Result<EncoderModel, Error> {
        let rel = format!("models/pivot-pretrained-h{size}.json");
        let seed = self.seed(&format!("pivot-pretrain/h{size}"), &["pivot-pretrain", &size.to_string()]);
        if self.path(&rel).exists() {
            return self.load_model(&rel);
        }
        let shared = self.vocab("shared")?;
        let g = self.langs.grammar();
        let mut c = ArchConfig::pivot(size, self.config.pivot.layers, shared.len(), g.intents(), g.slot_labels());
        c.heads = self.config.pivot.heads;
        c.vocab_hash = shared.hash();
        let mut corpora = Vec::new();
        for l in self.langs.all().to_vec() {
            corpora.push(self.split(&l, "unannotated")?.unlabeled_view());
        }
        let refs: Vec<&Corpus> = corpora.iter().collect();
        let settings = MlmSettings {
            seed,
            ..self.config.pivot.mlm.clone()
        };
        let (m, report) = pivot_pretrain(c, &refs, &shared, &settings)?;
        self.save_model(&rel, &m)?;
        self.write(&format!("stages/pivot-pretrain.h{size}.json"), &serde_json::to_string_pretty(&report)?)?;
        Ok(m)
    }

    fn target_data(&mut self) -> Result<Vec<(String, Corpus, Corpus, SubwordVocab)>, Error> {
        let mut out = Vec::new();
        for l in self.langs.targets().to_vec() {
            let un = self.split(&l, "unannotated")?.unlabeled_view();
            let val = self.split(&l, "validation")?.unlabeled_view();
            let v = self.vocab(&l)?;
            out.push((l, un, val, v));
        }
        Ok(out)
    }

    /// Two-step distillation for the configured options. With `grid` set,
    /// every source architecture feeds every target architecture and a
    /// transfer grid is written.
    pub fn pipeline(&mut self) -> Result<Vec<MetricsRow>, Error> {
        let task = self.config.task;
        let options = self.config.options;
        let size = self.config.pivot_width();
        let (sources, targets_archs): (Vec<Family>, Vec<Family>) = if self.config.grid {
            (Family::ALL.to_vec(), Family::ALL.to_vec())
        } else {
            (vec![self.config.arch], vec![self.config.target_family()])
        };
        let src_lang = self.langs.source().to_string();
        let src_vocab = self.vocab(&src_lang)?;
        let shared = self.vocab("shared")?;
        let d_src = self.split(&src_lang, "unannotated")?.unlabeled_view();
        let src_val = self.split(&src_lang, "validation")?.unlabeled_view();
        let tdata = self.target_data()?;
        let pivot = self.pretrained_pivot(size)?;
        let ts = task_slug(task);
        let slug = variant_slug(options);
        let label = variant_label(options);
        let mut grid = TransferGrid::new(format!("{label}, {ts}, pivot h{size}"), task);
        let mut rows = Vec::new();
        let all_langs = self.langs.all().to_vec();

        for &src_arch in &sources {
            let source = self.source_model(src_arch)?;
            let src_score = self.test_scores(&source, &src_vocab, std::slice::from_ref(&src_lang), task)?[&src_lang];
            grid.set_source_score(src_arch, src_score);
            let group = format!("{slug}-{ts}-{src_arch}-h{size}");
            let plan_seed = self.seed(&format!("pipeline/{group}"), &["pipeline", slug, ts, src_arch.name(), &size.to_string()]);
            let teacher = Teacher {
                model: &source,
                vocab: &src_vocab,
            };
            let balanced: Vec<String> = if options.balanced {
                self.langs.targets().to_vec()
            } else {
                Vec::new()
            };
            let kd1_settings = TrainSettings {
                seed: derive_seed(plan_seed, &["kd1"]),
                ..self.config.training.kd1.clone()
            };
            let (pivot_model, r1) = kd_step1(&self.langs, teacher, &pivot, &shared, &d_src, &src_val, &balanced, task, &kd1_settings)
                .map_err(in_stage(format!("pipeline {group}, KD-(1)")))?;
            let r1 = StageRecord {
                stage: format!("{group}/kd1"),
                ..r1
            };
            self.save_stage(&r1)?;
            self.save_model(&format!("models/{group}/pivot.json"), &pivot_model)?;
            let s1 = self.test_scores(&pivot_model, &shared, &all_langs, task)?;
            let row1 = MetricsRow::new(format!("KD-(1) pivot h{size} ({label}, {src_arch})"), RowKind::Stage, task, &src_lang, s1)?;
            self.save_row(
                &format!("{group}.stage1"),
                StoredRow {
                    group: Some(group.clone()),
                    pivot_size: Some(size),
                    stage: Some(1),
                    pairing: None,
                    row: row1.clone(),
                },
            )?;
            rows.push(row1);

            let pivot_teacher = Teacher {
                model: &pivot_model,
                vocab: &shared,
            };
            for &tgt_arch in &targets_archs {
                let template = self.config.edge_config(tgt_arch, task, &src_vocab, &self.langs);
                let targets: Vec<TargetData> = tdata
                    .iter()
                    .map(|(l, un, val, v)| TargetData {
                        lang: l,
                        unannotated: un,
                        validation: val,
                        vocab: v,
                    })
                    .collect();
                let plan = PipelinePlan {
                    template: &template,
                    options,
                    task,
                    kd1: &self.config.training.kd1,
                    kd2: &self.config.training.kd2,
                    seed: derive_seed(plan_seed, &["kd2", tgt_arch.name()]),
                };
                let (models, records) = kd2_all(&self.langs, pivot_teacher, &targets, &plan)
                    .map_err(in_stage(format!("pipeline {group}, KD-(2) to {tgt_arch}")))?;
                let mut scores = BTreeMap::new();
                scores.insert(src_lang.clone(), src_score);
                for (l, m) in &models {
                    let v = &tdata.iter().find(|t| &t.0 == l).expect("target data").3;
                    scores.extend(self.test_scores(m, v, std::slice::from_ref(l), task)?);
                    self.save_model(&format!("models/{group}/{tgt_arch}-{l}.json"), m)?;
                }
                for r in records {
                    self.save_stage(&StageRecord {
                        stage: format!("{group}/{tgt_arch}/{}", r.stage),
                        ..r
                    })?;
                }
                let row = MetricsRow::new(format!("{label} ({src_arch}->{tgt_arch}, pivot h{size})"), RowKind::Ours, task, &src_lang, scores)?;
                grid.set(src_arch, tgt_arch, row.average);
                self.save_row(
                    &format!("{group}.{tgt_arch}"),
                    StoredRow {
                        group: Some(group.clone()),
                        pivot_size: Some(size),
                        stage: Some(2),
                        pairing: Some(format!("{slug}-{ts}-{src_arch}-{tgt_arch}")),
                        row: row.clone(),
                    },
                )?;
                rows.push(row);
            }
        }
        if self.config.grid {
            self.write(&format!("grids/{slug}-{ts}-h{size}.json"), &serde_json::to_string_pretty(&grid)?)?;
        }
        self.check_gate()?;
        self.finish(&format!("pipeline/{slug}/{ts}/h{size}"))?;
        Ok(rows)
    }

    /// The translate-test or translate-train-pseudo baseline for the configured architectures.
    pub fn baseline(&mut self, which: Baseline) -> Result<MetricsRow, Error> {
        let task = self.config.task;
        let ts = task_slug(task);
        let arch = self.config.arch;
        let src_lang = self.langs.source().to_string();
        let src_vocab = self.vocab(&src_lang)?;
        let source = self.source_model(arch)?;
        let src_score = self.test_scores(&source, &src_vocab, std::slice::from_ref(&src_lang), task)?[&src_lang];
        let teacher = Teacher {
            model: &source,
            vocab: &src_vocab,
        };
        let mut scores = BTreeMap::new();
        scores.insert(src_lang.clone(), src_score);
        let (name, file) = match which {
            Baseline::TranslateTest => {
                for l in self.langs.targets().to_vec() {
                    let test = self.split(&l, "test")?;
                    let tt = translate_test(&self.langs, teacher, &test, task)
                        .map_err(in_stage(format!("translate-test {l}")))?;
                    scores.insert(l, score(&tt.predictions, &test)?);
                }
                (format!("Translate-test ({arch})"), format!("translate-test-{ts}-{arch}"))
            }
            Baseline::TranslateTrainPseudo => {
                let tgt_arch = self.config.target_family();
                let d_src = self.split(&src_lang, "unannotated")?.unlabeled_view();
                let src_val = self.split(&src_lang, "validation")?.unlabeled_view();
                let template = self.config.edge_config(tgt_arch, task, &src_vocab, &self.langs);
                let seed = self.seed(&format!("pseudo/{ts}/{arch}-{tgt_arch}"), &["pseudo", ts, arch.name(), tgt_arch.name()]);
                for (l, un, val, v) in self.target_data()? {
                    let target = TargetData {
                        lang: &l,
                        unannotated: &un,
                        validation: &val,
                        vocab: &v,
                    };
                    let (m, r) = translate_train_pseudo(&self.langs, teacher, &d_src, &src_val, target, &template, task, &self.config.training.pseudo, seed)
                        .map_err(in_stage(format!("translate-train-pseudo {l}")))?;
                    self.save_stage(&StageRecord {
                        stage: format!("pseudo-{ts}-{arch}-{tgt_arch}/{}", r.stage),
                        ..r
                    })?;
                    self.save_model(&format!("models/pseudo-{ts}-{arch}-{tgt_arch}/{l}.json"), &m)?;
                    scores.extend(self.test_scores(&m, &v, std::slice::from_ref(&l), task)?);
                }
                (
                    format!("Translate-train-pseudo ({arch}->{tgt_arch})"),
                    format!("translate-train-pseudo-{ts}-{arch}-{tgt_arch}"),
                )
            }
        };
        let row = MetricsRow::new(name, RowKind::Baseline, task, &src_lang, scores)?;
        self.save_row(
            &file,
            StoredRow {
                group: None,
                pivot_size: None,
                stage: None,
                pairing: None,
                row: row.clone(),
            },
        )?;
        self.check_gate()?;
        self.finish(&format!("baseline/{file}"))?;
        Ok(row)
    }

    /// Gold-supervised pivot followed by the usual KD-(2).
    pub fn reference(&mut self) -> Result<MetricsRow, Error> {
        let task = self.config.task;
        let ts = task_slug(task);
        let size = self.config.pivot_width();
        let tgt_arch = self.config.target_family();
        let src_lang = self.langs.source().to_string();
        let shared = self.vocab("shared")?;
        let src_vocab = self.vocab(&src_lang)?;
        let annotated = self.split(&src_lang, "annotated")?;
        let src_val = self.split(&src_lang, "validation")?;
        let tdata = self.target_data()?;
        let pivot = self.pretrained_pivot(size)?;
        let template = self.config.edge_config(tgt_arch, task, &src_vocab, &self.langs);
        let seed = self.seed(&format!("reference/{ts}/{tgt_arch}/h{size}"), &["reference", ts, tgt_arch.name(), &size.to_string()]);
        let targets: Vec<TargetData> = tdata
            .iter()
            .map(|(l, un, val, v)| TargetData {
                lang: l,
                unannotated: un,
                validation: val,
                vocab: v,
            })
            .collect();
        let plan = PipelinePlan {
            template: &template,
            options: PipelineOptions::default(),
            task,
            kd1: &self.config.training.source,
            kd2: &self.config.training.kd2,
            seed,
        };
        let run = reference_gold_supervised(&self.langs, &pivot, &shared, &annotated, &src_val, &targets, &plan)
            .map_err(in_stage("gold-supervised reference"))?;
        let name = format!("gold-{ts}-{tgt_arch}-h{size}");
        for r in &run.stages {
            self.save_stage(&StageRecord {
                stage: format!("{name}/{}", r.stage),
                ..r.clone()
            })?;
        }
        let mut scores = self.test_scores(&run.pivot, &shared, std::slice::from_ref(&src_lang), task)?;
        for (l, m) in &run.targets {
            let v = &tdata.iter().find(|t| &t.0 == l).expect("target data").3;
            scores.extend(self.test_scores(m, v, std::slice::from_ref(l), task)?);
            self.save_model(&format!("models/{name}/{l}.json"), m)?;
        }
        let row = MetricsRow::new(format!("Gold-supervised target ({tgt_arch}, pivot h{size})"), RowKind::Reference, task, &src_lang, scores)?;
        self.save_row(
            &name,
            StoredRow {
                group: None,
                pivot_size: Some(size),
                stage: None,
                pairing: None,
                row: row.clone(),
            },
        )?;
        self.check_gate()?;
        self.finish(&format!("reference/{name}"))?;
        Ok(row)
    }

    /// Score a saved model on one split of one language.
    pub fn eval_model(&mut self, model_path: &Path, lang: &str, split: &str) -> Result<f64, Error> {
        let text = fs::read_to_string(model_path).map_err(in_stage(model_path.display().to_string()))?;
        let model = EncoderModel::from_json(&text)?;
        let vocab = self.vocab_by_hash(&model.config.vocab_hash)?;
        let task = if model.config.head.has(self.config.task) {
            self.config.task
        } else if model.config.head.has(Task::Sentence) {
            Task::Sentence
        } else {
            Task::Word
        };
        let gold = self.split(lang, split)?;
        let pred = model.predict_corpus(&vocab, &gold.unlabeled_view(), task)?;
        Ok(score(&pred, &gold)?)
    }

    /// Assemble every stored row and grid into `report.json`, `report.md`
    /// and one CSV per grid.
    pub fn report(&mut self) -> Result<ExperimentReport, Error> {
        let stored = self.rows()?;
        if stored.is_empty() {
            return Err(invalid(format!("{} has no metrics rows to report", self.dir.display())));
        }
        let src = self.langs.source().to_string();
        let mut deltas = Vec::new();
        let mut by_pairing: BTreeMap<String, Vec<(usize, Delta)>> = BTreeMap::new();
        for s2 in stored.iter().filter(|r| r.stage == Some(2)) {
            let Some(s1) = stored.iter().find(|r| r.stage == Some(1) && r.group == s2.group) else {
                continue;
            };
            let d = dissipation_delta(&targets_only(&s1.row, &src)?, &targets_only(&s2.row, &src)?)?;
            if let (Some(p), Some(size)) = (&s2.pairing, s2.pivot_size) {
                by_pairing.entry(p.clone()).or_default().push((size, d.clone()));
            }
            deltas.push(d);
        }
        for mut list in by_pairing.into_values() {
            list.sort_by_key(|(s, _)| *s);
            for w in list.windows(2) {
                deltas.push(w[1].1.minus(&w[0].1)?);
            }
        }
        let grids = self.grids()?;
        for g in &grids {
            let name = g.label.replace([',', ' '], "-").replace("--", "-").to_lowercase();
            self.write(&format!("grid-{name}.csv"), &g.to_csv())?;
        }
        let report = build_report("Cross-lingual transfer results", stored.into_iter().map(|s| s.row).collect(), deltas, grids);
        self.write("report.json", &report.to_json())?;
        self.write("report.md", &report.to_markdown())?;
        self.finish("report")?;
        Ok(report)
    }

    /// Label reads charged to every split loaded so far.
    pub fn gate_report(&self) -> Vec<GateCount> {
        self.corpora
            .iter()
            .map(|((lang, split), c)| GateCount {
                lang: lang.clone(),
                split: split.clone(),
                attempted: c.audit().attempted(),
                successful: c.audit().successful(),
                blocked: c.audit().blocked(),
            })
            .collect()
    }

    /// Fail when labels of an unannotated split were read, or any read was blocked.
    pub fn check_gate(&self) -> Result<(), Error> {
        for g in self.gate_report() {
            if g.blocked > 0 || (g.split == "unannotated" && g.successful > 0) {
                return Err(Error::GateViolation(format!(
                    "{} label reads on {}/{} ({} blocked)",
                    g.attempted, g.lang, g.split, g.blocked
                )));
            }
        }
        Ok(())
    }

    /// Rewrite `manifest.json` with the current seeds and artifact hashes.
    fn finish(&mut self, command: &str) -> Result<(), Error> {
        let mut m: Manifest = match fs::read_to_string(self.path("manifest.json")) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => Manifest::default(),
        };
        m.seed = self.config.seed;
        m.config_hash = sha256_hex(self.config.data_key().as_bytes());
        m.seeds.append(&mut self.seeds);
        m.commands.insert(command.to_string(), self.config.hash());
        m.artifacts = hash_tree(&self.dir)?;
        self.write("manifest.json", &serde_json::to_string_pretty(&m)?)
    }

    pub fn manifest(&self) -> Result<Manifest, Error> {
        Ok(serde_json::from_str(&self.read("manifest.json")?)?)
    }
}

fn targets_only(row: &MetricsRow, source: &str) -> Result<MetricsRow, Error> {
    let scores = row.scores.iter().filter(|(l, _)| *l != source).map(|(l, v)| (l.clone(), *v)).collect();
    Ok(MetricsRow::new(row.model.clone(), row.kind, row.task, source, scores)?)
}

fn read_dir_json<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, Error> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(in_stage(p.display().to_string()))
        })
        .collect()
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>, Error> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            out.insert(rel, sha256_hex(&fs::read(&p)?));
        }
    }
    Ok(out)
}
