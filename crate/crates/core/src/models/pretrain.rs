use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, mlm_logits, ArchConfig, EncoderModel};
use crate::numeric::{Session, Var};
use crate::seed::derive_seed;
use crate::synthlang::Corpus;
use crate::tokenize::{SubwordVocab, MASK_ID};
use crate::train::{adamw_step, batch_grads, clip_grad_norm, AdamState, AdamWConfig, cross_entropy_sum};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for MlmSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            mask_rate: 0.15,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub losses: Vec<f64>,
    /// Masked-token accuracy on a fixed held-back masking of the first sentences.
    pub accuracy: f64,
    pub chance: f64,
}

struct Masked {
    ids: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

/// Mask each non-initial position with probability `rate`, at least one per sentence.
fn mask<R: Rng>(ids: &[usize], rate: f64, rng: &mut R) -> Masked {
    let mut positions: Vec<usize> = (1..ids.len()).filter(|_| rng.gen_bool(rate)).collect();
    if positions.is_empty() && ids.len() > 1 {
        positions.push(rng.gen_range(1..ids.len()));
    }
    let mut masked = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    Masked {
        ids: masked,
        positions,
        targets,
    }
}

fn mlm_item(c: &ArchConfig, s: &mut Session<f32>, m: &Masked) -> Result<(Var, f64), Error> {
    let logits = mlm_logits(c, s, &m.ids, &m.positions)?;
    let ce = cross_entropy_sum(&mut s.graph, logits, &m.targets)?;
    Ok((ce, m.targets.len() as f64))
}

/// Masked-token pretraining of a shared-vocabulary pivot. Only the words of
/// the corpora are read.
pub fn pivot_pretrain(
    config: ArchConfig,
    corpora: &[&Corpus],
    vocab: &SubwordVocab,
    settings: &MlmSettings,
) -> Result<(EncoderModel, MlmReport), Error> {
    let mut model = EncoderModel::build(config, derive_seed(settings.seed, &["pivot-init"]))?;
    let sentences: Vec<Vec<usize>> = corpora
        .iter()
        .flat_map(|c| c.examples())
        .map(|e| model.tokenize(vocab, e.words()).ids)
        .filter(|ids| ids.len() > 1)
        .collect();
    if sentences.is_empty() {
        return Err(crate::train::TrainError::NoData.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &["mlm"]));
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(settings.steps);
    let config = model.config.clone();
    let item = |s: &mut Session<f32>, m: &Masked| mlm_item(&config, s, m);
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        for _ in 0..settings.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(mask(&sentences[order[cursor]], settings.mask_rate, &mut rng));
            cursor += 1;
        }
        let refs: Vec<&Masked> = batch.iter().collect();
        let seed = derive_seed(settings.seed, &["mlm-dropout", &step.to_string()]);
        let (loss, mut grads) = batch_grads(&model.params, &refs, &item, seed)?;
        if !loss.is_finite() {
            return Err(crate::train::TrainError::NonFiniteLoss { epoch: 0, batch: step }.into());
        }
        clip_grad_norm(&mut grads, 5.0);
        adamw_step(&mut model.params, &grads, &mut state, &settings.adam, settings.lr)?;
        losses.push(loss);
    }
    let held: Vec<Vec<usize>> = sentences.iter().take(200).cloned().collect();
    let accuracy = masked_accuracy(&model, &held, derive_seed(settings.seed, &["mlm-eval"]))?;
    Ok((
        model,
        MlmReport {
            losses,
            accuracy,
            chance: 1.0 / vocab.len() as f64,
        },
    ))
}

/// Fraction of masked positions whose arg-max prediction is the original token.
pub fn masked_accuracy(model: &EncoderModel, sentences: &[Vec<usize>], seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for ids in sentences.iter().filter(|ids| ids.len() > 1) {
        let m = mask(ids, 0.15, &mut rng);
        let mut s = Session::new(&model.params, false, 0);
        let logits = mlm_logits(&model.config, &mut s, &m.ids, &m.positions)?;
        let v = s.graph.value(logits);
        for (row, &t) in v.data().chunks(v.cols()).zip(&m.targets) {
            let r: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            hit += usize::from(argmax(&r) == t);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
