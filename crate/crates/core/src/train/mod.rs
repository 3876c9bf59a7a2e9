//! AdamW, the learning-rate range test and the epoch loop with checkpoint selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, ParamStore, Real, Session, Tensor, Var};
use crate::seed::derive_seed;
use crate::Error;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("nothing to train on")]
    NoData,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators keyed by parameter name, plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient are
/// left alone; any non-finite gradient rejects the whole step.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { layer: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr_t = T::from_f64_lossy(lr);
    let decay = T::from_f64_lossy(lr * cfg.weight_decay);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta = *theta - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * *theta;
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Fixed(f64),
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LearningRate,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a new best validation score (0 disables).
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: LearningRate::Auto,
            adam: AdamWConfig::default(),
            seed: 0,
            clip_norm: Some(5.0),
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_score: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRangeReport {
    pub chosen: f64,
    pub fallback: bool,
    pub lrs: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub optimizer_steps: u64,
    pub lr: f64,
    pub range_test: Option<LrRangeReport>,
}

impl FitReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// Loss of one item: a scalar holding the summed loss and the number of
/// units it sums over. A batch minimizes the sum divided by the total units.
pub trait ItemLoss<I>: Fn(&mut Session<f32>, &I) -> Result<(Var, f64), Error> {}
impl<I, F: Fn(&mut Session<f32>, &I) -> Result<(Var, f64), Error>> ItemLoss<I> for F {}

fn sum_vars(g: &mut Graph<f32>, vars: &[Var]) -> Result<Var, Error> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Forward and backward over one batch; returns the batch loss and gradients.
pub(crate) fn batch_grads<I, L: ItemLoss<I>>(
    params: &ParamStore<f32>,
    batch: &[&I],
    loss: &L,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Vec<f32>>), Error> {
    let mut sess = Session::new(params, true, seed);
    let mut parts = Vec::with_capacity(batch.len());
    let mut units = 0.0;
    for item in batch {
        let (v, n) = loss(&mut sess, item)?;
        parts.push(v);
        units += n;
    }
    let total = sum_vars(&mut sess.graph, &parts)?;
    let l = sess.graph.scale(total, 1.0 / units.max(1.0));
    let value = f64::from(sess.graph.value(l).data()[0]);
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    sess.graph.backward(l)?;
    Ok((value, sess.param_grads()))
}

pub const RANGE_MIN_LR: f64 = 1e-6;
pub const RANGE_MAX_LR: f64 = 1e-1;
pub const RANGE_STEPS: usize = 100;
pub const FALLBACK_LR: f64 = 1e-3;

/// Exponential sweep on a throwaway copy of `params`. The pick is the rate at
/// the steepest drop of the smoothed loss, divided by ten.
pub fn lr_range_test<I, L: ItemLoss<I>>(
    params: &ParamStore<f32>,
    items: &[I],
    loss: &L,
    settings: &TrainSettings,
) -> Result<LrRangeReport, Error> {
    if items.is_empty() {
        return Err(TrainError::NoData.into());
    }
    let mut work = params.clone();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &["range-test"]));
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let bs = settings.batch_size.max(1);
    let ratio = (RANGE_MAX_LR / RANGE_MIN_LR).ln();
    let (beta, mut avg, mut best) = (0.98, 0.0, f64::INFINITY);
    let mut lrs = Vec::new();
    let mut smoothed = Vec::new();
    for step in 0..RANGE_STEPS {
        let lr = RANGE_MIN_LR * (ratio * step as f64 / (RANGE_STEPS - 1) as f64).exp();
        let start = (step * bs) % items.len();
        let batch: Vec<&I> = (0..bs).map(|k| &items[order[(start + k) % items.len()]]).collect();
        let seed = derive_seed(settings.seed, &["range-test", &step.to_string()]);
        let (value, mut grads) = batch_grads(&work, &batch, loss, seed)?;
        if !value.is_finite() {
            break;
        }
        avg = beta * avg + (1.0 - beta) * value;
        let s = avg / (1.0 - beta.powi(step as i32 + 1));
        lrs.push(lr);
        smoothed.push(s);
        if s > 4.0 * best {
            break;
        }
        best = best.min(s);
        if let Some(c) = settings.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        if adamw_step(&mut work, &grads, &mut state, &settings.adam, lr).is_err() {
            break;
        }
    }
    let mut steepest: Option<(usize, f64)> = None;
    for i in 0..smoothed.len().saturating_sub(1) {
        let slope = (smoothed[i + 1] - smoothed[i]) / (lrs[i + 1].ln() - lrs[i].ln());
        // Ignore rounding-level wiggles of a flat curve.
        if slope < -1e-9 * (1.0 + smoothed[i].abs()) && steepest.is_none_or(|(_, s)| slope < s) {
            steepest = Some((i, slope));
        }
    }
    let (chosen, fallback) = match steepest {
        Some((i, _)) => (lrs[i] / 10.0, false),
        None => {
            log::warn!("learning-rate range test found no descent; using {FALLBACK_LR}");
            (FALLBACK_LR, true)
        }
    };
    Ok(LrRangeReport {
        chosen,
        fallback,
        lrs,
        smoothed,
    })
}

/// Epoch loop with seeded shuffling, per-epoch validation (higher is better),
/// early stopping and best-checkpoint restore. Ties keep the earlier epoch.
pub fn fit<I, L, V>(
    params: &mut ParamStore<f32>,
    items: &[I],
    loss: L,
    mut validate: V,
    settings: &TrainSettings,
) -> Result<FitReport, Error>
where
    L: ItemLoss<I>,
    V: FnMut(&ParamStore<f32>) -> Result<f64, Error>,
{
    if items.is_empty() {
        return Err(TrainError::NoData.into());
    }
    let (lr, range_test) = match settings.lr {
        LearningRate::Fixed(lr) => (lr, None),
        LearningRate::Auto => {
            let r = lr_range_test(params, items, &loss, settings)?;
            (r.chosen, Some(r))
        }
    };
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let bs = settings.batch_size.max(1);
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 1..=settings.epochs {
        let ep = epoch.to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &["shuffle", &ep]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&I> = chunk.iter().map(|&i| &items[i]).collect();
            let seed = derive_seed(settings.seed, &["dropout", &ep, &b.to_string()]);
            let (value, mut grads) = batch_grads(params, &batch, &loss, seed)?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b }.into());
            }
            if let Some(c) = settings.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(params, &grads, &mut state, &settings.adam, lr)?;
            loss_sum += value;
            batches += 1;
        }
        let score = validate(params)?;
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_score: score,
            lr,
        });
        log::debug!("epoch {epoch}: loss {:.4} val {score:.4}", loss_sum / batches as f64);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if settings.patience > 0 && epoch - best_epoch >= settings.patience {
            break;
        }
    }
    let (best_epoch, best_score, snapshot) = best.ok_or(TrainError::NoData)?;
    *params = snapshot;
    Ok(FitReport {
        epochs: records,
        best_epoch,
        best_score,
        optimizer_steps: state.step,
        lr,
        range_test,
    })
}

/// Summed cross-entropy of row-wise logits against class indices.
pub fn cross_entropy_sum<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var, Error> {
    let logp = g.log_softmax(logits)?;
    let (rows, cols) = g.value(logp).dims2("cross_entropy")?;
    if rows != targets.len() {
        return Err(crate::numeric::NumericError::Shape {
            op: "cross_entropy",
            detail: format!("{rows} rows for {} targets", targets.len()),
        }
        .into());
    }
    let mut onehot = vec![T::zero(); rows * cols];
    for (r, &t) in targets.iter().enumerate() {
        onehot[r * cols + t] = T::one();
    }
    let mask = g.constant(Tensor::matrix(rows, cols, onehot)?);
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

#[cfg(test)]
mod tests;
