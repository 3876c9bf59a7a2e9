use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{task_logits, ArchConfig, Task};
use crate::numeric::{ParamStore, Session, DEFAULT_STEP};
use crate::tokenize::Tokenization;
use crate::train::cross_entropy_sum;
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index with the largest error.
    pub worst: (String, usize),
    pub checked: usize,
}

fn targets(c: &ArchConfig, task: Task, example: usize, units: usize) -> Vec<usize> {
    let k = c.categories(task).len();
    (0..units).map(|u| (example * 3 + u) % k).collect()
}

fn batch_loss(c: &ArchConfig, params: &ParamStore<f64>, batch: &[Tokenization], task: Task) -> Result<f64, Error> {
    let mut s = Session::new(params, false, 0);
    let mut total = 0.0;
    for (i, tok) in batch.iter().enumerate() {
        let logits = task_logits(c, &mut s, tok, task)?;
        let t = targets(c, task, i, s.graph.value(logits).rows());
        let ce = cross_entropy_sum(&mut s.graph, logits, &t)?;
        total += s.graph.value(ce).data()[0];
    }
    Ok(total)
}

/// Central-difference check of the summed cross-entropy of `batch` against
/// fixed targets, over up to `per_tensor` random coordinates of every
/// parameter. Runs in eval mode so dropout is off.
pub fn model_gradient_check(
    c: &ArchConfig,
    params: &ParamStore<f64>,
    batch: &[Tokenization],
    task: Task,
    per_tensor: usize,
    seed: u64,
) -> Result<ModelGradCheck, Error> {
    let mut s = Session::new(params, false, 0);
    let mut parts = Vec::new();
    for (i, tok) in batch.iter().enumerate() {
        let logits = task_logits(c, &mut s, tok, task)?;
        let t = targets(c, task, i, s.graph.value(logits).rows());
        parts.push(cross_entropy_sum(&mut s.graph, logits, &t)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = s.graph.add(total, p)?;
    }
    s.graph.backward(total)?;
    let grads = s.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let coords = sample(&mut rng, n, per_tensor.min(n)).into_vec();
        for i in coords {
            let orig = params.get(&name).expect("name from store").data()[i];
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig + DEFAULT_STEP;
            let plus = batch_loss(c, &probe, batch, task)?;
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig - DEFAULT_STEP;
            let minus = batch_loss(c, &probe, batch, task)?;
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let analytic = grads.get(&name).map_or(0.0, |g| g[i]);
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
