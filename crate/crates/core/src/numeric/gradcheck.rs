use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericError;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64, NumericError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumericError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(NumericError::shape("gradient_check", format!("function returned {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare the reverse-mode gradient of a scalar function against central
/// differences. The error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumericError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(d) => d.to_vec(),
        None => vec![0.0; point.len()],
    };
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(NumericError::NonFinite { coordinate: i });
    }

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let d = (plus - minus) / (2.0 * step);
        if !d.is_finite() {
            return Err(NumericError::NonFinite { coordinate: i });
        }
        numeric.push(d);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

type G = Graph<f64>;
type Fx = Box<dyn Fn(&mut G, Var) -> Result<Var, NumericError>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Reduce `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn project(g: &mut G, y: Var, seed: u64) -> Result<Var, NumericError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(g.value(y).shape(), &mut rng, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn const_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed + 1000), -1.0, 1.0)
}

/// Worst finite-difference disagreement of one primitive over several random points.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst_trial: u64,
}

/// Gradient-check every graph operation (each wrapped so the output reduces
/// to a scalar) at `trials` random points each.
pub fn primitive_gradient_checks(trials: u64) -> Result<Vec<PrimitiveCheck>, NumericError> {
    let s = 77;
    let cases: Vec<(&str, Fx, Vec<usize>, f64, f64)> = vec![
        (
            "matmul_lhs",
            Box::new(move |g: &mut G, x: Var| {
                let b = g.constant(const_tensor(&[4, 3], 1));
                let y = g.matmul(x, b)?;
                project(g, y, s)
            }),
            vec![2, 4],
            -1.0,
            1.0,
        ),
        (
            "matmul_rhs",
            Box::new(move |g: &mut G, x: Var| {
                let a = g.constant(const_tensor(&[2, 4], 2));
                let y = g.matmul(a, x)?;
                project(g, y, s)
            }),
            vec![4, 3],
            -1.0,
            1.0,
        ),
        (
            "matmul_nt_both",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.matmul_nt(x, x)?;
                project(g, y, s)
            }),
            vec![3, 4],
            -1.0,
            1.0,
        ),
        (
            "add_row",
            Box::new(move |g: &mut G, x: Var| {
                let a = g.constant(const_tensor(&[3, 4], 3));
                let y = g.add_row(a, x)?;
                let y = g.mul(y, y)?;
                project(g, y, s)
            }),
            vec![1, 4],
            -1.0,
            1.0,
        ),
        (
            "add_mul",
            Box::new(move |g: &mut G, x: Var| {
                let c = g.constant(const_tensor(&[2, 3], 4));
                let y = g.add(x, c)?;
                let y = g.mul(y, x)?;
                project(g, y, s)
            }),
            vec![2, 3],
            -1.0,
            1.0,
        ),
        (
            "scale",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.scale(x, -2.5);
                project(g, y, s)
            }),
            vec![2, 3],
            -1.0,
            1.0,
        ),
        (
            "sigmoid",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.sigmoid(x);
                project(g, y, s)
            }),
            vec![2, 3],
            -3.0,
            3.0,
        ),
        (
            "tanh",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.tanh(x);
                project(g, y, s)
            }),
            vec![2, 3],
            -2.0,
            2.0,
        ),
        (
            "relu",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.relu(x);
                project(g, y, s)
            }),
            vec![3, 3],
            -1.0,
            1.0,
        ),
        (
            "softmax",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.softmax(x)?;
                project(g, y, s)
            }),
            vec![2, 5],
            -2.0,
            2.0,
        ),
        (
            "log_softmax",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.log_softmax(x)?;
                project(g, y, s)
            }),
            vec![2, 5],
            -2.0,
            2.0,
        ),
        (
            "log",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.log(x);
                project(g, y, s)
            }),
            vec![2, 3],
            0.5,
            2.0,
        ),
        (
            "embedding",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.embedding(x, &[2, 0, 2, 3])?;
                let y = g.tanh(y);
                project(g, y, s)
            }),
            vec![4, 3],
            -1.0,
            1.0,
        ),
        (
            "conv1d_input",
            Box::new(move |g: &mut G, x: Var| {
                let w = g.constant(const_tensor(&[3 * 2, 4], 5));
                let b = g.constant(const_tensor(&[1, 4], 6));
                let y = g.conv1d(x, w, b, 3, 2)?;
                project(g, y, s)
            }),
            vec![5, 2],
            -1.0,
            1.0,
        ),
        (
            "conv1d_weight",
            Box::new(move |g: &mut G, x: Var| {
                let inp = g.constant(const_tensor(&[4, 2], 7));
                let b = g.constant(const_tensor(&[1, 3], 8));
                let y = g.conv1d(inp, x, b, 4, 1)?;
                let y = g.tanh(y);
                project(g, y, s)
            }),
            vec![4 * 2, 3],
            -1.0,
            1.0,
        ),
        (
            "max_over_time",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.max_over_time(x)?;
                project(g, y, s)
            }),
            vec![4, 3],
            -1.0,
            1.0,
        ),
        (
            "concat_slice",
            Box::new(move |g: &mut G, x: Var| {
                let c = g.constant(const_tensor(&[3, 2], 9));
                let y = g.concat_cols(&[x, c, x])?;
                let y = g.slice_cols(y, 1, 5)?;
                let z = g.concat_rows(&[y, y])?;
                let z = g.tanh(z);
                project(g, z, s)
            }),
            vec![3, 2],
            -1.0,
            1.0,
        ),
        (
            "select_rows",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.select_rows(x, &[0, 2, 0])?;
                let y = g.mul(y, y)?;
                project(g, y, s)
            }),
            vec![3, 2],
            -1.0,
            1.0,
        ),
        (
            "sum_mean",
            Box::new(move |g: &mut G, x: Var| {
                let y = g.mul(x, x)?;
                let a = g.mean(y)?;
                let b = g.sum(x);
                let z = g.mul(a, b)?;
                Ok(z)
            }),
            vec![2, 3],
            -1.0,
            1.0,
        ),
        (
            "layer_norm_input",
            Box::new(move |g: &mut G, x: Var| {
                let gamma = g.constant(const_tensor(&[1, 5], 10));
                let beta = g.constant(const_tensor(&[1, 5], 11));
                let y = g.layer_norm(x, gamma, beta)?;
                project(g, y, s)
            }),
            vec![3, 5],
            -2.0,
            2.0,
        ),
        (
            "layer_norm_affine",
            Box::new(move |g: &mut G, x: Var| {
                let inp = g.constant(const_tensor(&[3, 4], 12));
                let y = g.layer_norm(inp, x, x)?;
                project(g, y, s)
            }),
            vec![1, 4],
            -2.0,
            2.0,
        ),
        (
            "dropout",
            Box::new(move |g: &mut G, x: Var| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let y = g.dropout(x, 0.3, true, &mut rng);
                let y = g.mul(y, y)?;
                project(g, y, s)
            }),
            vec![3, 4],
            -1.0,
            1.0,
        ),
    ];
    let mut out = Vec::new();
    for (name, f, shape, lo, hi) in cases {
        let mut worst = PrimitiveCheck {
            name,
            max_rel_error: 0.0,
            worst_trial: 0,
        };
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let point = random(&shape, &mut rng, lo, hi);
            let r = gradient_check(&f, &point, DEFAULT_STEP)?;
            if r.max_rel_error >= worst.max_rel_error {
                worst.max_rel_error = r.max_rel_error;
                worst.worst_trial = trial;
            }
        }
        out.push(worst);
    }
    Ok(out)
}
