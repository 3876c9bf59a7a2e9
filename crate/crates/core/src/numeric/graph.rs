//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every primitive in construction order. [`Graph::backward`]
//! replays the record in reverse, adding each node's contribution into the
//! gradients of its inputs, so a value consumed twice receives the sum of both
//! contributions.

use rand::Rng;

use super::tensor::{Real, Tensor};
use super::NumericError;

/// Floor applied to arguments of `log`.
pub const LOG_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    Log { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d(Box<ConvCache<T>>),
    MaxOverTime { a: Var, argmax: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    LayerNorm(Box<NormCache<T>>),
    Dropout { a: Var, mask: Vec<T> },
}

#[derive(Debug)]
struct ConvCache<T> {
    input: Var,
    weight: Var,
    bias: Var,
    kernel: usize,
    dilation: usize,
    pad_left: usize,
    cols: Vec<T>,
}

#[derive(Debug)]
struct NormCache<T> {
    a: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record plus values; gradients are filled by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shape_err(op: &'static str, detail: String) -> NumericError {
    NumericError::shape(op, detail)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericError> {
        self.nodes[v.0].value.dims2(op)
    }

    /// A differentiable input (parameter or point being checked).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, b_t: false }, rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, b_t: true }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    /// Broadcast-add a `[1, n]` row to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "add_row")?;
        let (br, bn) = self.dims(bias, "add_row")?;
        if br != 1 || bn != n {
            return Err(shape_err("add_row", format!("[{m},{n}] + [{br},{bn}]")));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * s).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale { a, s }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::from_f64_lossy(LOG_FLOOR);
        self.unary(a, move |x| x.max(floor).ln(), Op::Log { a })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::Softmax { a }, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "log_softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let lse = row.iter().fold(T::zero(), |acc, &x| acc + (x - mx).exp()).ln() + mx;
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::LogSoftmax { a }, rg))
    }

    /// Gather rows of `table: [V, E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let (v, e) = self.dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table of {v} rows")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&t[i * e..(i + 1) * e]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), e, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Same-padded 1-D convolution over time.
    ///
    /// `input: [T, Cin]`, `weight: [kernel * Cin, Cout]` (row `k * Cin + c` is
    /// the tap at offset `k * dilation`), `bias: [1, Cout]`. Output `[T, Cout]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        dilation: usize,
    ) -> Result<Var, NumericError> {
        let (t, cin) = self.dims(input, "conv1d")?;
        let (wr, cout) = self.dims(weight, "conv1d")?;
        let (br, bc) = self.dims(bias, "conv1d")?;
        if kernel == 0 || dilation == 0 {
            return Err(shape_err("conv1d", "kernel and dilation must be positive".into()));
        }
        if wr != kernel * cin || br != 1 || bc != cout {
            return Err(shape_err(
                "conv1d",
                format!("input [{t},{cin}], kernel {kernel}, weight [{wr},{cout}], bias [{br},{bc}]"),
            ));
        }
        let pad_left = (kernel - 1) * dilation / 2;
        let width = kernel * cin;
        let mut cols = vec![T::zero(); t * width];
        {
            let x = self.value(input).data();
            for step in 0..t {
                for k in 0..kernel {
                    let src = step as isize + (k * dilation) as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < t {
                        let s = src as usize;
                        cols[step * width + k * cin..step * width + (k + 1) * cin]
                            .copy_from_slice(&x[s * cin..(s + 1) * cin]);
                    }
                }
            }
        }
        let mut out = vec![T::zero(); t * cout];
        T::gemm(t, width, cout, &cols, false, self.value(weight).data(), false, &mut out, false);
        let b = self.value(bias).data();
        for row in out.chunks_mut(cout.max(1)) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::matrix(t, cout, out)?,
            Op::Conv1d(Box::new(ConvCache {
                input,
                weight,
                bias,
                kernel,
                dilation,
                pad_left,
                cols,
            })),
            rg,
        ))
    }

    /// Column-wise max over rows: `[T, C] -> [1, C]`. Ties resolve to the earliest row.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var, NumericError> {
        let (t, c) = self.dims(a, "max_over_time")?;
        if t == 0 {
            return Err(shape_err("max_over_time", "empty sequence".into()));
        }
        let x = self.value(a).data();
        let mut best = x[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for step in 1..t {
            for j in 0..c {
                let v = x[step * c + j];
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = step;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(best), Op::MaxOverTime { a, argmax }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let (_, n) = self.dims(first, "concat_rows")?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", format!("column counts {n} vs {c}")));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {n} columns", start + len)));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols { a, start }, rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err("select_rows", format!("row {bad} of {m}")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(rows.len(), n, data)?,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let n = T::from_usize(v.len()).expect("count");
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta: [1, n]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a, "layer_norm")?;
        for p in [gamma, beta] {
            let (r, c) = self.dims(p, "layer_norm")?;
            if r != 1 || c != n {
                return Err(shape_err("layer_norm", format!("affine [{r},{c}] for width {n}")));
            }
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nn = T::from_usize(n).expect("width");
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().fold(T::zero(), |acc, &v| acc + v) / nn;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / nn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm(Box::new(NormCache {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            })),
            rg,
        ))
    }

    /// Inverted dropout. In eval mode (`training == false`) or with `rate == 0`
    /// this is the identity and returns `a` itself.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Var {
        if !training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let data = zip_map(self.value(a).data(), &mask, |x, m| x * m);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Dropout { a, mask }, rg)
    }

    /// Accumulate gradients of the scalar `root` into every node that requires them.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = self.value(*a).dims2("matmul").expect("2-D");
                let n = node.value.cols();
                if self.rg(*a) {
                    let ga = acc_slot(grads, *a, m * k);
                    // dA = dY · Bᵀ
                    T::gemm(m, n, k, dy, false, self.value(*b).data(), !*b_t, ga, true);
                }
                if self.rg(*b) {
                    let gb = acc_slot(grads, *b, k * n);
                    if *b_t {
                        // stored [n, k]: dBᵀ = dYᵀ · A
                        T::gemm(n, m, k, dy, true, self.value(*a).data(), false, gb, true);
                    } else {
                        T::gemm(k, m, n, self.value(*a).data(), true, dy, false, gb, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(acc_slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.rg(*a) {
                    add_into(acc_slot(grads, *a, dy.len()), dy);
                }
                if self.rg(*bias) {
                    let n = node.value.cols();
                    let gb = acc_slot(grads, *bias, n);
                    for row in dy.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let other = self.value(*b).data();
                    let g = acc_slot(grads, *a, dy.len());
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.value(*a).data();
                    let g = acc_slot(grads, *b, dy.len());
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(other) {
                        *gi += d * o;
                    }
                }
            }
            Op::Scale { a, s } => {
                let g = acc_slot(grads, *a, dy.len());
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += d * *s;
                }
            }
            Op::Sigmoid { a } => {
                let g = acc_slot(grads, *a, dy.len());
                for ((gi, &d), &yy) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * yy * (T::one() - yy);
                }
            }
            Op::Tanh { a } => {
                let g = acc_slot(grads, *a, dy.len());
                for ((gi, &d), &yy) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * (T::one() - yy * yy);
                }
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let g = acc_slot(grads, *a, dy.len());
                for ((gi, &d), &xx) in g.iter_mut().zip(dy).zip(x) {
                    if xx > T::zero() {
                        *gi += d;
                    }
                }
            }
            Op::Log { a } => {
                let floor = T::from_f64_lossy(LOG_FLOOR);
                let x = self.value(*a).data();
                let g = acc_slot(grads, *a, dy.len());
                for ((gi, &d), &xx) in g.iter_mut().zip(dy).zip(x) {
                    if xx > floor {
                        *gi += d / xx;
                    }
                }
            }
            Op::Softmax { a } => {
                let n = node.value.cols().max(1);
                let g = acc_slot(grads, *a, dy.len());
                for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let dot = drow.iter().zip(yrow).fold(T::zero(), |acc, (&d, &yy)| acc + d * yy);
                    for ((gi, &d), &yy) in grow.iter_mut().zip(drow).zip(yrow) {
                        *gi += yy * (d - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let n = node.value.cols().max(1);
                let g = acc_slot(grads, *a, dy.len());
                for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let total = drow.iter().fold(T::zero(), |acc, &d| acc + d);
                    for ((gi, &d), &ly) in grow.iter_mut().zip(drow).zip(yrow) {
                        *gi += d - ly.exp() * total;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, e) = self.value(*table).dims2("embedding").expect("2-D");
                let g = acc_slot(grads, *table, v * e);
                for (row, &i) in dy.chunks(e.max(1)).zip(ids) {
                    add_into(&mut g[i * e..(i + 1) * e], row);
                }
            }
            Op::Conv1d(c) => {
                let (t, cin) = self.value(c.input).dims2("conv1d").expect("2-D");
                let cout = node.value.cols();
                let width = c.kernel * cin;
                if self.rg(c.weight) {
                    let gw = acc_slot(grads, c.weight, width * cout);
                    T::gemm(width, t, cout, &c.cols, true, dy, false, gw, true);
                }
                if self.rg(c.bias) {
                    let gb = acc_slot(grads, c.bias, cout);
                    for row in dy.chunks(cout.max(1)) {
                        add_into(gb, row);
                    }
                }
                if self.rg(c.input) {
                    let mut dcols = vec![T::zero(); t * width];
                    T::gemm(t, cout, width, dy, false, self.value(c.weight).data(), true, &mut dcols, false);
                    let gx = acc_slot(grads, c.input, t * cin);
                    for step in 0..t {
                        for k in 0..c.kernel {
                            let src = step as isize + (k * c.dilation) as isize - c.pad_left as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                add_into(
                                    &mut gx[s * cin..(s + 1) * cin],
                                    &dcols[step * width + k * cin..step * width + (k + 1) * cin],
                                );
                            }
                        }
                    }
                }
            }
            Op::MaxOverTime { a, argmax } => {
                let len = self.value(*a).len();
                let c = argmax.len();
                let g = acc_slot(grads, *a, len);
                for (j, &step) in argmax.iter().enumerate() {
                    g[step * c + j] += dy[j];
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let g = acc_slot(grads, p, m * w);
                        for i in 0..m {
                            add_into(&mut g[i * w..(i + 1) * w], &dy[i * n + offset..i * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        add_into(acc_slot(grads, p, len), &dy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.value(*a).dims2("slice_cols").expect("2-D");
                let w = node.value.cols();
                let g = acc_slot(grads, *a, m * n);
                for i in 0..m {
                    add_into(&mut g[i * n + start..i * n + start + w], &dy[i * w..(i + 1) * w]);
                }
            }
            Op::SelectRows { a, rows } => {
                let (m, n) = self.value(*a).dims2("select_rows").expect("2-D");
                let g = acc_slot(grads, *a, m * n);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut g[r * n..(r + 1) * n], &dy[k * n..(k + 1) * n]);
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                let g = acc_slot(grads, *a, len);
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let d = dy[0] / T::from_usize(len).expect("count");
                let g = acc_slot(grads, *a, len);
                for gi in g.iter_mut() {
                    *gi += d;
                }
            }
            Op::LayerNorm(c) => {
                let (m, n) = self.value(c.a).dims2("layer_norm").expect("2-D");
                let gamma = self.value(c.gamma).data();
                if self.rg(c.gamma) {
                    let gg = acc_slot(grads, c.gamma, n);
                    for (drow, hrow) in dy.chunks(n).zip(c.xhat.chunks(n)) {
                        for ((gi, &d), &h) in gg.iter_mut().zip(drow).zip(hrow) {
                            *gi += d * h;
                        }
                    }
                }
                if self.rg(c.beta) {
                    let gb = acc_slot(grads, c.beta, n);
                    for drow in dy.chunks(n) {
                        add_into(gb, drow);
                    }
                }
                if self.rg(c.a) {
                    let nn = T::from_usize(n).expect("width");
                    let gx = acc_slot(grads, c.a, m * n);
                    let mut dh = vec![T::zero(); n];
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        let hrow = &c.xhat[i * n..(i + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            dh[j] = drow[j] * gamma[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh = mean_dh / nn;
                        mean_dh_h = mean_dh_h / nn;
                        for j in 0..n {
                            gx[i * n + j] += c.rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let g = acc_slot(grads, *a, dy.len());
                for ((gi, &d), &mk) in g.iter_mut().zip(dy).zip(mask) {
                    *gi += d * mk;
                }
            }
        }
    }
}

fn acc_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
