//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order; `backward` walks it once in reverse. Every forward op
//! rejects non-finite results.

use crate::tensor::{gelu_derivative_from_tanh, gelu_from_tanh, gelu_tanh, gemm, gemm_nt, gemm_tn, shape_err, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Sub(Var, Var),
    ScalarMul(Var, f64),
    Hadamard(Var, Var),
    Gelu { x: Var, tanh: Vec<f64> },
    SoftmaxRows { x: Var, scale: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<f64>, normed: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    L2Norm { x: Var, eps: f64 },
    AbsCosineRows { a: Var, b: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    min_abs_cosine: Option<f64>,
    backward_fault: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: corrupts the matmul backward rule so gradient checks fail.
    pub fn inject_backward_fault(&mut self, on: bool) {
        self.backward_fault = on;
    }

    /// Smallest |cos| among rows with non-degenerate norms seen by
    /// [`Graph::abs_cosine_rows`]; used to detect proximity to the |.| kink.
    pub fn min_abs_cosine(&self) -> Option<f64> {
        self.min_abs_cosine
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Moves the gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::new(self.shape(v), g).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected rank 2, got {s:?}")),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner extents {k} and {k2}"));
        }
        let c = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], c)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push(t, Op::Transpose(a), &[a], "transpose")
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Hadamard(a, b), "hadamard", |x, y| x * y)
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).len() != n {
            return shape_err("add_row_bias", format!("bias {:?} for width {n}", self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::AddRowBias(x, bias), &[x, bias], "add_row_bias")
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::ScalarMul(a, s), &[a], "scalar_mul")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a).data();
        let tanh: Vec<f64> = src.iter().map(|&x| gelu_tanh(x)).collect();
        let data = src.iter().zip(&tanh).map(|(&x, &t)| gelu_from_tanh(x, t)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Gelu { x: a, tanh }, &[a], "gelu")
    }

    /// Row-wise softmax of `x / scale`, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                detail: format!("scale must be positive, got {scale}"),
            });
        }
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = ((v - max) / scale).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::SoftmaxRows { x, scale }, &[x], "softmax_rows")
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer_norm", format!("gain/bias must have {n} elements"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normed[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return shape_err("concat_cols", format!("row counts {m} and {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Columns `start..end` of an m×n matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return shape_err("slice_cols", format!("range {start}..{end} of width {n}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let t = Tensor::new(&[m, end - start], out)?;
        self.push(t, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    /// Rows `start..end` of an m×n matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return shape_err("slice_rows", format!("range {start}..{end} of {m} rows"));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new(&[end - start, n], out)?;
        self.push(t, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    pub fn sqnorm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SqNorm(x), &[x], "sqnorm")
    }

    /// Euclidean norm; the gradient is zero when the norm is below `eps`.
    pub fn l2norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::L2Norm { x, eps }, &[x], "l2norm")
    }

    /// |cos| between matching rows of two m×w matrices, as an m-vector.
    /// Rows whose norm product is below [`COSINE_EPS`] yield 0; the
    /// subgradient of |.| at 0 is taken as 0.
    pub fn abs_cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "abs_cosine_rows")?;
        let (m, w) = self.dims2(a, "abs_cosine_rows")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m];
        let mut min_seen = self.min_abs_cosine;
        for r in 0..m {
            let (ra, rb) = (&ad[r * w..(r + 1) * w], &bd[r * w..(r + 1) * w]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na * nb < COSINE_EPS {
                continue;
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let c = (dot / (na * nb)).abs();
            out[r] = c;
            min_seen = Some(min_seen.map_or(c, |m: f64| m.min(c)));
        }
        self.min_abs_cosine = min_seen;
        let t = Tensor::new(&[m], out)?;
        self.push(
            t,
            Op::AbsCosineRows {
                a,
                b,
                eps: COSINE_EPS,
            },
            &[a, b],
            "abs_cosine_rows",
        )
    }

    /// Accumulates ∂loss/∂node into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            &Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("rank 2");
                let n = self.value(b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = gemm_nt(g, self.value(b).data(), m, n, k);
                    if self.backward_fault {
                        for v in &mut da {
                            *v *= 1.5;
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = gemm_tn(self.value(a).data(), g, m, k, n);
                    self.accumulate(b, db);
                }
            }
            &Op::Transpose(a) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let gt = Tensor::new(&out_shape, g.to_vec()).expect("shape").transpose().expect("rank 2");
                self.accumulate(a, gt.into_data());
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            &Op::AddRowBias(x, bias) => {
                let n = self.value(bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(x, g.to_vec());
                self.accumulate(bias, db);
            }
            &Op::ScalarMul(a, s) => self.accumulate(a, g.iter().map(|v| v * s).collect()),
            &Op::Hadamard(a, b) => {
                let da = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Gelu { x: a, ref tanh } => {
                let d = g
                    .iter()
                    .zip(self.value(a).data())
                    .zip(tanh)
                    .map(|((gv, &x), &t)| gv * gelu_derivative_from_tanh(x, t))
                    .collect();
                self.accumulate(a, d);
            }
            &Op::SoftmaxRows { x, scale } => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / scale;
                    }
                }
                self.accumulate(x, dx);
            }
            &Op::LayerNorm {
                x,
                gain,
                bias,
                ref inv_std,
                ref normed,
            } => {
                let n = self.value(gain).len();
                let gv = self.value(gain).data().to_vec();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (r, ((gr, xr), dxr)) in g.chunks(n).zip(normed.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xr[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        dxr[j] = inv_std[r] * (dxh - mean_d - xr[j] * mean_dx);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            &Op::ConcatCols(ref parts) => {
                let total = self.nodes[i].value.cols();
                let m = self.nodes[i].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.accumulate(p, d);
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.value(x).dims2().expect("rank 2");
                let w = self.nodes[i].value.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(x, d);
            }
            &Op::SliceRows { x, start } => {
                let (m, n) = self.value(x).dims2().expect("rank 2");
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(x, d);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
            &Op::SqNorm(x) => {
                let d = self.value(x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                self.accumulate(x, d);
            }
            &Op::L2Norm { x, eps } => {
                let norm = self.nodes[i].value.item();
                let d = if norm < eps {
                    vec![0.0; self.value(x).len()]
                } else {
                    self.value(x).data().iter().map(|v| v / norm * g[0]).collect()
                };
                self.accumulate(x, d);
            }
            &Op::AbsCosineRows { a, b, eps } => {
                let (m, w) = self.value(a).dims2().expect("rank 2");
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let mut da = vec![0.0; m * w];
                let mut db = vec![0.0; m * w];
                for r in 0..m {
                    let (ra, rb) = (&ad[r * w..(r + 1) * w], &bd[r * w..(r + 1) * w]);
                    let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na * nb < eps {
                        continue;
                    }
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let c = dot / (na * nb);
                    let sign = if c > 0.0 {
                        1.0
                    } else if c < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let s = sign * g[r];
                    for j in 0..w {
                        da[r * w + j] = s * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[r * w + j] = s * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
        }
        self.nodes[i].op = op;
    }
}
