//! Recorded reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its output; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into every node
//! that contributed to the loss.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, sigmoid, Tensor};
use super::NnError;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    TileRows(usize),
    Sum(usize),
    Bce { p: usize, targets: Vec<f64>, weights: Vec<f64>, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, NnError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable recorded on another tape");
        &self.nodes[v.idx].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(NnError::shape("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &out)?;
        Ok(self.push(out, Op::MatMulNt(ia, ib)))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let c = ta.cols();
        if tb.len() != c {
            return Err(NnError::shape("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        check_finite("add_bias", &out)?;
        Ok(self.push(out, Op::AddBias(ia, ib)))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), NnError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(NnError::shape(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite(name, &out)?;
        Ok((ia, ib, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|z| sigmoid(*z)).collect())?;
        Ok(self.push(out, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|z| z.tanh()).collect())?;
        Ok(self.push(out, Op::Tanh(ia)))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(NnError::Range { op: "slice_cols", start, len, extent: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols { a: ia, start }))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let (r, c) = (t.rows(), t.cols());
        if start + len > r {
            return Err(NnError::Range { op: "slice_rows", start, len, extent: r });
        }
        let out = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { a: ia, start }))
    }

    /// Side-by-side concatenation; all parts share a row count. Vectors stay
    /// vectors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let idx: Vec<usize> = parts.iter().map(|v| self.idx(*v)).collect::<Result<_, _>>()?;
        let first = &self.nodes[idx[0]].value;
        let rows = first.rows();
        let vector = first.shape().len() == 1;
        for &i in &idx {
            if self.nodes[i].value.rows() != rows {
                return Err(NnError::shape("concat_cols", first, &self.nodes[i].value));
            }
        }
        let total: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let shape = if vector && idx.iter().all(|&i| self.nodes[i].value.shape().len() == 1) {
            vec![total]
        } else {
            vec![rows, total]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatCols(idx)))
    }

    /// Stacks parts vertically; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let idx: Vec<usize> = parts.iter().map(|v| self.idx(*v)).collect::<Result<_, _>>()?;
        let first = &self.nodes[idx[0]].value;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.cols() != cols {
                return Err(NnError::shape("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(idx)))
    }

    /// `times` stacked copies of `a`: row `k * rows + r` is row `r` of `a`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let mut data = Vec::with_capacity(t.len() * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![t.rows() * times, t.cols()], data)?;
        Ok(self.push(out, Op::TileRows(ia)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let ia = self.idx(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::vector(vec![s]), Op::Sum(ia)))
    }

    /// `Σ wᵢ · -(yᵢ ln pᵢ + (1 - yᵢ) ln(1 - pᵢ)) / norm` over the elements of
    /// `p`, with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: Vec<f64>, weights: Vec<f64>, norm: f64) -> Result<Var, NnError> {
        let ip = self.idx(p)?;
        let tp = &self.nodes[ip].value;
        if targets.len() != tp.len() || weights.len() != tp.len() {
            return Err(NnError::BadData { shape: tp.shape().to_vec(), len: targets.len().min(weights.len()) });
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((p, y), w)| w * bce_term(*p, *y))
            .sum();
        let out = Tensor::vector(vec![total / norm]);
        check_finite("bce", &out)?;
        Ok(self.push(out, Op::Bce { p: ip, targets, weights, norm }))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let i = self.idx(loss)?;
        if self.nodes[i].value.len() != 1 {
            return Err(NnError::NotScalar(self.nodes[i].value.shape().to_vec()));
        }
        self.backward_with(loss, Tensor::vector(vec![1.0]))
    }

    /// Reverse pass seeded with `upstream` as the gradient of `output`.
    pub fn backward_with(&self, output: Var, upstream: Tensor) -> Result<Gradients, NnError> {
        let root = self.idx(output)?;
        if upstream.len() != self.nodes[root].value.len() {
            return Err(NnError::shape("backward", &self.nodes[root].value, &upstream));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::new(self.nodes[root].value.shape().to_vec(), upstream.into_data())?);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    gemm_nn(m, n, k, gd, tb.data(), self.acc(&mut grads, *a), 1.0);
                    gemm_tn(n, m, k, gd, ta.data(), self.acc(&mut grads, *b), 1.0);
                }
                Op::AddBias(a, b) => {
                    axpy(self.acc(&mut grads, *a), gd, 1.0);
                    let c = node.value.cols();
                    let db = self.acc(&mut grads, *b);
                    for row in gd.chunks_exact(c) {
                        axpy(db, row, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    axpy(self.acc(&mut grads, *a), gd, 1.0);
                    axpy(self.acc(&mut grads, *b), gd, 1.0);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let tb = self.nodes[b].value.data();
                        let da = self.acc(&mut grads, a);
                        for ((d, g), y) in da.iter_mut().zip(gd).zip(tb) {
                            *d += g * y;
                        }
                    }
                    let ta = self.nodes[a].value.data();
                    let db = self.acc(&mut grads, b);
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(ta) {
                        *d += g * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let da = self.acc(&mut grads, *a);
                    for ((d, g), s) in da.iter_mut().zip(gd).zip(y) {
                        *d += g * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let da = self.acc(&mut grads, *a);
                    for ((d, g), t) in da.iter_mut().zip(gd).zip(y) {
                        *d += g * (1.0 - t * t);
                    }
                }
                Op::SliceCols { a, start } => {
                    let len = node.value.cols();
                    let c = self.nodes[*a].value.cols();
                    let da = self.acc(&mut grads, *a);
                    for (drow, grow) in da.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                        axpy(&mut drow[*start..start + len], grow, 1.0);
                    }
                }
                Op::SliceRows { a, start } => {
                    let c = node.value.cols();
                    let da = self.acc(&mut grads, *a);
                    axpy(&mut da[start * c..start * c + gd.len()], gd, 1.0);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        let dp = self.acc(&mut grads, p);
                        for (drow, grow) in dp.chunks_exact_mut(c).zip(gd.chunks_exact(total)) {
                            axpy(drow, &grow[off..off + c], 1.0);
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        let dp = self.acc(&mut grads, p);
                        axpy(dp, &gd[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::TileRows(a) => {
                    let len = self.nodes[*a].value.len();
                    let da = self.acc(&mut grads, *a);
                    for chunk in gd.chunks_exact(len) {
                        axpy(da, chunk, 1.0);
                    }
                }
                Op::Sum(a) => {
                    let s = gd[0];
                    for d in self.acc(&mut grads, *a).iter_mut() {
                        *d += s;
                    }
                }
                Op::Bce { p, targets, weights, norm } => {
                    let up = gd[0] / norm;
                    let tp = self.nodes[*p].value.data();
                    let dp = self.acc(&mut grads, *p);
                    for (((d, p), y), w) in dp.iter_mut().zip(tp).zip(targets).zip(weights) {
                        *d += up * w * bce_term_grad(*p, *y);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], i: usize) -> &'g mut [f64] {
        grads[i]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()))
            .data_mut()
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Binary cross-entropy of one prediction with the probability clamped.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Derivative of [`bce_term`] in `p`; zero where the clamp is active.
fn bce_term_grad(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, `None` when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx)?.as_ref()
    }

    /// Gradient for `v`, zeros shaped like `like` when it is absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
