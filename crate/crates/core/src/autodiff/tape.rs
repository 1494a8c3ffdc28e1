//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its operands. Nodes can only reference earlier nodes, so the node
//! vector is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Trainable tensors enter the tape through [`Tape::param`], which keys the
//! leaf by the tensor's address so that repeated use inside one step shares
//! a single gradient slot. A tape is meant to live for one forward/backward
//! step and must not outlive mutation of the tensors it has seen.

use std::collections::HashMap;

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus};
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Rows whose absolute sum exceeds the bound by less than this relative
/// margin are left untouched, which makes normalization idempotent.
const LIPSCHITZ_REL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCausal(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    StopGradient,
    LipschitzNormalize {
        w: Var,
        c: Var,
        /// Absolute row sum for rescaled rows, `None` for untouched rows.
        row_sums: Vec<Option<f64>>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// Value taken from elsewhere, gradient routed to the operand unchanged.
    PassThrough(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor registered with [`Tape::param`].
    pub fn of_param(&self, t: &Tensor) -> Option<&[f64]> {
        let key = t as *const Tensor as usize;
        self.params.get(&key).and_then(|v| self.of(*v))
    }

    /// Copies gradients into every registered trainable tensor of `module`.
    /// Parameters that took no part in the step get a zero gradient.
    pub fn store_into(&self, module: &mut dyn crate::nn::Module) {
        module.visit_params_mut("", &mut |_, t| {
            if !t.requires_grad() {
                return;
            }
            let key = t as *const Tensor as usize;
            match self.params.get(&key).and_then(|v| self.grads[v.0].as_ref()) {
                Some(g) => t.set_grad(g),
                None => t.zero_grad(),
            }
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Records a leaf. It requires a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("{} values", data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Records a trainable tensor, reusing the existing leaf if the same
    /// tensor was already registered on this tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.leaf(t);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the natural form for `x · Wᵀ` with `W[out,in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    /// Adds a `[d]` bias across all leading dimensions of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let shape = sx.to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(shape, out, Op::MulScalar(x, s), rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over rows of the squared L2 norm of each row of `x[..., d]`.
    pub fn mean_row_sq_norm(&mut self, x: Var) -> Var {
        let rows = self.value(x).len() / self.shape(x).last().unwrap();
        let sq = self.mul(x, x).expect("same operand");
        let s = self.sum(sq);
        self.scale(s, 1.0 / rows as f64)
    }

    /// Row-wise softmax over `scores[T,T]` with every column after the row
    /// index masked to zero probability.
    pub fn softmax_causal(&mut self, scores: Var) -> Result<Var> {
        let s = self.shape(scores);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape {
                shape: s.to_vec(),
                reason: "causal softmax needs a square matrix".into(),
            });
        }
        let t = s[0];
        let v = self.value(scores);
        let mut out = vec![0.0; t * t];
        for r in 0..t {
            let row = &v[r * t..r * t + r + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..=r {
                let e = (row[c] - max).exp();
                out[r * t + c] = e;
                z += e;
            }
            for c in 0..=r {
                out[r * t + c] /= z;
            }
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(vec![t, t], out, Op::SoftmaxCausal(scores), rg))
    }

    /// Normalizes each row of `x[..., d]` to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layernorm", &sx, self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Identity in the forward pass; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, Op::StopGradient, false)
    }

    /// Rescales each row of `w` so its absolute sum does not exceed
    /// `softplus(c)`. Rows already within the bound, including all-zero rows,
    /// are copied unchanged.
    pub fn lipschitz_normalize(&mut self, w: Var, c: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(Error::Shape {
                shape: sw,
                reason: "weight must be 2-dimensional".into(),
            });
        }
        if self.value(c).len() != 1 {
            return Err(Error::dim("lipschitz_normalize", &sw, self.shape(c)));
        }
        let bound = softplus(self.value(c)[0]);
        let cols = sw[1];
        let mut out = self.value(w).to_vec();
        let mut row_sums = Vec::with_capacity(sw[0]);
        for row in out.chunks_mut(cols) {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > bound * (1.0 + LIPSCHITZ_REL_SLACK) {
                let f = bound / s;
                row.iter_mut().for_each(|v| *v *= f);
                row_sums.push(Some(s));
            } else {
                row_sums.push(None);
            }
        }
        let rg = self.rg(&[w, c]);
        Ok(self.push(sw, out, Op::LipschitzNormalize { w, c, row_sums }, rg))
    }

    /// Embedding lookup: rows of `table[K, D]` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape {
                shape: st,
                reason: "gather_rows needs a 2-d table".into(),
            });
        }
        let (k, d) = (st[0], st[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Input(format!("row index {bad} out of range for {k} rows")));
        }
        if indices.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start+len` of a 2-d value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", &s, &[start, len]));
        }
        let d = s[1];
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, d], out, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start+len` of a 2-d value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let (rows, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let d = self.shape(*first)[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Straight-through estimator: the forward value is exactly `q`, the
    /// backward pass hands the incoming gradient to `x` unchanged and
    /// nothing to `q`.
    pub fn straight_through(&mut self, x: Var, q: Var) -> Result<Var> {
        self.same_shape("straight_through", x, q)?;
        let shape = self.shape(q).to_vec();
        let value = self.value(q).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::PassThrough(x), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every recorded value that requires a gradient and is an ancestor of
    /// `loss` receives one; nothing else does.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Lazily allocated gradient slot for an operand that wants one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = slot!(*a) {
                    // dA = dC · Bᵀ
                    gemm_nt(g, &self.nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    // dB = Aᵀ · dC
                    gemm_tn(&self.nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if let Some(ga) = slot!(*a) {
                    // dA = dC · B
                    gemm_nn(g, &self.nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    // dB = dCᵀ · A
                    gemm_tn(g, &self.nodes[a.0].value, gb, m, n, k);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gb) = slot!(*b) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let bv = &self.nodes[b.0].value;
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = &self.nodes[a.0].value;
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot!(*x) {
                    axpy(*f, g, gx);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.nodes[s.0].value[0];
                if let Some(gx) = slot!(*x) {
                    axpy(sv, g, gx);
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += dot(g, &self.nodes[x.0].value);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot!(*x) {
                    let xv = &self.nodes[x.0].value;
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                if let Some(gx) = slot!(*x) {
                    let xv = &self.nodes[x.0].value;
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * sigmoid(*xi);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let f = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += f);
                }
            }
            Op::SoftmaxCausal(x) => {
                if let Some(gx) = slot!(*x) {
                    let t = node.shape[0];
                    let p = &node.value;
                    for r in 0..t {
                        let pr = &p[r * t..r * t + r + 1];
                        let gr = &g[r * t..r * t + r + 1];
                        let inner = dot(pr, gr);
                        for c in 0..=r {
                            gx[r * t + c] += pr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = &self.nodes[gain.0].value;
                if let Some(gx) = slot!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, hr) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for gr in g.chunks(d) {
                        axpy(1.0, gr, gb);
                    }
                }
            }
            Op::LipschitzNormalize { w, c, row_sums } => {
                let cols = node.shape[1];
                let wv = &self.nodes[w.0].value;
                let cv = self.nodes[c.0].value[0];
                let bound = softplus(cv);
                if let Some(gw) = slot!(*w) {
                    for (r, s) in row_sums.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let wr = &wv[r * cols..(r + 1) * cols];
                        let out = &mut gw[r * cols..(r + 1) * cols];
                        match s {
                            None => axpy(1.0, gr, out),
                            Some(s) => {
                                // ŵ_j = b·w_j / Σ|w|
                                let f = bound / s;
                                let proj = dot(gr, wr) * bound / (s * s);
                                for j in 0..cols {
                                    out[j] += f * gr[j] - proj * sign(wr[j]);
                                }
                            }
                        }
                    }
                }
                if let Some(gc) = slot!(*c) {
                    let dsp = sigmoid(cv);
                    let mut acc = 0.0;
                    for (r, s) in row_sums.iter().enumerate() {
                        if let Some(s) = s {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let wr = &wv[r * cols..(r + 1) * cols];
                            acc += dot(gr, wr) / s;
                        }
                    }
                    gc[0] += dsp * acc;
                }
            }
            Op::GatherRows { table, indices } => {
                if let Some(gt) = slot!(*table) {
                    let d = node.shape[1];
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = slot!(*x) {
                    let d = node.shape[1];
                    axpy(1.0, g, &mut gx[start * d..start * d + g.len()]);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = slot!(*x) {
                    let (rows, len) = (node.shape[0], node.shape[1]);
                    let d = self.nodes[x.0].shape[1];
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut gx[r * d + start..r * d + start + len],
                        );
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = slot!(p) {
                        axpy(1.0, &g[off..off + n], gp);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = slot!(p) {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + off..r * total + off + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) | Op::PassThrough(x) => {
                if let Some(gx) = slot!(*x) {
                    axpy(1.0, g, gx);
                }
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `softplus(x)` outside the tape.
pub fn softplus_value(x: f64) -> f64 {
    kernels::softplus(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![-1.0, 0.0, 2.0]).into_param());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.of(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![-3.0, -0.5]).into_param());
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        assert_eq!(g.of(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_analytic_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.0, 50.0, 1.0]).into_param());
        let y = tape.softplus(x);
        let v = tape.value(y);
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[1] - 50.0).abs() < 1e-12);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!((g.of(x).unwrap()[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut tape = Tape::new();
        let s = tape.leaf(&t(vec![1, 1], vec![3.7]));
        let p = tape.softmax_causal(s).unwrap();
        assert_eq!(tape.value(p), &[1.0]);

        let s = tape.leaf(&t(vec![3, 3], vec![0.5; 9]));
        let p = tape.softmax_causal(s).unwrap();
        let v = tape.value(p);
        for r in 0..3 {
            for c in 0..3 {
                let want = if c <= r { 1.0 / (r + 1) as f64 } else { 0.0 };
                assert!((v[r * 3 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 4], vec![2.5; 4]));
        let g = tape.leaf(&t(vec![4], vec![1.0; 4]));
        let b = tape.leaf(&t(vec![4], vec![0.0; 4]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layernorm_moments_follow_gain_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2, -0.3, 0.9]));
        let g = tape.leaf(&t(vec![4], vec![2.0; 4]));
        let b = tape.leaf(&t(vec![4], vec![0.5; 4]));
        let y = tape.layernorm(x, g, b).unwrap();
        for row in tape.value(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!((mean - 0.5).abs() < 1e-6);
            assert!((var - 4.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).into_param());
        let y = tape.stop_gradient(x);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.of(x).is_none());

        // ‖sg[a] − b‖²
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2], vec![1.0, -1.0]).into_param());
        let b = tape.leaf(&t(vec![2], vec![0.0, 0.5]).into_param());
        let sa = tape.stop_gradient(a);
        let d = tape.sub(sa, b).unwrap();
        let l = tape.mean_row_sq_norm(d);
        let g = tape.backward(l).unwrap();
        assert!(g.of(a).is_none());
        assert!(g.of(b).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_touches_only_trainable_ancestors() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(vec![2], vec![1.0, 2.0]).into_param());
        let unused = tape.leaf(&t(vec![2], vec![1.0, 2.0]).into_param());
        let x = tape.leaf(&t(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(w, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of(w).unwrap(), &[3.0, 4.0]);
        assert!(g.of(unused).is_none());
        assert!(g.of(x).is_none());
    }

    #[test]
    fn param_registration_is_shared() {
        let w = t(vec![2], vec![1.0, 2.0]).into_param();
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of_param(&w).unwrap(), &[2.0, 4.0]);
    }
}
