//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every value is a row-major matrix. Ops append a node holding the forward
//! value plus whatever the backward rule needs; [`Tape::backward`] walks the
//! nodes in reverse. A tape is meant to be rebuilt for each training step.

use std::sync::Arc;

use super::linalg::{gelu, gelu_with_grad, gemm};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, a_t: bool, b_t: bool },
    /// `a · bᵀ` against a shared constant `b` that is not copied onto the tape.
    MatMulSharedNt { a: usize, b: Arc<[f64]>, k: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    ScaleBy { a: usize, s: usize },
    Sqrt(usize),
    /// Keeps the local derivative so backward needs no second `tanh`.
    Gelu { a: usize, slope: Vec<f64> },
    SumAll(usize),
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GraphNorm { x: usize, gain: usize, bias: usize, alpha: usize, xhat: Vec<f64>, mean: Vec<f64>, std: Vec<f64> },
    BlockStandardize { a: usize, centered: Vec<f64>, std: f64, denom: f64 },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterAddRows { a: usize, idx: Vec<usize> },
    SegmentSoftmax { a: usize, seg: Vec<usize> },
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    StraightThrough { g: usize },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    /// Records a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(t.data().to_vec(), r, c, Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant shape");
        self.push(data, rows, cols, Op::Leaf, false)
    }

    /// Records a parameter. Frozen parameters (`requires_grad == false`)
    /// behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = (t.rows(), t.cols());
        self.push(t.data().to_vec(), r, c, Op::Param(id), t.requires_grad())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, true, b, false)
    }

    fn matmul_ex(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), a_t, self.value(b), b_t, &mut out, 0.0);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, m, n, Op::MatMul { a: a.0, b: b.0, a_t, b_t }, ng))
    }

    /// `a · bᵀ` where `b` is an `n×k` constant shared with the caller, e.g. a
    /// frozen tied embedding table. Only `a` receives a gradient.
    pub fn matmul_nt_shared(&mut self, a: Var, b: Arc<[f64]>, n: usize) -> Result<Var> {
        let (m, k) = self.dims(a);
        if n == 0 || b.len() != n * k {
            return Err(Error::Shape {
                op: "matmul_nt_shared",
                lhs: vec![m, k],
                rhs: vec![n, b.len() / n.max(1)],
            });
        }
        // Few rows against a tall table: row dot products beat packing `b`.
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = &av[i * k..(i + 1) * k];
            out.extend(b.chunks_exact(k).map(|bj| dot(ai, bj)));
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, m, n, Op::MatMulSharedNt { a: a.0, b, k }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, da, db));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, r, c, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let rd = self.dims(row);
        if rd != (1, c) {
            return Err(shape_err("add_row", (r, c), rd));
        }
        let bias = self.value(row).to_vec();
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(out, r, c, Op::AddRow { a: a.0, row: row.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cols) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a.0);
        self.push(out, r, cols, Op::Scale { a: a.0, c }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (r, cols) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.ng(a.0);
        self.push(out, r, cols, Op::AddScalar { a: a.0 }, ng)
    }

    /// Multiplies every entry of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("scale_by", self.dims(a), self.dims(s)));
        }
        let k = self.scalar(s);
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a.0) || self.ng(s.0);
        Ok(self.push(out, r, c, Op::ScaleBy { a: a.0, s: s.0 }, ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.sqrt()).collect();
        let ng = self.ng(a.0);
        self.push(out, r, c, Op::Sqrt(a.0), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let ng = self.ng(a.0);
        if !ng {
            let out = self.value(a).iter().map(|&x| gelu(x)).collect();
            return self.push(out, r, c, Op::Gelu { a: a.0, slope: Vec::new() }, false);
        }
        let (out, slope) = self.value(a).iter().map(|&x| gelu_with_grad(x)).unzip();
        self.push(out, r, c, Op::Gelu { a: a.0, slope }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a.0);
        self.push(vec![s], 1, 1, Op::SumAll(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, true)
    }

    fn softmax_masked(&mut self, a: Var, causal: bool) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        let x = self.value(a);
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &x[i * c..i * c + width];
            softmax_into(row, &mut out[i * c..i * c + width]);
        }
        let ng = self.ng(a.0);
        self.push(out, r, c, Op::Softmax { a: a.0 }, ng)
    }

    /// Per-row layer normalization with affine `gain`/`bias` (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            if self.dims(p) != (1, c) {
                return Err(shape_err("layer_norm", (r, c), self.dims(p)));
            }
        }
        let (g, b) = (self.value(gain).to_vec(), self.value(bias).to_vec());
        let xv = self.value(x);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x.0) || self.ng(gain.0) || self.ng(bias.0);
        Ok(self.push(
            out,
            r,
            c,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            ng,
        ))
    }

    /// Per-column normalization over the rows (nodes) of one graph with a
    /// learnable mean scale `alpha`: `gain · (x − alpha·mean) / std + bias`.
    pub fn graph_norm(&mut self, x: Var, gain: Var, bias: Var, alpha: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(shape_err("graph_norm", (r, c), (1, c)));
        }
        for p in [gain, bias, alpha] {
            if self.dims(p) != (1, c) {
                return Err(shape_err("graph_norm", (r, c), self.dims(p)));
            }
        }
        let (g, b, al) = (
            self.value(gain).to_vec(),
            self.value(bias).to_vec(),
            self.value(alpha).to_vec(),
        );
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += xv[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut centered = vec![0.0; r * c];
        let mut std = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let v = xv[i * c + j] - al[j] * mean[j];
                centered[i * c + j] = v;
                std[j] += v * v;
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / r as f64 + eps).sqrt());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = centered[i * c + j] / std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = [x, gain, bias, alpha].iter().any(|v| self.ng(v.0));
        Ok(self.push(
            out,
            r,
            c,
            Op::GraphNorm { x: x.0, gain: gain.0, bias: bias.0, alpha: alpha.0, xhat, mean, std },
            ng,
        ))
    }

    /// Standardizes all entries jointly: `(x − mean) / (std + eps)`.
    /// Returns the node and the pre-normalization standard deviation.
    pub fn block_standardize(&mut self, a: Var, eps: f64) -> (Var, f64) {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let std = (centered.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let denom = std + eps;
        let out = centered.iter().map(|v| v / denom).collect();
        let ng = self.ng(a.0);
        let v = self.push(out, r, c, Op::BlockStandardize { a: a.0, centered, std, denom }, ng);
        (v, std)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", (r, c), (bad, c)));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, idx.len(), c, Op::GatherRows { a: a.0, idx: idx.to_vec() }, ng))
    }

    /// `out[idx[r]] += a[r]`, producing `out_rows` rows. Rows are summed in
    /// the order they appear in `a`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&i| i >= out_rows) {
            return Err(shape_err("scatter_add_rows", (r, c), (out_rows, idx.len())));
        }
        let x = self.value(a);
        let mut out = vec![0.0; out_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += x[src * c + j];
            }
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, out_rows, c, Op::ScatterAddRows { a: a.0, idx: idx.to_vec() }, ng))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if seg.len() != r {
            return Err(shape_err("segment_softmax", (r, c), (seg.len(), 1)));
        }
        let x = self.value(a);
        let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let m = &mut max[s * c + j];
                *m = m.max(x[i * c + j]);
            }
        }
        let mut out = vec![0.0; r * c];
        let mut denom = vec![0.0; n_seg * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let e = (x[i * c + j] - max[s * c + j]).exp();
                out[i * c + j] = e;
                denom[s * c + j] += e;
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] /= denom[s * c + j];
            }
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, r, c, Op::SegmentSoftmax { a: a.0, seg: seg.to_vec() }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + width > c {
            return Err(shape_err("slice_cols", (r, c), (start, width)));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + width]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, r, width, Op::SliceCols { a: a.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |p| self.dims(*p).0);
        if let Some(p) = parts.iter().find(|p| self.dims(**p).0 != r) {
            return Err(shape_err("concat_cols", (r, 0), self.dims(*p)));
        }
        let c: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for p in parts {
            let pc = self.dims(*p).1;
            let v = self.value(*p);
            for i in 0..r {
                out[i * c + off..i * c + off + pc].copy_from_slice(&v[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, r, c, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |p| self.dims(*p).1);
        if let Some(p) = parts.iter().find(|p| self.dims(**p).1 != c) {
            return Err(shape_err("concat_rows", (0, c), self.dims(*p)));
        }
        let mut out = Vec::new();
        let mut r = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p));
            r += self.dims(*p).0;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, r, c, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || r == 0 {
            return Err(shape_err("cross_entropy", (r, c), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", (r, c), (1, bad)));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        loss /= r as f64;
        let ng = self.ng(logits.0);
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Emits `tokens` (`q×d`) as a node whose gradient reaches `g` (`1×d`)
    /// through an identity Jacobian per row: `∂L/∂g = Σ_t ∂L/∂tokens[t]`.
    pub fn straight_through(&mut self, g: Var, tokens: &Tensor) -> Result<Var> {
        let (_, d) = self.dims(g);
        if self.dims(g).0 != 1 || tokens.cols() != d {
            return Err(shape_err("straight_through", self.dims(g), (tokens.rows(), tokens.cols())));
        }
        let ng = self.ng(g.0);
        Ok(self.push(tokens.data().to_vec(), tokens.rows(), d, Op::StraightThrough { g: g.0 }, ng))
    }

    /// Backpropagates from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar");
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Accumulates parameter gradients from `grads` into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_deref()) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, n) = (r, c);
                let k = if a_t { self.nodes[a].rows } else { self.nodes[a].cols };
                if self.ng(a) {
                    let buf = grad_buf(grads, a, av.len());
                    match a_t {
                        // dA = dC · op(B)ᵀ
                        false => gemm(m, n, k, g, false, bv, !b_t, buf, 1.0),
                        // A stored k×m: dA = op(B) · dCᵀ
                        true => gemm(k, n, m, bv, b_t, g, true, buf, 1.0),
                    }
                }
                if self.ng(b) {
                    let buf = grad_buf(grads, b, bv.len());
                    match b_t {
                        // dB = op(A)ᵀ · dC
                        false => gemm(k, m, n, av, !a_t, g, false, buf, 1.0),
                        // B stored n×k: dB = dCᵀ · op(A)
                        true => gemm(n, m, k, g, true, av, a_t, buf, 1.0),
                    }
                }
            }
            Op::MatMulSharedNt { a, b, k } => {
                let (a, k) = (*a, *k);
                if self.ng(a) {
                    let buf = grad_buf(grads, a, r * k);
                    for (gi, di) in g.chunks_exact(c).zip(buf.chunks_exact_mut(k)) {
                        for (&gij, bj) in gi.iter().zip(b.chunks_exact(k)) {
                            axpy(di, gij, bj);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |buf| axpy(buf, 1.0, g));
                self.acc(grads, b, |buf| axpy(buf, 1.0, g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |buf| axpy(buf, 1.0, g));
                self.acc(grads, b, |buf| axpy(buf, -1.0, g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc(grads, a, |buf| {
                    buf.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (gg, y))| *o += gg * y)
                });
                self.acc(grads, b, |buf| {
                    buf.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (gg, x))| *o += gg * x)
                });
            }
            &Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc(grads, a, |buf| {
                    buf.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (gg, y))| *o += gg / y)
                });
                self.acc(grads, b, |buf| {
                    for k in 0..buf.len() {
                        buf[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            &Op::AddRow { a, row } => {
                self.acc(grads, a, |buf| axpy(buf, 1.0, g));
                self.acc(grads, row, |buf| {
                    for chunk in g.chunks(c.max(1)) {
                        axpy(buf, 1.0, chunk);
                    }
                });
            }
            &Op::Scale { a, c: k } => self.acc(grads, a, |buf| axpy(buf, k, g)),
            &Op::AddScalar { a } => self.acc(grads, a, |buf| axpy(buf, 1.0, g)),
            &Op::ScaleBy { a, s } => {
                let k = self.nodes[s].value[0];
                let av = &self.nodes[a].value;
                self.acc(grads, a, |buf| axpy(buf, k, g));
                self.acc(grads, s, |buf| buf[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>());
            }
            &Op::Sqrt(a) => {
                let y = &node.value;
                self.acc(grads, a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] / (2.0 * y[k]);
                    }
                });
            }
            Op::Gelu { a, slope } => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut().zip(g.iter().zip(slope)).for_each(|(o, (gg, s))| *o += gg * s)
                });
            }
            &Op::SumAll(a) => self.acc(grads, a, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            &Op::Softmax { a } => {
                let y = &node.value;
                self.acc(grads, a, |buf| {
                    for row in 0..r {
                        let (ys, gs) = (&y[row * c..(row + 1) * c], &g[row * c..(row + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[row * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gamma = &self.nodes[*gain].value;
                self.acc(grads, *gain, |buf| {
                    for k in 0..r * c {
                        buf[k % c] += g[k] * xhat[k];
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for k in 0..r * c {
                        buf[k % c] += g[k];
                    }
                });
                self.acc(grads, *x, |buf| {
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let off = row * c;
                        for j in 0..c {
                            dxhat[j] = g[off + j] * gamma[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = (0..c).map(|j| dxhat[j] * xhat[off + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[off + j] += inv_std[row] * (dxhat[j] - m1 - xhat[off + j] * m2);
                        }
                    }
                });
            }
            Op::GraphNorm { x, gain, bias, alpha, xhat, mean, std } => {
                let gamma = &self.nodes[*gain].value;
                let al = &self.nodes[*alpha].value;
                self.acc(grads, *gain, |buf| {
                    for k in 0..r * c {
                        buf[k % c] += g[k] * xhat[k];
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for k in 0..r * c {
                        buf[k % c] += g[k];
                    }
                });
                if self.ng(*x) || self.ng(*alpha) {
                    // dc = (dxhat − xhat·mean(dxhat·xhat)) / std, per column.
                    let mut dc = vec![0.0; r * c];
                    for j in 0..c {
                        let mut m2 = 0.0;
                        for row in 0..r {
                            m2 += g[row * c + j] * gamma[j] * xhat[row * c + j];
                        }
                        m2 /= r as f64;
                        for row in 0..r {
                            let k = row * c + j;
                            dc[k] = (g[k] * gamma[j] - xhat[k] * m2) / std[j];
                        }
                    }
                    let mut col_sum = vec![0.0; c];
                    for k in 0..r * c {
                        col_sum[k % c] += dc[k];
                    }
                    self.acc(grads, *x, |buf| {
                        for k in 0..r * c {
                            let j = k % c;
                            buf[k] += dc[k] - al[j] * col_sum[j] / r as f64;
                        }
                    });
                    self.acc(grads, *alpha, |buf| {
                        for j in 0..c {
                            buf[j] -= mean[j] * col_sum[j];
                        }
                    });
                }
            }
            Op::BlockStandardize { a, centered, std, denom } => {
                let n = centered.len().max(1) as f64;
                self.acc(grads, *a, |buf| {
                    let gu: f64 = g.iter().zip(centered).map(|(x, y)| x * y).sum();
                    let mut du: Vec<f64> = g.iter().map(|x| x / denom).collect();
                    if *std > 0.0 {
                        let k = gu / (denom * denom * n * std);
                        du.iter_mut().zip(centered).for_each(|(d, u)| *d -= k * u);
                    }
                    let m = du.iter().sum::<f64>() / n;
                    buf.iter_mut().zip(&du).for_each(|(o, d)| *o += d - m);
                });
            }
            Op::GatherRows { a, idx } => {
                self.acc(grads, *a, |buf| {
                    for (row, &src) in idx.iter().enumerate() {
                        axpy(&mut buf[src * c..(src + 1) * c], 1.0, &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::ScatterAddRows { a, idx } => {
                self.acc(grads, *a, |buf| {
                    for (row, &dst) in idx.iter().enumerate() {
                        axpy(&mut buf[row * c..(row + 1) * c], 1.0, &g[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::SegmentSoftmax { a, seg } => {
                let y = &node.value;
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; n_seg * c];
                for (row, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dots[s * c + j] += g[row * c + j] * y[row * c + j];
                    }
                }
                self.acc(grads, *a, |buf| {
                    for (row, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            let k = row * c + j;
                            buf[k] += y[k] * (g[k] - dots[s * c + j]);
                        }
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                let ac = self.nodes[a].cols;
                self.acc(grads, a, |buf| {
                    for row in 0..r {
                        axpy(&mut buf[row * ac + start..row * ac + start + c], 1.0, &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    self.acc(grads, p, |buf| {
                        for row in 0..r {
                            axpy(&mut buf[row * pc..(row + 1) * pc], 1.0, &g[row * c + off..row * c + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(grads, p, |buf| axpy(buf, 1.0, &g[off..off + len]));
                    off += len;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (lr, lc) = (self.nodes[*logits].rows, self.nodes[*logits].cols);
                let k = g[0] / lr as f64;
                self.acc(grads, *logits, |buf| {
                    for row in 0..lr {
                        for j in 0..lc {
                            buf[row * lc + j] += k * probs[row * lc + j];
                        }
                        buf[row * lc + targets[row]] -= k;
                    }
                });
            }
            &Op::StraightThrough { g: src } => {
                self.acc(grads, src, |buf| {
                    for chunk in g.chunks(c.max(1)) {
                        axpy(buf, 1.0, chunk);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if self.ng(idx) {
            let len = self.nodes[idx].value.len();
            f(grad_buf(grads, idx, len));
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(o, v)| *o += a * v);
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}
