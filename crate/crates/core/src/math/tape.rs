//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough of its
//! inputs to replay the adjoint. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and `backward` walks it in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The kinds of differentiable op the tape understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Relu,
    MatMul,
    Linear,
    Conv2d,
    Conv1d,
    Reshape,
    Mean,
    Sum,
    Concat,
    SliceRows,
    Transpose,
    Mse,
    CrossEntropy,
    L2Normalize,
    ScaleShift,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<u64> },
    Add { a: Var, b: Var, bias: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Exp { a: Var },
    Relu { a: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, inp: usize, out: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, batch: usize, out_ch: usize, cols: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, geom: Conv1dGeom, batch: usize, out_ch: usize, cols: Vec<f64> },
    Reshape { a: Var },
    Mean { a: Var },
    Sum { a: Var },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    SliceRows { a: Var, offset: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, cols: usize },
    L2Normalize { a: Var, norms: Vec<f64>, dim: usize },
    ScaleShift { x: Var, scale: Var, shift: Var, rows: usize, len: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Exp { .. } => OpKind::Exp,
            Op::Relu { .. } => OpKind::Relu,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<u64, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds each parameter's gradient into the tensor it was read from.
    /// Tensors that never appeared on the tape are left untouched.
    pub fn accumulate_into<'a, I>(&self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        for t in params {
            if let Some(&v) = self.params.get(&t.id()) {
                if let Some(g) = self.get(v) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn check_finite(op: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, detail: String) -> Error {
    Error::InvalidShape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values but never tracks gradients.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn rg(&self, inputs: &[Var]) -> bool {
        !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, op_name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(op_name, &value)?;
        self.nodes.push(Node { shape, value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(invalid("leaf", format!("shape {shape:?} with {} values", data.len())));
        }
        let rg = requires_grad && !self.no_grad;
        self.push("leaf", shape.to_vec(), data, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Records a parameter; gradients flow back to it through [`Grads::accumulate_into`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad() && !self.no_grad;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            op: Op::Leaf { param: Some(t.id()) },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    /// Elementwise sum. `b` may also be a 1-D bias matching `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bias = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            true
        } else {
            return Err(mismatch("add", &sa, &sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = if bias {
            let f = sb[0];
            va.iter().enumerate().map(|(i, x)| x + vb[i % f]).collect()
        } else {
            va.iter().zip(vb).map(|(x, y)| x + y).collect()
        };
        let rg = self.rg(&[a, b]);
        self.push("add", sa, out, Op::Add { a, b, bias }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("sub", &sa, &sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push("sub", sa, out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("mul", &sa, &sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", sa, out, Op::Mul { a, b }, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, c }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("exp", shape, out, Op::Exp { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, out, Op::Relu { a }, rg)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `x[rows×in] · w[in×out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("linear(bias)", &sw, &sb));
        }
        let (rows, inp, out_dim) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm_nn(rows, inp, out_dim, self.value(x), self.value(w), &mut out);
        let rg = self.rg(&[x, w, b]);
        self.push("linear", vec![rows, out_dim], out, Op::Linear { x, w, b, rows, inp, out: out_dim }, rg)
    }

    /// Batched 2-D convolution: `x[B,C,H,W]`, `w[O,C,K,K]`, `b[O]` → `[B,O,H',W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d(bias)", &sw, &sb));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive".into()));
        }
        let geom = Conv2dGeom { channels: sx[1], height: sx[2], width: sx[3], kernel: sw[2], stride, pad };
        if geom.kernel > geom.height + 2 * pad || geom.kernel > geom.width + 2 * pad {
            return Err(invalid("conv2d", format!("kernel {} exceeds padded input {:?}", geom.kernel, &sx[2..])));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        let (plen, plane) = (geom.patch_len(), geom.out_h() * geom.out_w());
        let rg = self.rg(&[x, w, b]);
        let keep_cols = rg && self.nodes[w.0].requires_grad;
        let mut cols_all = if keep_cols { vec![0.0; batch * plen * plane] } else { Vec::new() };
        let mut scratch = vec![0.0; plen * plane];
        let mut out = vec![0.0; batch * out_ch * plane];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let img = geom.channels * geom.height * geom.width;
        for bi in 0..batch {
            let cols = if keep_cols { &mut cols_all[bi * plen * plane..(bi + 1) * plen * plane] } else { &mut scratch[..] };
            geom.im2col(&xv[bi * img..(bi + 1) * img], cols);
            let o = &mut out[bi * out_ch * plane..(bi + 1) * out_ch * plane];
            for (oc, &bias) in bv.iter().enumerate() {
                o[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v = bias);
            }
            kernels::gemm_nn(out_ch, plen, plane, wv, cols, o);
        }
        let shape = vec![batch, out_ch, geom.out_h(), geom.out_w()];
        self.push("conv2d", shape, out, Op::Conv2d { x, w, b, geom, batch, out_ch, cols: cols_all }, rg)
    }

    /// Batched stride-1 1-D convolution: `x[B,C,L]`, `w[O,C,K]`, `b[O]` → `[B,O,L']`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv1d(bias)", &sw, &sb));
        }
        let geom = Conv1dGeom { channels: sx[1], len: sx[2], kernel: sw[2], pad };
        if geom.kernel > geom.len + 2 * pad {
            return Err(invalid("conv1d", format!("kernel {} exceeds padded length {}", geom.kernel, geom.len + 2 * pad)));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        let (plen, ol) = (geom.patch_len(), geom.out_len());
        let rg = self.rg(&[x, w, b]);
        let keep_cols = rg && self.nodes[w.0].requires_grad;
        let width = batch * ol;
        let mut cols = vec![0.0; plen * width];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        geom.im2col_batch(xv, batch, &mut cols);
        // [O, B·L'] then reordered to [B, O, L']
        let mut flat = vec![0.0; out_ch * width];
        for (oc, &bias) in bv.iter().enumerate() {
            flat[oc * width..(oc + 1) * width].iter_mut().for_each(|v| *v = bias);
        }
        kernels::gemm_nn(out_ch, plen, width, wv, &cols, &mut flat);
        let mut out = vec![0.0; batch * out_ch * ol];
        for oc in 0..out_ch {
            for bi in 0..batch {
                out[(bi * out_ch + oc) * ol..(bi * out_ch + oc + 1) * ol]
                    .copy_from_slice(&flat[oc * width + bi * ol..oc * width + (bi + 1) * ol]);
            }
        }
        let cols_all = if keep_cols { cols } else { Vec::new() };
        self.push("conv1d", vec![batch, out_ch, ol], out, Op::Conv1d { x, w, b, geom, batch, out_ch, cols: cols_all }, rg)
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if numel(sa) != numel(shape) {
            return Err(mismatch("reshape", sa, shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, rg)
    }

    /// `[B, ...] → [B, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(invalid("flatten", "rank-0 input".into()));
        }
        let rest = numel(&sa[1..]);
        self.reshape(a, &[sa[0], rest])
    }

    /// Concatenates rank-2 vars along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs".into()))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat", vec![rows, total], out, Op::Concat { parts: widths, rows }, rg)
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] || len == 0 {
            return Err(invalid("slice_rows", format!("rows {start}..{} of {sa:?}", start + len)));
        }
        let row = numel(&sa[1..]);
        let out = self.value(a)[start * row..(start + len) * row].to_vec();
        let mut shape = sa;
        shape[0] = len;
        let rg = self.rg(&[a]);
        self.push("slice_rows", shape, out, Op::SliceRows { a, offset: start * row }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {sa:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let v = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg)
    }

    // ---- reductions and losses -----------------------------------------

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push("mean", vec![1], vec![m], Op::Mean { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum { a }, rg)
    }

    /// Mean squared error between two same-shaped vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("mse", &sa, &sb));
        }
        let n = numel(&sa).max(1) as f64;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        self.push("mse", vec![1], vec![s], Op::Mse { a, b }, rg)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn log_softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("log_softmax_cross_entropy", &s, &[targets.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(invalid("log_softmax_cross_entropy", format!("target {t} out of {cols} classes")));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &v[i * cols..(i + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[t];
            for (j, p) in probs[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                *p = (row[j] - lse).exp();
            }
        }
        loss /= rows.max(1) as f64;
        let rg = self.rg(&[logits]);
        let probs = if rg { probs } else { Vec::new() };
        self.push(
            "log_softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, cols },
            rg,
        )
    }

    /// Normalises each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let dim = *sa.last().ok_or_else(|| invalid("l2_normalize", "rank-0 input".into()))?;
        let v = self.value(a);
        let rows = v.len() / dim.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * dim..(r + 1) * dim];
            let n = kernels::dot(row, row).sqrt();
            if n < 1e-12 {
                return Err(Error::NonFinite("l2_normalize of a zero row".into()));
            }
            norms.push(n);
            for (o, x) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = x / n;
            }
        }
        let rg = self.rg(&[a]);
        self.push("l2_normalize", sa, out, Op::L2Normalize { a, norms, dim }, rg)
    }

    /// Feature-wise modulation `x·(1+scale) + shift`, where `x` is `[B,C]` or
    /// `[B,C,L]` and `scale`, `shift` are `[B,C]` broadcast along `L`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (ss, st) = (self.shape(scale).to_vec(), self.shape(shift).to_vec());
        if sx.len() < 2 || sx.len() > 3 || ss != sx[..2] || st != sx[..2] {
            return Err(mismatch("scale_shift", &sx, &ss));
        }
        let rows = sx[0] * sx[1];
        let len = if sx.len() == 3 { sx[2] } else { 1 };
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let (g, b) = (1.0 + sv[r], tv[r]);
            for l in 0..len {
                out[r * len + l] = xv[r * len + l] * g + b;
            }
        }
        let rg = self.rg(&[x, scale, shift]);
        self.push("scale_shift", sx, out, Op::ScaleShift { x, scale, shift, rows, len }, rg)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns gradients for every var
    /// that requires them.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_shape = self.shape(root);
        if numel(root_shape) != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = n.op {
                if n.requires_grad {
                    params.insert(id, Var(i));
                }
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { grads, params });
        }
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i} ({:?})", self.nodes[i].op.kind())));
                }
            }
        }
        Ok(Grads { grads, params })
    }

    /// Convenience: backward followed by accumulation into `params`.
    pub fn backward_into<'a, I>(&self, root: Var, params: I) -> Result<Grads>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let grads = self.backward(root)?;
        grads.accumulate_into(params)?;
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b, bias } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *bias {
                        let f = gb.len();
                        for (i, y) in g.iter().enumerate() {
                            gb[i % f] += y;
                        }
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Exp { a } => {
                let out = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
            }
            Op::Relu { a } => {
                let va = self.nodes[a.0].value.clone();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::gemm_nt(*m, *n, *k, g, &vb, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::gemm_tn(*k, *m, *n, &va, g, gb);
                }
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (vx, vw) = (self.nodes[x.0].value.clone(), self.nodes[w.0].value.clone());
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::gemm_nt(*rows, *out, *inp, g, &vw, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::gemm_tn(*inp, *rows, *out, &vx, g, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..*rows {
                        for (j, gbj) in gb.iter_mut().enumerate() {
                            *gbj += g[r * out + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, batch, out_ch, cols } => {
                let plane = geom.out_h() * geom.out_w();
                let plen = geom.patch_len();
                let img = geom.channels * geom.height * geom.width;
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        for (oc, gbo) in gb.iter_mut().enumerate() {
                            let base = (bi * out_ch + oc) * plane;
                            *gbo += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for bi in 0..*batch {
                        let gb = &g[bi * out_ch * plane..(bi + 1) * out_ch * plane];
                        let c = &cols[bi * plen * plane..(bi + 1) * plen * plane];
                        kernels::gemm_nt(*out_ch, plane, plen, gb, c, gw);
                    }
                }
                let vw = self.nodes[w.0].value.clone();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; plen * plane];
                    for bi in 0..*batch {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        let gb = &g[bi * out_ch * plane..(bi + 1) * out_ch * plane];
                        kernels::gemm_tn(plen, *out_ch, plane, &vw, gb, &mut dcols);
                        geom.col2im(&dcols, &mut gx[bi * img..(bi + 1) * img]);
                    }
                }
            }
            Op::Conv1d { x, w, b, geom, batch, out_ch, cols } => {
                let ol = geom.out_len();
                let plen = geom.patch_len();
                let width = batch * ol;
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        for (oc, gbo) in gb.iter_mut().enumerate() {
                            let base = (bi * out_ch + oc) * ol;
                            *gbo += g[base..base + ol].iter().sum::<f64>();
                        }
                    }
                }
                let needs_w = self.nodes[w.0].requires_grad;
                let needs_x = self.nodes[x.0].requires_grad;
                if !needs_w && !needs_x {
                    return;
                }
                // g as [O, B·L']
                let mut gflat = vec![0.0; out_ch * width];
                for oc in 0..*out_ch {
                    for bi in 0..*batch {
                        gflat[oc * width + bi * ol..oc * width + (bi + 1) * ol]
                            .copy_from_slice(&g[(bi * out_ch + oc) * ol..(bi * out_ch + oc + 1) * ol]);
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::gemm_nt(*out_ch, width, plen, &gflat, cols, gw);
                }
                let vw = self.nodes[w.0].value.clone();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; plen * width];
                    kernels::gemm_tn(plen, *out_ch, width, &vw, &gflat, &mut dcols);
                    geom.col2im_batch(&dcols, *batch, gx);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..*rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, offset } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*offset..*offset + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                let s = 2.0 * g[0] / va.len().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += s * (va[i] - vb[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] -= s * (va[i] - vb[i]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, cols } => {
                let s = g[0] / targets.len().max(1) as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..*cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * cols + j] += s * (probs[i * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms, dim } => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        let proj = kernels::dot(yr, gr);
                        for j in 0..*dim {
                            ga[r * dim + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                }
            }
            Op::ScaleShift { x, scale, shift, rows, len } => {
                let (vx, vs) = (self.nodes[x.0].value.clone(), self.nodes[scale.0].value.clone());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..*rows {
                        for l in 0..*len {
                            gx[r * len + l] += g[r * len + l] * (1.0 + vs[r]);
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *scale) {
                    for r in 0..*rows {
                        gs[r] += (0..*len).map(|l| g[r * len + l] * vx[r * len + l]).sum::<f64>();
                    }
                }
                if let Some(gt) = self.slot(grads, *shift) {
                    for r in 0..*rows {
                        gt[r] += g[r * len..(r + 1) * len].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_scalar() {
        let mut t = Tape::new();
        let a = t.constant(&[1, 1], vec![2.0]).unwrap();
        let b = t.constant(&[1, 1], vec![3.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[6.0]);
    }

    #[test]
    fn relu_and_normalize_values() {
        let mut t = Tape::new();
        let a = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        let v = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let n = t.l2_normalize(v).unwrap();
        assert!((t.value(n)[0] - 0.6).abs() < 1e-15 && (t.value(n)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mse_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![3.0], true).unwrap();
        let z = t.constant(&[1], vec![0.0]).unwrap();
        let l = t.mse(x, z).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_sum_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![-1.0, 2.0], true).unwrap();
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(&[1], vec![2.0], true).unwrap();
        let b = t.leaf(&[1], vec![5.0], true).unwrap();
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap(), &[5.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(a), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_propagation_rejected() {
        let mut t = Tape::new();
        let a = t.constant(&[1], vec![1000.0]).unwrap();
        assert!(matches!(t.exp(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut w = Tensor::param("w", &[1], vec![3.0]).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let v = t.param(&w);
            let s = t.mul(v, v).unwrap();
            t.backward_into(s, [&mut w]).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[12.0]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut w = Tensor::param("w", &[1], vec![3.0]).unwrap();
        w.set_requires_grad(false);
        let mut t = Tape::new();
        let v = t.param(&w);
        let x = t.leaf(&[1], vec![2.0], true).unwrap();
        let s = t.mul(v, x).unwrap();
        t.backward_into(s, [&mut w]).unwrap();
        assert!(w.grad().is_none());
    }
}
