//! Reverse-mode tape.
//!
//! Every differentiable step builds a fresh [`Tape`]. Tensors enter through
//! [`Tape::leaf`] (constant) or [`Tape::param`] (tracked); each operation
//! appends a node recording its inputs, so parents always precede children
//! and a single reverse sweep in [`Tape::backward`] visits every node once.
//!
//! Persistent gradient accumulators live on the tape: within one backward
//! pass fan-out sums naturally, and calling backward again adds on top, so
//! `zero_grads` (or a new tape) separates steps. [`Val`] handles carry the
//! owning tape's id and are rejected by any other tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow { m: usize, row: usize },
    Matmul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    NormalizeVec { x: usize, clamped: bool },
    MeanRows(usize),
    Sum(usize),
    Dot(usize, usize),
    StackScalars(Vec<usize>),
    ConcatCols(Vec<usize>),
    BceWithLogits { logits: usize, labels: usize },
    Mse(usize, usize),
    FrameSignal { x: usize, width: usize, hop: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    /// Persistent per-node gradient accumulators, filled by `backward`.
    acc: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            acc: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a constant: no gradient is tracked or queryable for it.
    pub fn leaf(&mut self, t: Tensor) -> Val {
        self.push_unchecked(t, false, Op::Leaf)
    }

    /// Binds a tracked tensor whose gradient `backward` will populate.
    pub fn param(&mut self, t: Tensor) -> Val {
        self.push_unchecked(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Val) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    /// Accumulated gradient of the last `backward` calls for a tracked node.
    pub fn grad(&self, v: Val) -> Result<Tensor> {
        self.check(v)?;
        let node = &self.nodes[v.idx];
        if !node.requires_grad {
            return Err(Error::MissingGradient);
        }
        match &self.acc[v.idx] {
            Some(g) => Tensor::from_vec(node.value.shape().to_vec(), g.clone()),
            None => Err(Error::MissingGradient),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.acc.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ---- operations ---------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "add")?, self.operand(b, "add")?);
        same_shape("add", ta, tb)?;
        let data = zip_map(ta, tb, |x, y| x + y);
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Add(a.idx, b.idx), "add")
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "sub")?, self.operand(b, "sub")?);
        same_shape("sub", ta, tb)?;
        let data = zip_map(ta, tb, |x, y| x - y);
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sub(a.idx, b.idx), "sub")
    }

    /// Elementwise (Hadamard) product; also used for dropout masks.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "mul")?, self.operand(b, "mul")?);
        same_shape("mul", ta, tb)?;
        let data = zip_map(ta, tb, |x, y| x * y);
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Mul(a.idx, b.idx), "mul")
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Result<Val> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let ta = self.operand(a, "scale")?;
        let data = ta.data().iter().map(|x| c * x).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a.idx, c), "scale")
    }

    /// Adds a length-N row vector to every row of an M x N matrix.
    pub fn add_row(&mut self, m: Val, row: Val) -> Result<Val> {
        let (tm, tr) = (self.operand(m, "add_row")?, self.operand(row, "add_row")?);
        if tm.rank() != 2 || tr.rank() != 1 || tm.shape()[1] != tr.shape()[0] {
            return Err(Error::shape(
                "add_row",
                "[M, N] plus [N]",
                format!("{:?} plus {:?}", tm.shape(), tr.shape()),
            ));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(tm.data()[r * cols + c] + tr.data()[c]);
            }
        }
        let shape = vec![rows, cols];
        self.push(Tensor { shape, data }, Op::AddRow { m: m.idx, row: row.idx }, "add_row")
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "matmul")?, self.operand(b, "matmul")?);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                "[M, K] times [K, N]",
                format!("{:?} times {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * brow[j];
                }
            }
        }
        self.push(Tensor { shape: vec![m, n], data }, Op::Matmul(a.idx, b.idx), "matmul")
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let ta = self.operand(a, "transpose")?;
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", "rank 2", format!("{:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a.idx), "transpose")
    }

    pub fn tanh(&mut self, a: Val) -> Result<Val> {
        let ta = self.operand(a, "tanh")?;
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Tanh(a.idx), "tanh")
    }

    /// Numerically stable softmax along the last axis of a matrix or vector.
    pub fn softmax_rows(&mut self, a: Val) -> Result<Val> {
        let ta = self.operand(a, "softmax_rows")?;
        if ta.rank() == 0 || ta.cols() == 0 {
            return Err(Error::EmptyInput("softmax_rows"));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / s));
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor { shape, data }, Op::SoftmaxRows(a.idx), "softmax_rows")
    }

    /// Layer normalization along the last axis with affine scale and shift.
    /// `gamma` and `beta` are length-D vectors; variance is the population
    /// variance over the axis.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let tx = self.operand(x, "layer_norm")?;
        let tg = self.operand(gamma, "layer_norm")?;
        let tb = self.operand(beta, "layer_norm")?;
        let d = tx.cols();
        if tx.rank() == 0 || d == 0 {
            return Err(Error::EmptyInput("layer_norm"));
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma and beta of shape [{d}]"),
                format!("{:?} and {:?}", tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                data.push(tg.data()[j] * xh + tb.data()[j]);
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            Tensor { shape, data },
            Op::LayerNorm { x: x.idx, gamma: gamma.idx, beta: beta.idx, eps },
            "layer_norm",
        )
    }

    /// Standardizes a vector to zero mean and unit population standard
    /// deviation, with the deviation clamped below at 1e-8 so near-constant
    /// inputs stay finite. Matches the pipeline's per-clip normalization.
    pub fn normalize_vec(&mut self, x: Val) -> Result<Val> {
        let tx = self.operand(x, "normalize_vec")?;
        if tx.rank() != 1 || tx.numel() == 0 {
            return Err(Error::shape("normalize_vec", "non-empty rank 1", format!("{:?}", tx.shape())));
        }
        let n = tx.numel() as f64;
        let mean = tx.data().iter().sum::<f64>() / n;
        let var = tx.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let clamped = std < 1e-8;
        let s = if clamped { 1e-8 } else { std };
        let data = tx.data().iter().map(|v| (v - mean) / s).collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor { shape, data }, Op::NormalizeVec { x: x.idx, clamped }, "normalize_vec")
    }

    /// Mean over the rows of a T x D matrix, yielding a length-D vector.
    pub fn mean_rows(&mut self, a: Val) -> Result<Val> {
        let ta = self.operand(a, "mean_rows")?;
        if ta.rank() != 2 {
            return Err(Error::shape("mean_rows", "rank 2", format!("{:?}", ta.shape())));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        if rows == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += ta.data()[r * cols + c];
            }
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(Tensor { shape: vec![cols], data }, Op::MeanRows(a.idx), "mean_rows")
    }

    pub fn sum(&mut self, a: Val) -> Result<Val> {
        let ta = self.operand(a, "sum")?;
        let s = ta.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.idx), "sum")
    }

    pub fn dot(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "dot")?, self.operand(b, "dot")?);
        if ta.rank() != 1 || tb.rank() != 1 || ta.numel() != tb.numel() {
            return Err(Error::shape(
                "dot",
                "two equal-length vectors",
                format!("{:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a.idx, b.idx), "dot")
    }

    /// Stacks rank-0 values into a vector, preserving order.
    pub fn stack_scalars(&mut self, vs: &[Val]) -> Result<Val> {
        if vs.is_empty() {
            return Err(Error::EmptyInput("stack_scalars"));
        }
        let mut data = Vec::with_capacity(vs.len());
        for &v in vs {
            let t = self.operand(v, "stack_scalars")?;
            data.push(t.scalar_value()?);
        }
        let ids = vs.iter().map(|v| v.idx).collect();
        self.push(Tensor { shape: vec![data.len()], data }, Op::StackScalars(ids), "stack_scalars")
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, vs: &[Val]) -> Result<Val> {
        if vs.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let rows = self.operand(vs[0], "concat_cols")?.rows();
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            let t = self.operand(v, "concat_cols")?;
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("rank-2 inputs with {rows} rows"),
                    format!("{:?}", t.shape()),
                ));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vs {
                let t = &self.nodes[v.idx].value;
                let w = t.shape()[1];
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let ids = vs.iter().map(|v| v.idx).collect();
        self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(ids), "concat_cols")
    }

    /// Mean binary cross-entropy over a batch of logits. Labels must be
    /// exactly 0 or 1; the loss is computed in the numerically stable
    /// `max(z, 0) - z y + ln(1 + exp(-|z|))` form.
    pub fn bce_with_logits(&mut self, logits: Val, labels: Val) -> Result<Val> {
        let tz = self.operand(logits, "bce_with_logits")?;
        let ty = self.operand(labels, "bce_with_logits")?;
        if tz.rank() != 1 || ty.rank() != 1 || tz.numel() != ty.numel() {
            return Err(Error::shape(
                "bce_with_logits",
                "two equal-length vectors",
                format!("{:?} and {:?}", tz.shape(), ty.shape()),
            ));
        }
        if tz.numel() == 0 {
            return Err(Error::EmptyInput("bce_with_logits"));
        }
        for &y in ty.data() {
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidLabel(y));
            }
        }
        let b = tz.numel() as f64;
        let total: f64 = tz
            .data()
            .iter()
            .zip(ty.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(total / b),
            Op::BceWithLogits { logits: logits.idx, labels: labels.idx },
            "bce_with_logits",
        )
    }

    /// Squared-error loss summed over features and averaged over rows:
    /// for matrices of B rows, `sum((a - b)^2) / B`; vectors count as one row.
    pub fn mse(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.operand(a, "mse")?, self.operand(b, "mse")?);
        same_shape("mse", ta, tb)?;
        if ta.numel() == 0 {
            return Err(Error::EmptyInput("mse"));
        }
        let rows = ta.rows() as f64;
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(total / rows), Op::Mse(a.idx, b.idx), "mse")
    }

    /// Slices a length-L signal into overlapping frames of `width` samples
    /// every `hop` samples, as rows of a T x width matrix with
    /// T = (L - width) / hop + 1. Trailing samples that do not fill a frame
    /// are dropped.
    pub fn frame_signal(&mut self, x: Val, width: usize, hop: usize) -> Result<Val> {
        if width == 0 || hop == 0 {
            return Err(Error::InvalidConfig(format!(
                "frame_signal requires positive width and hop, got {width} and {hop}"
            )));
        }
        let tx = self.operand(x, "frame_signal")?;
        if tx.rank() != 1 {
            return Err(Error::shape("frame_signal", "rank 1", format!("{:?}", tx.shape())));
        }
        let l = tx.numel();
        if l < width {
            return Err(Error::ClipTooShort { len: l, min: width });
        }
        let t = (l - width) / hop + 1;
        let mut data = Vec::with_capacity(t * width);
        for f in 0..t {
            data.extend_from_slice(&tx.data()[f * hop..f * hop + width]);
        }
        self.push(
            Tensor { shape: vec![t, width], data },
            Op::FrameSignal { x: x.idx, width, hop },
            "frame_signal",
        )
    }

    // ---- backward -----------------------------------------------------

    /// Propagates d(loss)/d(node) from a scalar loss to every tracked node,
    /// adding into the persistent accumulators.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        self.check(loss)?;
        let lnode = &self.nodes[loss.idx];
        if !lnode.value.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lnode.value.shape().to_vec() });
        }

        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<f64>>> = (0..n)
            .map(|i| {
                if self.nodes[i].requires_grad {
                    Some(vec![0.0; self.nodes[i].value.numel()])
                } else {
                    None
                }
            })
            .collect();

        if self.nodes[loss.idx].requires_grad {
            scratch[loss.idx].as_mut().unwrap()[0] = 1.0;
            for i in (0..=loss.idx).rev() {
                let Some(g) = scratch[i].take() else { continue };
                self.push_adjoint(i, &g, &mut scratch);
                scratch[i] = Some(g);
            }
        }

        for (i, s) in scratch.into_iter().enumerate() {
            let Some(s) = s else { continue };
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            match &mut self.acc[i] {
                Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v),
                slot => *slot = Some(s),
            }
        }
        Ok(())
    }

    /// Distributes the adjoint `g` of node `i` to the node's parents.
    fn push_adjoint(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        // Parents always precede children on the tape, so `scratch[parent]`
        // never aliases `g` (taken from slot `i`).
        let val = |idx: usize| &self.nodes[idx].value;
        macro_rules! sink {
            ($idx:expr, $apply:expr) => {
                if let Some(dst) = scratch[$idx].as_mut() {
                    #[allow(clippy::redundant_closure_call)]
                    ($apply)(dst);
                }
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink!(*a, |dst: &mut Vec<f64>| add_into(dst, g, 1.0));
                sink!(*b, |dst: &mut Vec<f64>| add_into(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                sink!(*a, |dst: &mut Vec<f64>| add_into(dst, g, 1.0));
                sink!(*b, |dst: &mut Vec<f64>| add_into(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                sink!(*a, |dst: &mut Vec<f64>| {
                    dst.iter_mut()
                        .zip(g.iter().zip(tb.data()))
                        .for_each(|(d, (gv, bv))| *d += gv * bv)
                });
                sink!(*b, |dst: &mut Vec<f64>| {
                    dst.iter_mut()
                        .zip(g.iter().zip(ta.data()))
                        .for_each(|(d, (gv, av))| *d += gv * av)
                });
            }
            Op::Scale(a, c) => {
                sink!(*a, |dst: &mut Vec<f64>| add_into(dst, g, *c));
            }
            Op::AddRow { m, row } => {
                let cols = val(*row).numel();
                sink!(*m, |dst: &mut Vec<f64>| add_into(dst, g, 1.0));
                sink!(*row, |dst: &mut Vec<f64>| {
                    for (k, gv) in g.iter().enumerate() {
                        dst[k % cols] += gv;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G B^T, dB = A^T G
                sink!(*a, |dst: &mut Vec<f64>| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[p * n + j];
                            }
                            dst[i * k + p] += s;
                        }
                    }
                });
                sink!(*b, |dst: &mut Vec<f64>| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                dst[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                sink!(*a, |dst: &mut Vec<f64>| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                sink!(*a, |dst: &mut Vec<f64>| {
                    dst.iter_mut()
                        .zip(g.iter().zip(y.data()))
                        .for_each(|(d, (gv, t))| *d += gv * (1.0 - t * t))
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                sink!(*a, |dst: &mut Vec<f64>| {
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..cols {
                            dst[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (val(*x), val(*gamma));
                let d = tx.cols();
                let rows = tx.rows();
                // Recompute per-row statistics; cheaper than caching for
                // desk-scale shapes.
                let mut stats = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &tx.data()[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                let xhat = |r: usize, j: usize| {
                    let (mean, inv) = stats[r];
                    (tx.data()[r * d + j] - mean) * inv
                };
                sink!(*beta, |dst: &mut Vec<f64>| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j];
                        }
                    }
                });
                sink!(*gamma, |dst: &mut Vec<f64>| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                sink!(*x, |dst: &mut Vec<f64>| {
                    for r in 0..rows {
                        let (_, inv) = stats[r];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * tg.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat(r, j);
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * tg.data()[j];
                            dst[r * d + j] += inv
                                * (dxh - sum_dxh / d as f64 - xhat(r, j) * sum_dxh_xh / d as f64);
                        }
                    }
                });
            }
            Op::NormalizeVec { x, clamped } => {
                let y = &self.nodes[i].value;
                let tx = val(*x);
                let n = tx.numel() as f64;
                let mean = tx.data().iter().sum::<f64>() / n;
                let var = tx.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let s = if *clamped { 1e-8 } else { var.sqrt() };
                sink!(*x, |dst: &mut Vec<f64>| {
                    let gmean = g.iter().sum::<f64>() / n;
                    if *clamped {
                        // Deviation pinned at the floor: it no longer depends
                        // on x, so only the mean subtraction contributes.
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += (gv - gmean) / s;
                        }
                    } else {
                        let gy: f64 =
                            g.iter().zip(y.data()).map(|(gv, yv)| gv * yv).sum::<f64>() / n;
                        for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y.data()) {
                            *d += (gv - gmean - yv * gy) / s;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                sink!(*a, |dst: &mut Vec<f64>| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                sink!(*a, |dst: &mut Vec<f64>| {
                    dst.iter_mut().for_each(|d| *d += g[0])
                });
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                sink!(*a, |dst: &mut Vec<f64>| add_into(dst, tb.data(), g[0]));
                sink!(*b, |dst: &mut Vec<f64>| add_into(dst, ta.data(), g[0]));
            }
            Op::StackScalars(ids) => {
                for (k, &id) in ids.iter().enumerate() {
                    sink!(id, |dst: &mut Vec<f64>| dst[0] += g[k]);
                }
            }
            Op::ConcatCols(ids) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &id in ids {
                    let w = val(id).shape()[1];
                    sink!(id, |dst: &mut Vec<f64>| {
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let (tz, ty) = (val(*logits), val(*labels));
                let b = tz.numel() as f64;
                sink!(*logits, |dst: &mut Vec<f64>| {
                    for (k, (&z, &y)) in tz.data().iter().zip(ty.data()).enumerate() {
                        dst[k] += g[0] * (sigmoid(z) - y) / b;
                    }
                });
                sink!(*labels, |dst: &mut Vec<f64>| {
                    for (k, &z) in tz.data().iter().enumerate() {
                        dst[k] += g[0] * (-z) / b;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let rows = ta.rows() as f64;
                sink!(*a, |dst: &mut Vec<f64>| {
                    for (k, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
                        dst[k] += g[0] * 2.0 * (x - y) / rows;
                    }
                });
                sink!(*b, |dst: &mut Vec<f64>| {
                    for (k, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
                        dst[k] -= g[0] * 2.0 * (x - y) / rows;
                    }
                });
            }
            Op::FrameSignal { x, width, hop } => {
                let t = self.nodes[i].value.shape()[0];
                sink!(*x, |dst: &mut Vec<f64>| {
                    for f in 0..t {
                        for w in 0..*width {
                            dst[f * hop + w] += g[f * width + w];
                        }
                    }
                });
            }
        }
    }

    // ---- plumbing -----------------------------------------------------

    fn check(&self, v: Val) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    fn operand(&self, v: Val, _op: &'static str) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    fn push(&mut self, value: Tensor, op: Op, opname: &'static str) -> Result<Val> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let requires_grad = self.parents_require_grad(&op);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn parents_require_grad(&self, op: &Op) -> bool {
        let rg = |i: usize| self.nodes[i].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::Dot(a, b)
            | Op::Mse(a, b)
            | Op::AddRow { m: a, row: b }
            | Op::BceWithLogits { logits: a, labels: b } => rg(*a) || rg(*b),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::NormalizeVec { x: a, .. }
            | Op::FrameSignal { x: a, .. } => rg(*a),
            Op::LayerNorm { x, gamma, beta, .. } => rg(*x) || rg(*gamma) || rg(*beta),
            Op::StackScalars(ids) | Op::ConcatCols(ids) => ids.iter().any(|&i| rg(i)),
        }
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Val {
        self.nodes.push(Node { value, requires_grad, op });
        self.acc.push(None);
        Val { tape: self.id, idx: self.nodes.len() - 1 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_known_ratio() {
        // exp(ln 2) : exp(0) = 2 : 1, so probabilities are 2/3 and 1/3.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0_f64.ln(), 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).unwrap().data().to_vec();
        approx_eq(out[0], 2.0 / 3.0, 1e-12);
        approx_eq(out[1], 1.0 / 3.0, 1e-12);
        approx_eq(out.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1000.0, 999.0, 998.0]));
        let b = tape.leaf(Tensor::vector(vec![2.0, 1.0, 0.0]));
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        let (da, db) = (
            tape.value(ya).unwrap().data().to_vec(),
            tape.value(yb).unwrap().data().to_vec(),
        );
        for (x, y) in da.iter().zip(&db) {
            approx_eq(*x, *y, 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_points() {
        // Inputs [1, 3]: mean 2, population std 1, so normalized values are
        // -1 and +1 up to the epsilon in the denominator.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 3.0]));
        let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).unwrap().data().to_vec();
        approx_eq(out[0], -1.0, 1e-4);
        approx_eq(out[1], 1.0, 1e-4);
    }

    #[test]
    fn bce_logit_zero_label_one_is_ln_two() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.leaf(Tensor::vector(vec![1.0]));
        let l = tape.bce_with_logits(z, y).unwrap();
        approx_eq(tape.value(l).unwrap().scalar_value().unwrap(), 2.0_f64.ln(), 1e-12);
        approx_eq(tape.value(l).unwrap().scalar_value().unwrap(), 0.693147, 1e-6);
    }

    #[test]
    fn bce_rejects_soft_labels() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.leaf(Tensor::vector(vec![0.5]));
        assert!(matches!(
            tape.bce_with_logits(z, y),
            Err(Error::InvalidLabel(v)) if v == 0.5
        ));
    }

    #[test]
    fn bce_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![800.0, -800.0]));
        let y = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        let l = tape.bce_with_logits(z, y).unwrap();
        let v = tape.value(l).unwrap().scalar_value().unwrap();
        assert!(v.is_finite());
        approx_eq(v, 800.0, 1e-9);
        tape.backward(l).unwrap();
        assert!(tape.grad(z).unwrap().data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn mse_row_averaged() {
        // One row, four features, each differing by 0.5: 4 * 0.25 / 1 = 1.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap());
        let b = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let l = tape.mse(a, b).unwrap();
        approx_eq(tape.value(l).unwrap().scalar_value().unwrap(), 1.0, 1e-12);

        // Two identical rows: per-row sums average to the same value.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 4, vec![0.5; 8]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        let l = tape.mse(a, b).unwrap();
        approx_eq(tape.value(l).unwrap().scalar_value().unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn frame_signal_layout() {
        // L = 10, width 4, hop 3 gives frames starting at 0, 3 and 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector((0..10).map(f64::from).collect()));
        let f = tape.frame_signal(x, 4, 3).unwrap();
        let t = tape.value(f).unwrap();
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(
            t.data(),
            &[0.0, 1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 6.0, 7.0, 8.0, 9.0]
        );
    }

    #[test]
    fn frame_signal_short_clip_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            tape.frame_signal(x, 4, 3),
            Err(Error::ClipTooShort { len: 3, min: 4 })
        ));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x, so dy/dx = 2 exactly.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_adds() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn chain_through_product() {
        // d sum(x * y) / dx = y exactly.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.leaf(Tensor::vector(vec![-1.0, 0.25, 4.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-1.0, 0.25, 4.0]);
    }

    #[test]
    fn leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.grad(x), Err(Error::MissingGradient)));
    }

    #[test]
    fn gradient_before_backward_is_missing() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.grad(x), Err(Error::MissingGradient)));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![3.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn values_from_other_tapes_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.param(Tensor::scalar(1.0));
        let y = t2.param(Tensor::scalar(2.0));
        assert!(matches!(t2.add(x, y), Err(Error::TapeMismatch)));
        assert!(matches!(t1.value(y), Err(Error::TapeMismatch)));
    }

    #[test]
    fn zero_mask_blocks_gradient_exactly() {
        // Multiplying by a 0/scale mask (inverted dropout) must zero the
        // gradient of masked coordinates exactly, not approximately.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0, -4.0, 5.0]));
        let mask = tape.leaf(Tensor::vector(vec![1.25, 0.0, 1.25]));
        let y = tape.mul(x, mask).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.25, 0.0, 1.25]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(
                Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            );
            let b = tape.softmax_rows(a).unwrap();
            let g = tape.leaf(Tensor::vector(vec![1.1, 0.9, 1.0]));
            let be = tape.leaf(Tensor::vector(vec![0.0, 0.1, -0.1]));
            let n = tape.layer_norm(b, g, be, 1e-5).unwrap();
            let m = tape.matmul(n, a).unwrap();
            tape.value(m).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_cols_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0; 2]);
    }

    #[test]
    fn stack_scalars_orders_and_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(3.0));
        let v = tape.stack_scalars(&[a, b]).unwrap();
        assert_eq!(tape.value(v).unwrap().data(), &[2.0, 3.0]);
        let w = tape.leaf(Tensor::vector(vec![10.0, 20.0]));
        let d = tape.dot(v, w).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[20.0]);
    }

    #[test]
    fn normalize_vec_matches_population_statistics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.normalize_vec(x).unwrap();
        let out = tape.value(y).unwrap().data().to_vec();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        approx_eq(mean, 0.0, 1e-12);
        approx_eq(var, 1.0, 1e-12);
    }

    #[test]
    fn normalize_vec_constant_input_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.7; 5]));
        let y = tape.normalize_vec(x).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|v| *v == 0.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|g| g.is_finite()));
    }
}
