//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass and records the
//! op that produced it. [`Tape::backward`] sweeps the record once in reverse,
//! accumulating gradients into every `requires_grad` variable. Tensors are
//! immutable once produced by an op; a tape is single-threaded, but multiple
//! independent tapes may run on different threads.

use crate::error::{Error, Result};

/// Additive masking sentinel used in place of −inf before softmax; keeps
/// exp() finite while driving masked weights to exactly zero.
pub const NEG_SENTINEL: f64 = -1e9;

/// Index passed to [`Tape::gather_scalars`] meaning "emit 0.0, touch nothing".
pub const GATHER_ZERO: usize = usize::MAX;

/// Dense row-major f64 tensor. Scalars use shape `[1]`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the data length and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} does not describe {} values", shape, data.len()),
            });
        }
        ensure_finite("tensor", &data)?;
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(v: &[f64]) -> Result<Self> {
        Tensor::new(vec![v.len()], v.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    /// Mark this tensor as a differentiation leaf (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the raw values (optimizer steps, checkpoint loads).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; present only after a backward pass reached this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor. Panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) view: 1-D tensors are a single row, scalars are 1×1.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rows_cols on rank-{} tensor", self.shape.len()),
        }
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise activation kinds. GeLU is the exact Gaussian CDF form
/// `h·Φ(h)` computed via the error function; no tanh approximation is offered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    Gelu,
    /// `h ⊙ Sigmoid(c·h)` with the given `c`.
    Swish(f64),
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// `a · bᵀ` without materializing the transpose.
    MatmulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Matrix plus a row vector broadcast over every row.
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    /// The constant shifts values only; the gradient passes through
    /// unchanged, so backward never reads it.
    AddConst { a: Var },
    MinConst { a: Var, c: f64 },
    Clamp { a: Var, lo: f64, hi: f64 },
    MinPair { a: Var, b: Var },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<u8> },
    TokenLogProbs { logits: Var, targets: Vec<usize> },
    LayerNorm { h: Var, gain: Var, bias: Var, eps: f64 },
    RmsNorm { h: Var, gain: Var, bias: Var, eps: f64 },
    Act { a: Var, kind: ActKind },
    LogSigmoid { a: Var },
    Exp { a: Var },
    Sum { a: Var },
    LogSumExp { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Slice { a: Var, start: usize, len: usize },
    Embed { table: Var, ids: Vec<usize> },
    GatherScalars { src: Var, idx: Vec<usize> },
    Rope { a: Var, positions: Vec<f64>, thetas: Vec<f64> },
    MulConstVec { a: Var, w: Vec<f64> },
}

/// Ordered record of executed ops and the tensors they produced. Construction
/// order is the topological order; backward replays it once, in reverse.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.vals.push(t);
        self.ops.push(Op::Leaf);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient of `v` after backward, if it was reached and required grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.vals[v.0].grad()
    }

    fn push(&mut self, op: Op, opname: &'static str, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> Result<Var> {
        ensure_finite(opname, &data)?;
        self.vals.push(Tensor { shape, data, requires_grad: rg, grad: None });
        self.ops.push(op);
        Ok(Var(self.vals.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.vals[v.0].requires_grad
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.vals[a.0].rows_cols();
        let (k2, n) = self.vals[b.0].rows_cols();
        if k != k2 {
            return Err(Self::shape_err("matmul", format!("inner extents {k} vs {k2}")));
        }
        let (da, db) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..k {
                let av = da[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[t * n..(t + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul { a, b }, "matmul", vec![m, n], out, rg)
    }

    /// `a · bᵀ`: a is m×k, b is n×k, output m×n.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.vals[a.0].rows_cols();
        let (n, k2) = self.vals[b.0].rows_cols();
        if k != k2 {
            return Err(Self::shape_err("matmul_tb", format!("inner extents {k} vs {k2}")));
        }
        let (da, db) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatmulTb { a, b }, "matmul_tb", vec![m, n], out, rg)
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Self::shape_err(
                op,
                format!("{:?} vs {:?}", self.vals[a.0].shape, self.vals[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let out: Vec<f64> =
            self.vals[a.0].data.iter().zip(&self.vals[b.0].data).map(|(x, y)| x + y).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a) || self.rg(b));
        self.push(Op::Add { a, b }, "add", shape, out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b)?;
        let out: Vec<f64> =
            self.vals[a.0].data.iter().zip(&self.vals[b.0].data).map(|(x, y)| x - y).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a) || self.rg(b));
        self.push(Op::Sub { a, b }, "sub", shape, out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let out: Vec<f64> =
            self.vals[a.0].data.iter().zip(&self.vals[b.0].data).map(|(x, y)| x * y).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a) || self.rg(b));
        self.push(Op::Mul { a, b }, "mul", shape, out, rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.vals[a.0].rows_cols();
        let (rr, rn) = self.vals[row.0].rows_cols();
        if rr != 1 || rn != n {
            return Err(Self::shape_err("add_row", format!("row {:?} vs cols {n}", self.vals[row.0].shape)));
        }
        let rd = &self.vals[row.0].data;
        let out: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(p, x)| x + rd[p % n])
            .collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a) || self.rg(row));
        self.push(Op::AddRow { a, row }, "add_row", shape, out, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|x| x * c).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::Scale { a, c }, "scale", shape, out, rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|x| x + c).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::AddConst { a }, "add_const", shape, out, rg)
    }

    /// Elementwise `min(a, c)`; gradient passes through only where `a < c`.
    pub fn min_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.min(c)).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::MinConst { a, c }, "min_const", shape, out, rg)
    }

    /// Elementwise clamp to [lo, hi]; zero gradient outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract { op: "clamp", detail: format!("lo {lo} > hi {hi}") });
        }
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::Clamp { a, lo, hi }, "clamp", shape, out, rg)
    }

    /// Elementwise `min(a, b)`; ties route the gradient to `a`.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("min_pair", a, b)?;
        let out: Vec<f64> =
            self.vals[a.0].data.iter().zip(&self.vals[b.0].data).map(|(x, y)| x.min(*y)).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a) || self.rg(b));
        self.push(Op::MinPair { a, b }, "min_pair", shape, out, rg)
    }

    /// Row-wise softmax. Each output row is nonnegative and sums to 1; adding
    /// a constant to a row leaves its output unchanged (max-shifted exp).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].rows_cols();
        let d = &self.vals[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&d[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::SoftmaxRows { a }, "softmax_rows", shape, out, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].rows_cols();
        let d = &self.vals[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let lse = logsumexp_slice(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::LogSoftmaxRows { a }, "log_softmax_rows", shape, out, rg)
    }

    /// Mean over masked-in positions of −log softmax(logits)[target].
    /// Returns the scalar loss and a warning flag that is true when the mask
    /// selected nothing (the loss is then defined as 0).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[u8]) -> Result<(Var, bool)> {
        let (m, v) = self.vals[logits.0].rows_cols();
        if targets.len() != m || mask.len() != m {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("{m} logit rows vs {} targets / {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenRange { id: bad, vocab: v });
        }
        let d = &self.vals[logits.0].data;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..m {
            if mask[i] == 0 {
                continue;
            }
            let row = &d[i * v..(i + 1) * v];
            total += logsumexp_slice(row) - row[targets[i]];
            count += 1;
        }
        let empty = count == 0;
        let loss = if empty { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        let var = self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
        )?;
        Ok((var, empty))
    }

    /// Per-position log probability of the target token under softmax(logits).
    pub fn token_logprobs(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.vals[logits.0].rows_cols();
        if targets.len() != m {
            return Err(Self::shape_err(
                "token_logprobs",
                format!("{m} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenRange { id: bad, vocab: v });
        }
        let d = &self.vals[logits.0].data;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &d[i * v..(i + 1) * v];
            out[i] = row[targets[i]] - logsumexp_slice(row);
        }
        let rg = self.rg(logits);
        self.push(
            Op::TokenLogProbs { logits, targets: targets.to_vec() },
            "token_logprobs",
            vec![m],
            out,
            rg,
        )
    }

    /// `gain ⊙ (h − μ)/(σ + eps) + bias` per row, with μ and σ the mean and
    /// population standard deviation of the row.
    pub fn layer_norm(&mut self, h: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.vals[h.0].rows_cols();
        self.norm_args("layer_norm", n, gain, bias)?;
        let (hd, gd, bd) = (&self.vals[h.0].data, &self.vals[gain.0].data, &self.vals[bias.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &hd[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let den = var.sqrt() + eps;
            for j in 0..n {
                out[i * n + j] = gd[j] * (row[j] - mu) / den + bd[j];
            }
        }
        let (shape, rg) =
            (self.vals[h.0].shape.clone(), self.rg(h) || self.rg(gain) || self.rg(bias));
        self.push(Op::LayerNorm { h, gain, bias, eps }, "layer_norm", shape, out, rg)
    }

    /// `gain ⊙ h/(σ_rms + eps) + bias` per row; rescales without recentering.
    pub fn rms_norm(&mut self, h: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.vals[h.0].rows_cols();
        self.norm_args("rms_norm", n, gain, bias)?;
        let (hd, gd, bd) = (&self.vals[h.0].data, &self.vals[gain.0].data, &self.vals[bias.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &hd[i * n..(i + 1) * n];
            let msq = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let den = msq.sqrt() + eps;
            for j in 0..n {
                out[i * n + j] = gd[j] * row[j] / den + bd[j];
            }
        }
        let (shape, rg) =
            (self.vals[h.0].shape.clone(), self.rg(h) || self.rg(gain) || self.rg(bias));
        self.push(Op::RmsNorm { h, gain, bias, eps }, "rms_norm", shape, out, rg)
    }

    fn norm_args(&self, op: &'static str, n: usize, gain: Var, bias: Var) -> Result<()> {
        for v in [gain, bias] {
            let (r, c) = self.vals[v.0].rows_cols();
            if r != 1 || c != n {
                return Err(Self::shape_err(op, format!("gain/bias {:?} vs width {n}", self.vals[v.0].shape)));
            }
        }
        Ok(())
    }

    pub fn activation(&mut self, a: Var, kind: ActKind) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|&x| act_forward(x, kind)).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::Act { a, kind }, "activation", shape, out, rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|&x| log_sigmoid(x)).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::LogSigmoid { a }, "log_sigmoid", shape, out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.exp()).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::Exp { a }, "exp", shape, out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.vals[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum { a }, "sum", vec![1], vec![s], rg)
    }

    /// Mean of all entries (sum then scale).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.vals[a.0].data.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// log Σ exp over a 1-D tensor, max-shifted.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].shape.len() != 1 {
            return Err(Self::shape_err("logsumexp", format!("want 1-D, got {:?}", self.vals[a.0].shape)));
        }
        let v = logsumexp_slice(&self.vals[a.0].data);
        let rg = self.rg(a);
        self.push(Op::LogSumExp { a }, "logsumexp", vec![1], vec![v], rg)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_cols", detail: "no parts".into() });
        }
        let (m, _) = self.vals[parts[0].0].rows_cols();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.vals[p.0].rows_cols();
            if r != m {
                return Err(Self::shape_err("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = &self.vals[p.0].data;
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, "concat_cols", vec![m, total], out, rg)
    }

    /// Concatenate along axis 0 (1-D tensors chain into a longer vector).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_rows", detail: "no parts".into() });
        }
        let trailing: usize = self.vals[parts[0].0].shape[1..].iter().product();
        let all_1d = parts.iter().all(|p| self.vals[p.0].shape.len() == 1);
        let mut rows = 0usize;
        for p in parts {
            let t: usize = self.vals[p.0].shape[1..].iter().product();
            if t != trailing {
                return Err(Self::shape_err("concat_rows", format!("trailing extents {trailing} vs {t}")));
            }
            rows += self.vals[p.0].shape[0];
        }
        let mut out = Vec::with_capacity(rows * trailing);
        for p in parts {
            out.extend_from_slice(&self.vals[p.0].data);
        }
        let shape = if all_1d || trailing == 1 { vec![rows] } else { vec![rows, trailing] };
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, "concat_rows", shape, out, rg)
    }

    /// Slice `len` entries (1-D) or rows (2-D) starting at `start`, axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.vals[a.0].shape.clone();
        let axis0 = shape[0];
        if start + len > axis0 || len == 0 {
            return Err(Self::shape_err("slice", format!("[{start}, {start}+{len}) of {axis0}")));
        }
        let trailing: usize = shape[1..].iter().product();
        let out = self.vals[a.0].data[start * trailing..(start + len) * trailing].to_vec();
        let mut oshape = shape;
        oshape[0] = len;
        let rg = self.rg(a);
        self.push(Op::Slice { a, start, len }, "slice", oshape, out, rg)
    }

    /// Gather rows of an embedding table by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.vals[table.0].rows_cols();
        if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
            return Err(Error::TokenRange { id: bad, vocab: v });
        }
        let td = &self.vals[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(Op::Embed { table, ids: ids.to_vec() }, "embed", vec![ids.len(), d], out, rg)
    }

    /// Pick arbitrary flat entries of `src` into a tensor of the given shape.
    /// Index [`GATHER_ZERO`] emits 0.0 and routes no gradient.
    pub fn gather_scalars(&mut self, src: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Self::shape_err("gather_scalars", format!("shape {shape:?} vs {} indices", idx.len())));
        }
        let sd = &self.vals[src.0].data;
        let mut out = vec![0.0; n];
        for (o, &i) in out.iter_mut().zip(idx) {
            if i != GATHER_ZERO {
                if i >= sd.len() {
                    return Err(Error::Contract {
                        op: "gather_scalars",
                        detail: format!("index {i} out of {}", sd.len()),
                    });
                }
                *o = sd[i];
            }
        }
        let rg = self.rg(src);
        self.push(Op::GatherScalars { src, idx: idx.to_vec() }, "gather_scalars", shape.to_vec(), out, rg)
    }

    /// Rotate adjacent column pairs of each row r by angle positions[r]·θ_k.
    /// Positions are real-valued so interpolation can rescale them.
    pub fn rope_rows(&mut self, a: Var, positions: &[f64], thetas: &[f64]) -> Result<Var> {
        let (m, n) = self.vals[a.0].rows_cols();
        if n % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding requires even width, got {n}")));
        }
        if positions.len() != m || thetas.len() != n / 2 {
            return Err(Self::shape_err(
                "rope_rows",
                format!("{m}×{n} input vs {} positions / {} angles", positions.len(), thetas.len()),
            ));
        }
        let d = &self.vals[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..n / 2 {
                let ang = positions[i] * thetas[k];
                let (sin, cos) = ang.sin_cos();
                let x = d[i * n + 2 * k];
                let y = d[i * n + 2 * k + 1];
                out[i * n + 2 * k] = x * cos - y * sin;
                out[i * n + 2 * k + 1] = x * sin + y * cos;
            }
        }
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(
            Op::Rope { a, positions: positions.to_vec(), thetas: thetas.to_vec() },
            "rope_rows",
            shape,
            out,
            rg,
        )
    }

    /// Elementwise product with a constant vector (no gradient into `w`).
    pub fn mul_const_vec(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.vals[a.0].data.len() {
            return Err(Self::shape_err("mul_const_vec", format!("{} vs {}", w.len(), self.vals[a.0].data.len())));
        }
        let out: Vec<f64> = self.vals[a.0].data.iter().zip(w).map(|(x, y)| x * y).collect();
        let (shape, rg) = (self.vals[a.0].shape.clone(), self.rg(a));
        self.push(Op::MulConstVec { a, w: w.to_vec() }, "mul_const_vec", shape, out, rg)
    }

    /// Weighted sum against a constant vector: Σ aᵢ·wᵢ.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        let p = self.mul_const_vec(a, w)?;
        self.sum(p)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor that
    /// requires grad and was reached; each recorded op is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.vals[loss.0].shape),
            });
        }
        let n = self.vals.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for i in 0..n {
            self.vals[i].grad =
                if self.vals[i].requires_grad { grads[i].take() } else { None };
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.vals[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_op(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.vals[a.0].rows_cols();
                let (_, n) = self.vals[b.0].rows_cols();
                if self.vals[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bd = &self.vals[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for t in 0..k {
                            let brow = &bd[t * n..(t + 1) * n];
                            da[r * k + t] =
                                g[r * n..(r + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.vals[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let ad = &self.vals[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let arow = &ad[r * k..(r + 1) * k];
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            let av = arow[t];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[t * n..(t + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatmulTb { a, b } => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let (m, k) = self.vals[a.0].rows_cols();
                let (n, _) = self.vals[b.0].rows_cols();
                if self.vals[a.0].requires_grad {
                    let bd = &self.vals[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &bd[j * k..(j + 1) * k];
                            let drow = &mut da[r * k..(r + 1) * k];
                            for t in 0..k {
                                drow[t] += gv * brow[t];
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.vals[b.0].requires_grad {
                    let ad = &self.vals[a.0].data;
                    let mut db = vec![0.0; n * k];
                    for r in 0..m {
                        let arow = &ad[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * k..(j + 1) * k];
                            for t in 0..k {
                                drow[t] += gv * arow[t];
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.vals[a.0].requires_grad {
                    let da: Vec<f64> =
                        g.iter().zip(&self.vals[b.0].data).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, &da);
                }
                if self.vals[b.0].requires_grad {
                    let db: Vec<f64> =
                        g.iter().zip(&self.vals[a.0].data).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::AddRow { a, row } => {
                self.accum(grads, *a, g);
                if self.vals[row.0].requires_grad {
                    let (_, n) = self.vals[a.0].rows_cols();
                    let mut dr = vec![0.0; n];
                    for (p, gv) in g.iter().enumerate() {
                        dr[p % n] += gv;
                    }
                    self.accum(grads, *row, &dr);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(grads, *a, &da);
            }
            Op::AddConst { a, .. } => self.accum(grads, *a, g),
            Op::MinConst { a, c } => {
                let da: Vec<f64> = self.vals[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if x < c { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let da: Vec<f64> = self.vals[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if x > lo && x < hi { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::MinPair { a, b } => {
                if self.vals[a.0].requires_grad {
                    let da: Vec<f64> = self.vals[a.0]
                        .data
                        .iter()
                        .zip(&self.vals[b.0].data)
                        .zip(g)
                        .map(|((x, y), gv)| if x <= y { *gv } else { 0.0 })
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.vals[b.0].requires_grad {
                    let db: Vec<f64> = self.vals[a.0]
                        .data
                        .iter()
                        .zip(&self.vals[b.0].data)
                        .zip(g)
                        .map(|((x, y), gv)| if y < x { *gv } else { 0.0 })
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = self.vals[a.0].rows_cols();
                let s = &self.vals[i].data;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let srow = &s[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        da[r * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::LogSoftmaxRows { a } => {
                let (m, n) = self.vals[a.0].rows_cols();
                let ls = &self.vals[i].data;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let lrow = &ls[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = grow[j] - lrow[j].exp() * gsum;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let (m, v) = self.vals[logits.0].rows_cols();
                let count = mask.iter().filter(|&&b| b != 0).count();
                if count == 0 {
                    return;
                }
                let gv = g[0] / count as f64;
                let d = &self.vals[logits.0].data;
                let mut da = vec![0.0; m * v];
                let mut srow = vec![0.0; v];
                for r in 0..m {
                    if mask[r] == 0 {
                        continue;
                    }
                    softmax_into(&d[r * v..(r + 1) * v], &mut srow);
                    for j in 0..v {
                        da[r * v + j] = gv * srow[j];
                    }
                    da[r * v + targets[r]] -= gv;
                }
                self.accum(grads, *logits, &da);
            }
            Op::TokenLogProbs { logits, targets } => {
                let (m, v) = self.vals[logits.0].rows_cols();
                let d = &self.vals[logits.0].data;
                let mut da = vec![0.0; m * v];
                let mut srow = vec![0.0; v];
                for r in 0..m {
                    softmax_into(&d[r * v..(r + 1) * v], &mut srow);
                    let gv = g[r];
                    for j in 0..v {
                        da[r * v + j] = -gv * srow[j];
                    }
                    da[r * v + targets[r]] += gv;
                }
                self.accum(grads, *logits, &da);
            }
            Op::LayerNorm { h, gain, bias, eps } => {
                let (m, n) = self.vals[h.0].rows_cols();
                let hd = &self.vals[h.0].data;
                let gd = &self.vals[gain.0].data;
                let mut dh = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &hd[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                    let sigma = var.sqrt();
                    let den = sigma + eps;
                    // dL/dc with c = x − μ, then recenter for the mean path.
                    let ghat: Vec<f64> = grow.iter().zip(gd).map(|(gj, aj)| gj * aj).collect();
                    let sdot: f64 = ghat.iter().zip(row).map(|(gj, xj)| gj * (xj - mu)).sum();
                    let mut dc = vec![0.0; n];
                    for j in 0..n {
                        dc[j] = ghat[j] / den;
                        if sigma > 0.0 {
                            dc[j] -= sdot * (row[j] - mu) / (n as f64 * sigma * den * den);
                        }
                    }
                    let dcm = dc.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        dh[r * n + j] = dc[j] - dcm;
                        dgain[j] += grow[j] * (row[j] - mu) / den;
                        dbias[j] += grow[j];
                    }
                }
                self.accum(grads, *h, &dh);
                self.accum(grads, *gain, &dgain);
                self.accum(grads, *bias, &dbias);
            }
            Op::RmsNorm { h, gain, bias, eps } => {
                let (m, n) = self.vals[h.0].rows_cols();
                let hd = &self.vals[h.0].data;
                let gd = &self.vals[gain.0].data;
                let mut dh = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &hd[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let msq = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
                    let rms = msq.sqrt();
                    let den = rms + eps;
                    let ghat: Vec<f64> = grow.iter().zip(gd).map(|(gj, aj)| gj * aj).collect();
                    let sdot: f64 = ghat.iter().zip(row).map(|(gj, xj)| gj * xj).sum();
                    for j in 0..n {
                        let mut dj = ghat[j] / den;
                        if rms > 0.0 {
                            dj -= sdot * row[j] / (n as f64 * rms * den * den);
                        }
                        dh[r * n + j] = dj;
                        dgain[j] += grow[j] * row[j] / den;
                        dbias[j] += grow[j];
                    }
                }
                self.accum(grads, *h, &dh);
                self.accum(grads, *gain, &dgain);
                self.accum(grads, *bias, &dbias);
            }
            Op::Act { a, kind } => {
                let da: Vec<f64> = self.vals[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gv * act_derivative(x, *kind))
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::LogSigmoid { a } => {
                let da: Vec<f64> = self.vals[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gv * sigmoid(-x))
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<f64> = self.vals[i].data.iter().zip(g).map(|(y, gv)| y * gv).collect();
                self.accum(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.vals[a.0].data.len()];
                self.accum(grads, *a, &da);
            }
            Op::LogSumExp { a } => {
                let d = &self.vals[a.0].data;
                let mut sm = vec![0.0; d.len()];
                softmax_into(d, &mut sm);
                let da: Vec<f64> = sm.iter().map(|s| s * g[0]).collect();
                self.accum(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| self.vals[p.0].rows_cols().1).sum();
                let m = self.vals[parts[0].0].rows_cols().0;
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.vals[p.0].rows_cols();
                    if self.vals[p.0].requires_grad {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accum(grads, *p, &dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.vals[p.0].data.len();
                    if self.vals[p.0].requires_grad {
                        self.accum(grads, *p, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice { a, start, len } => {
                let trailing: usize = self.vals[a.0].shape[1..].iter().product();
                let mut da = vec![0.0; self.vals[a.0].data.len()];
                da[start * trailing..(start + len) * trailing].copy_from_slice(g);
                self.accum(grads, *a, &da);
            }
            Op::Embed { table, ids } => {
                if self.vals[table.0].requires_grad {
                    let (_, d) = self.vals[table.0].rows_cols();
                    let mut dt = vec![0.0; self.vals[table.0].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    self.accum(grads, *table, &dt);
                }
            }
            Op::GatherScalars { src, idx } => {
                if self.vals[src.0].requires_grad {
                    let mut ds = vec![0.0; self.vals[src.0].data.len()];
                    for (p, &ix) in idx.iter().enumerate() {
                        if ix != GATHER_ZERO {
                            ds[ix] += g[p];
                        }
                    }
                    self.accum(grads, *src, &ds);
                }
            }
            Op::Rope { a, positions, thetas } => {
                let (m, n) = self.vals[a.0].rows_cols();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for k in 0..n / 2 {
                        let ang = positions[r] * thetas[k];
                        let (sin, cos) = ang.sin_cos();
                        let gx = g[r * n + 2 * k];
                        let gy = g[r * n + 2 * k + 1];
                        da[r * n + 2 * k] = gx * cos + gy * sin;
                        da[r * n + 2 * k + 1] = -gx * sin + gy * cos;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::MulConstVec { a, w } => {
                let da: Vec<f64> = g.iter().zip(w).map(|(gv, wv)| gv * wv).collect();
                self.accum(grads, *a, &da);
            }
        }
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log σ(x) = min(x,0) − ln(1 + e^{−|x|}).
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Exact Gaussian CDF via the error function.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn act_forward(x: f64, kind: ActKind) -> f64 {
    match kind {
        ActKind::Relu => x.max(0.0),
        ActKind::Gelu => x * gauss_cdf(x),
        ActKind::Swish(c) => x * sigmoid(c * x),
        ActKind::Sigmoid => sigmoid(x),
    }
}

fn act_derivative(x: f64, kind: ActKind) -> f64 {
    match kind {
        ActKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActKind::Gelu => gauss_cdf(x) + x * gauss_pdf(x),
        ActKind::Swish(c) => {
            let s = sigmoid(c * x);
            s + c * x * s * (1.0 - s)
        }
        ActKind::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
    }
}

/// Max-shifted softmax of a slice into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-shifted log Σ exp of a slice.
pub fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
