//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends one node to the [`Tape`]; since a node can only
//! reference nodes that already exist, the tape is topologically ordered by
//! construction and a single reverse sweep visits each operation once.
//!
//! ```
//! use integral_core::autodiff::Tape;
//! use integral_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::tensor::{
    matmul_nn, matmul_nt, matmul_tn, softmax_rows_raw, Mask, Result, Tensor, TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Vec<f64>),
    Abs(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
    MeanOf(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.ensure_matrix("matmul_nt")?;
        let (n, k2) = tb.ensure_matrix("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_nt(ta.data(), tb.data(), m, k, n));
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).ensure_matrix("transpose")?;
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Multiply every entry of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", self.value(a), self.value(s)));
        }
        let c = self.value(s).item();
        let out = self.map(a, |x| x * c);
        self.push("scale_by", out, Op::ScaleBy(a, s), &[a, s])
    }

    /// Elementwise product with a non-differentiable constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if c.len() != t.len() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: t.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = t.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("mul_const", out, Op::MulConst(a, c), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Row softmax; entries outside `mask` are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.ensure_matrix("softmax_rows")?;
        if let Some(mk) = mask {
            if mk.shape() != (m, n) {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: vec![mk.shape().0, mk.shape().1],
                });
            }
        }
        let out = Tensor::from_parts(vec![m, n], softmax_rows_raw(t.data(), m, n, mask)?);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row `x / sqrt(mean(x²) + eps) · weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (m, n) = tx.ensure_matrix("rms_norm")?;
        if tw.len() != n {
            return Err(shape_err("rms_norm", tx, tw));
        }
        let mut inv_rms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = tx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(tw.data()).map(|(v, w)| v * r * w));
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.push(
            "rms_norm",
            out,
            Op::RmsNorm { x, weight, inv_rms },
            &[x, weight],
        )
    }

    /// Rotary embedding on interleaved pairs `(2i, 2i+1)`. Columns are split
    /// into independent blocks of width `block`; pair `i` of a block in row `r`
    /// is rotated by `positions[r] · theta^(−2i/block)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64, block: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = t.ensure_matrix("rope")?;
        if block == 0 || !block.is_multiple_of(2) || d % block != 0 {
            return Err(TensorError::Contract(format!(
                "rotary embedding needs an even block dividing the width, got block {block} of {d}"
            )));
        }
        if positions.len() != m {
            return Err(TensorError::Contract(format!(
                "rotary embedding got {} positions for {m} rows",
                positions.len()
            )));
        }
        let (cos, sin) = rope_tables(positions, d, theta, block);
        let half = d / 2;
        let mut data = t.data().to_vec();
        for r in 0..m {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let (a, b) = (data[r * d + 2 * i], data[r * d + 2 * i + 1]);
                data[r * d + 2 * i] = a * c - b * s;
                data[r * d + 2 * i + 1] = a * s + b * c;
            }
        }
        let out = Tensor::from_parts(vec![m, d], data);
        self.push("rope", out, Op::Rope { x, cos, sin }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.ensure_matrix("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let out = Tensor::from_parts(vec![m, width], data);
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let m = self.value(*first).ensure_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = self.value(*p).ensure_matrix("concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![m, total], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.ensure_matrix("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(TensorError::Contract(format!(
                "row slice {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let out = Tensor::from_parts(
            vec![len, n],
            t.data()[start * n..(start + len) * n].to_vec(),
        );
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let n = self.value(*first).ensure_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pm, pn) = self.value(*p).ensure_matrix("concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.value(*first), self.value(*p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::from_parts(vec![rows, n], data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gather rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.ensure_matrix("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!(
                "token id {bad} outside table of {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Contract(
                "embedding of an empty sequence".into(),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `scale · Σ_r −ln softmax(logits_r)[target_r]` over rows with a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.ensure_matrix("cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::Contract(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= n) {
            return Err(TensorError::Contract(format!(
                "target id {bad} outside vocabulary of {n}"
            )));
        }
        let probs = softmax_rows_raw(t.data(), m, n, None)?;
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(c) = *tgt {
                let row = t.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[c];
            }
        }
        let out = Tensor::scalar(total * scale);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Elementwise arithmetic mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("mean of no tensors".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for p in parts {
            let t = self.value(*p);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("mean_of", self.value(*first), t));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let k = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let out = Tensor::from_parts(shape, acc);
        self.push("mean_of", out, Op::MeanOf(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(
                    self.nodes[v.0].value.shape().to_vec(),
                    delta,
                ));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(gd, val(*b).data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(val(*a).data(), gd, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nn(gd, val(*b).data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(gd, val(*a).data(), m, n, k));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose().into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(tb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s).item();
                self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
                let ds = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, vec![ds]);
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, gd.iter().zip(c).map(|(g, k)| g * k).collect());
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), &gd[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (tx, tw) = (val(*x), val(*weight).data());
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; m * n];
                let mut dw = vec![0.0; n];
                for i in 0..m {
                    let (xr, gr, r) = (tx.row(i), &gd[i * n..(i + 1) * n], inv_rms[i]);
                    let mut dot = 0.0;
                    for j in 0..n {
                        dw[j] += gr[j] * xr[j] * r;
                        dot += gr[j] * tw[j] * xr[j];
                    }
                    let c = r * r * r * dot / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = r * gr[j] * tw[j] - xr[j] * c;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *weight, dw);
            }
            Op::Rope { x, cos, sin } => {
                let (m, d) = (g.rows(), g.cols());
                let half = d / 2;
                let mut dx = gd.to_vec();
                for r in 0..m {
                    for i in 0..half {
                        let (c, s) = (cos[r * half + i], sin[r * half + i]);
                        let (a, b) = (gd[r * d + 2 * i], gd[r * d + 2 * i + 1]);
                        dx[r * d + 2 * i] = a * c + b * s;
                        dx[r * d + 2 * i + 1] = -a * s + b * c;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let w = g.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (m, w) = (val(*p).rows(), val(*p).cols());
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g.row(i)[off..off + w]);
                    }
                    self.accumulate(grads, *p, dp);
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = val(*x).cols();
                let mut dx = vec![0.0; val(*x).len()];
                dx[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    self.accumulate(grads, *p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                let mut dt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let n = val(*logits).cols();
                let s = gd[0] * scale;
                let mut dl = vec![0.0; probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    if let Some(c) = *tgt {
                        for j in 0..n {
                            dl[r * n + j] = s * probs[r * n + j];
                        }
                        dl[r * n + c] -= s;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![gd[0]; val(*a).len()]);
            }
            Op::MeanOf(parts) => {
                let k = parts.len() as f64;
                for p in parts {
                    self.accumulate(grads, *p, gd.iter().map(|x| x / k).collect());
                }
            }
        }
    }
}

fn rope_tables(positions: &[usize], d: usize, theta: f64, block: usize) -> (Vec<f64>, Vec<f64>) {
    let half = d / 2;
    let pairs = block / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = theta.powf(-2.0 * (i % pairs) as f64 / block as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Central-difference check of the gradient of scalar `f` at `x`.
///
/// Returns the maximum over entries of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(x, x).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[vec![0.0, 0.0], vec![0.0, 2f64.ln()]]));
        let p = tape.softmax_rows(z, None).unwrap();
        let pv = tape.value(p).data();
        assert!((pv[0] - 0.5).abs() < 1e-15 && (pv[1] - 0.5).abs() < 1e-15);
        assert!((pv[2] - 1.0 / 3.0).abs() < 1e-15 && (pv[3] - 2.0 / 3.0).abs() < 1e-15);

        let z = tape.constant(t(&[vec![5.0, 5.0, 5.0]]));
        let mask = Mask::new(1, 3, vec![true, false, false]).unwrap();
        let p = tape.softmax_rows(z, Some(&mask)).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0]);

        let none = Mask::new(1, 3, vec![false; 3]).unwrap();
        assert_eq!(
            tape.softmax_rows(z, Some(&none)).unwrap_err(),
            TensorError::DegenerateRow { row: 0 }
        );
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::uniform(&[3, 4], -2.0, 2.0, &mut seeded_rng(1)));
        let p = tape.softmax_rows(x, None).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));

        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        let mut rng = seeded_rng(11);
        let x = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let wc = w.clone();
        let err = grad_check(
            move |tp, xv| {
                let wv = tp.constant(wc.clone());
                let y = tp.matmul(xv, wv)?;
                tp.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "x grad err {err}");
        let xc = x.clone();
        let err = grad_check(
            move |tp, wv| {
                let xv = tp.constant(xc.clone());
                let y = tp.matmul(xv, wv)?;
                tp.sum(y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "w grad err {err}");
    }

    #[test]
    fn grad_check_examples() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tp, v| {
                let sq = tp.mul(v, v)?;
                tp.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
        let err = grad_check(
            |tp, v| {
                let z = tp.scale(v, 0.0)?;
                tp.sum(z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let x0 = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut seeded_rng(5));
        let once = {
            let mut tp = Tape::new();
            let x = tp.param(x0.clone());
            let a = tp.silu(x).unwrap();
            let s = tp.sum(a).unwrap();
            tp.backward(s).unwrap().get(x).unwrap().clone()
        };
        let twice = {
            let mut tp = Tape::new();
            let x = tp.param(x0.clone());
            let a = tp.silu(x).unwrap();
            let b = tp.silu(x).unwrap();
            let c = tp.add(a, b).unwrap();
            let s = tp.sum(c).unwrap();
            tp.backward(s).unwrap().get(x).unwrap().clone()
        };
        for (o, t) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * o, *t);
        }
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::full(&[2], 1e300));
        assert_eq!(
            tp.mul(x, x).unwrap_err(),
            TensorError::NonFinite { op: "mul" }
        );
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = seeded_rng(21);
        let x = Tensor::uniform(&[4, 6], -1.5, 1.5, &mut rng);
        let w = Tensor::uniform(&[6, 6], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let mask = Mask::new(4, 6, (0..24).map(|i| i % 6 <= i / 6 + 1).collect()).unwrap();
        type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
        let cases: Vec<(&str, Build)> = vec![
            (
                "matmul",
                Box::new({
                    let w = w.clone();
                    move |tp, v| {
                        let wv = tp.constant(w.clone());
                        tp.matmul(v, wv)
                    }
                }),
            ),
            ("matmul_nt", Box::new(|tp, v| tp.matmul_nt(v, v))),
            ("transpose", Box::new(|tp, v| tp.transpose(v))),
            ("mul", Box::new(|tp, v| tp.mul(v, v))),
            (
                "sub",
                Box::new(|tp, v| {
                    let s = tp.scale(v, 3.0)?;
                    let m = tp.mul(v, v)?;
                    tp.sub(s, m)
                }),
            ),
            ("abs", Box::new(|tp, v| tp.abs(v))),
            ("silu", Box::new(|tp, v| tp.silu(v))),
            ("softmax", Box::new(|tp, v| tp.softmax_rows(v, None))),
            (
                "softmax_masked",
                Box::new({
                    let mask = mask.clone();
                    move |tp, v| tp.softmax_rows(v, Some(&mask))
                }),
            ),
            (
                "rms_norm",
                Box::new(|tp, v| {
                    let w = tp.constant(
                        Tensor::new(vec![6], vec![0.5, 1.0, 1.5, -1.0, 2.0, 0.1]).unwrap(),
                    );
                    tp.rms_norm(v, w, 1e-5)
                }),
            ),
            (
                "rope",
                Box::new(|tp, v| tp.rope(v, &[0, 1, 2, 7], 10000.0, 2)),
            ),
            (
                "slice_concat",
                Box::new(|tp, v| {
                    let a = tp.slice_cols(v, 1, 2)?;
                    let b = tp.slice_cols(v, 4, 2)?;
                    let c = tp.concat_cols(&[b, a, b])?;
                    let r = tp.slice_rows(c, 1, 2)?;
                    tp.concat_rows(&[r, c])
                }),
            ),
            (
                "scale_by",
                Box::new(|tp, v| {
                    let s = tp.slice_cols(v, 0, 1)?;
                    let s = tp.slice_rows(s, 2, 1)?;
                    tp.scale_by(v, s)
                }),
            ),
            (
                "mean_of",
                Box::new(|tp, v| {
                    let a = tp.mul(v, v)?;
                    tp.mean_of(&[a, v, v])
                }),
            ),
            (
                "cross_entropy",
                Box::new(|tp, v| tp.cross_entropy(v, &[Some(1), None, Some(5), Some(0)], 0.5)),
            ),
        ];
        for (name, build) in cases {
            let probe = probe.clone();
            let err = grad_check(
                |tp, v| {
                    let y = build(tp, v)?;
                    if tp.value(y).len() == 1 {
                        return Ok(y);
                    }
                    let n = tp.value(y).len();
                    let p = probe.data().iter().cycle().take(n).cloned().collect();
                    let yp = tp.mul_const(y, p)?;
                    tp.sum(yp)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name}: {err}");
        }
        let table = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tp, v| {
                let e = tp.embedding(v, &[4, 0, 4, 2])?;
                let q = tp.mul(e, e)?;
                tp.sum(q)
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "embedding: {err}");
    }

    #[test]
    fn rope_position_zero_is_identity_and_preserves_pair_norms() {
        let x = Tensor::uniform(&[3, 8], -1.0, 1.0, &mut seeded_rng(2));
        let mut tp = Tape::new();
        let v = tp.constant(x.clone());
        let r = tp.rope(v, &[0, 5, 1000], 10000.0, 8).unwrap();
        let out = tp.value(r);
        assert_eq!(out.row(0), x.row(0));
        for row in 0..3 {
            for i in 0..4 {
                let a = x.row(row)[2 * i].hypot(x.row(row)[2 * i + 1]);
                let b = out.row(row)[2 * i].hypot(out.row(row)[2 * i + 1]);
                assert!((a - b).abs() < 1e-14);
            }
        }
        let odd = tp.constant(Tensor::zeros(&[1, 3]));
        assert!(tp.rope(odd, &[1], 10000.0, 3).is_err());
    }
}
