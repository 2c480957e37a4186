//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its operands. `backward` walks
//! the arena in reverse insertion order, so gradient accumulation order
//! is fixed by construction and repeated runs are bit-identical.
//!
//! Leaves that never feed the loss keep an all-zero gradient; callers
//! rely on this to prove that parameters outside the active graph are
//! untouched rather than merely small.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    /// Broadcast a rank-1 bias across the rows of a matrix.
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    /// Row-wise softmax (whole vector for rank 1).
    Softmax(usize),
    /// Mean cross-entropy over rows, fused with softmax. Cached
    /// probabilities feed the `softmax - onehot` backward rule.
    CrossEntropy {
        x: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// out[i, j] = x[i, j] * s[i] with s rank 1.
    RowScale(usize, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of one scalar loss with respect to every tape value.
///
/// `get` returns an all-zero tensor for values the loss never touched.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Result<&Tensor<T>> {
        if id.tape != self.tape {
            return Err(Error::Tape(format!(
                "gradient lookup for value from tape {} on tape {}",
                id.tape, self.tape
            )));
        }
        Ok(&self.grads[id.index])
    }
}

/// Arena tape recording a single forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> Result<&Tensor<T>> {
        self.check(id, "value")?;
        Ok(&self.nodes[id.index].value)
    }

    fn check(&self, id: ValueId, op: &str) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Tape(format!(
                "{op}: operand belongs to tape {} not {}",
                id.tape, self.id
            )));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        ValueId {
            tape: self.id,
            index,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "matmul")?;
        let bi = self.check(b, "matmul")?;
        let out = crate::tensor::matmul_value(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Matmul(ai, bi)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "add")?;
        let bi = self.check(b, "add")?;
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(Error::dimension(
                "add",
                format!("shape mismatch {:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| *p + *q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "mul")?;
        let bi = self.check(b, "mul")?;
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(Error::dimension(
                "mul",
                format!("shape mismatch {:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| *p * *q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(ai, bi)))
    }

    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "add_bias")?;
        let bi = self.check(bias, "add_bias")?;
        let (x, b) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.rank() != 2 || b.rank() != 1 {
            return Err(Error::dimension("add_bias", "expects matrix plus vector"));
        }
        let (rows, cols) = x.dims2();
        if b.numel() != cols {
            return Err(Error::dimension(
                "add_bias",
                format!("bias length {} vs {cols} columns", b.numel()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(x.get(i, j) + b.data()[j]);
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::AddBias(ai, bi)))
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "relu")?;
        let x = &self.nodes[ai].value;
        let data = x
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu(ai)))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "tanh")?;
        let x = &self.nodes[ai].value;
        let data = x.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Tanh(ai)))
    }

    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "softmax")?;
        let out = softmax_value(&self.nodes[ai].value)?;
        Ok(self.push(out, Op::Softmax(ai)))
    }

    /// Mean of per-row `-ln softmax(x)[label]`. Output is a scalar.
    pub fn cross_entropy(&mut self, x: ValueId, labels: &[usize]) -> Result<ValueId> {
        let xi = self.check(x, "cross_entropy")?;
        let logits = &self.nodes[xi].value;
        if logits.rank() != 2 {
            return Err(Error::dimension("cross_entropy", "logits must be rank 2"));
        }
        let (rows, cols) = logits.dims2();
        if labels.len() != rows {
            return Err(Error::dimension(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::IndexOutOfRange {
                    label: l,
                    n_classes: cols,
                });
            }
        }
        let probs = softmax_value(logits)?;
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            total = total - probs.get(i, l).ln();
        }
        let loss = total / T::from_f64(rows as f64);
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                x: xi,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "sum")?;
        let x = &self.nodes[ai].value;
        let mut total = T::zero();
        for v in x.data() {
            total = total + *v;
        }
        Ok(self.push(Tensor::scalar(total), Op::Sum(ai)))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat_cols", "no operands"));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for p in parts {
            idxs.push(self.check(*p, "concat_cols")?);
        }
        let rows = {
            let first = &self.nodes[idxs[0]].value;
            if first.rank() != 2 {
                return Err(Error::dimension("concat_cols", "operands must be rank 2"));
            }
            first.dims2().0
        };
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let t = &self.nodes[i].value;
            let (r, c) = t.dims2();
            if t.rank() != 2 || r != rows {
                return Err(Error::dimension(
                    "concat_cols",
                    format!("operand shape {:?} does not match {rows} rows", t.shape()),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(idxs)))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let ai = self.check(a, "slice_cols")?;
        let x = &self.nodes[ai].value;
        if x.rank() != 2 {
            return Err(Error::dimension("slice_cols", "operand must be rank 2"));
        }
        let (rows, cols) = x.dims2();
        if start + len > cols {
            return Err(Error::dimension(
                "slice_cols",
                format!("range {start}..{} exceeds {cols} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x: ai, start, len }))
    }

    pub fn row_scale(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "row_scale")?;
        let si = self.check(s, "row_scale")?;
        let (x, sc) = (&self.nodes[ai].value, &self.nodes[si].value);
        if x.rank() != 2 {
            return Err(Error::dimension("row_scale", "expects a matrix"));
        }
        let (rows, cols) = x.dims2();
        // Scale may be a vector or a single-column matrix; storage matches.
        let column = sc.rank() == 2 && sc.dims2().1 == 1;
        if !(sc.rank() == 1 || column) || sc.numel() != rows {
            return Err(Error::dimension(
                "row_scale",
                format!("scale shape {:?} for {rows} rows", sc.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let f = sc.data()[i];
            for j in 0..cols {
                data.push(x.get(i, j) * f);
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::RowScale(ai, si)))
    }

    /// Backpropagate from a scalar loss through every recorded node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        let li = self.check(loss, "backward")?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Tensor<T>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[li] = Tensor::new(self.nodes[li].value.shape().to_vec(), vec![T::one()])?;

        for idx in (0..=li).rev() {
            if grads[idx].data().iter().all(|v| *v == T::zero()) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let (m, k) = av.dims2();
                    let (_, n) = bv.dims2();
                    // dA[i,kk] += sum_j g[i,j] * B[kk,j]
                    {
                        let da = grad_mut(&mut grads, *a);
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = T::zero();
                                for j in 0..n {
                                    acc = acc + g.get(i, j) * bv.get(kk, j);
                                }
                                da[i * k + kk] = da[i * k + kk] + acc;
                            }
                        }
                    }
                    // dB[kk,j] += sum_i A[i,kk] * g[i,j]
                    {
                        let db = grad_mut(&mut grads, *b);
                        for kk in 0..k {
                            for j in 0..n {
                                let mut acc = T::zero();
                                for i in 0..m {
                                    acc = acc + av.get(i, kk) * g.get(i, j);
                                }
                                db[kk * n + j] = db[kk * n + j] + acc;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(grad_mut(&mut grads, *a), g.data());
                    accumulate(grad_mut(&mut grads, *b), g.data());
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[*b].value.data().to_vec();
                    let av = self.nodes[*a].value.data().to_vec();
                    {
                        let da = grad_mut(&mut grads, *a);
                        for (slot, (gv, q)) in da.iter_mut().zip(g.data().iter().zip(&bv)) {
                            *slot = *slot + *gv * *q;
                        }
                    }
                    {
                        let db = grad_mut(&mut grads, *b);
                        for (slot, (gv, p)) in db.iter_mut().zip(g.data().iter().zip(&av)) {
                            *slot = *slot + *gv * *p;
                        }
                    }
                }
                Op::AddBias(a, b) => {
                    let (rows, cols) = self.nodes[*a].value.dims2();
                    accumulate(grad_mut(&mut grads, *a), g.data());
                    let db = grad_mut(&mut grads, *b);
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g.get(i, j);
                        }
                    }
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let xv = self.nodes[*a].value.data().to_vec();
                    let da = grad_mut(&mut grads, *a);
                    for (slot, (gv, x)) in da.iter_mut().zip(g.data().iter().zip(&xv)) {
                        if *x > T::zero() {
                            *slot = *slot + *gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[idx].value.data().to_vec();
                    let da = grad_mut(&mut grads, *a);
                    for (slot, (gv, y)) in da.iter_mut().zip(g.data().iter().zip(&yv)) {
                        *slot = *slot + *gv * (T::one() - *y * *y);
                    }
                }
                Op::Softmax(a) => {
                    // dx_i = p_i * (g_i - sum_j g_j p_j), per row.
                    let p = self.nodes[idx].value.clone();
                    let (rows, cols) = p.dims2();
                    let da = grad_mut(&mut grads, *a);
                    for i in 0..rows {
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot = dot + g.get(i, j) * p.get(i, j);
                        }
                        for j in 0..cols {
                            let k = i * cols + j;
                            da[k] = da[k] + p.get(i, j) * (g.get(i, j) - dot);
                        }
                    }
                }
                Op::CrossEntropy { x, labels, probs } => {
                    let gv = g.data()[0];
                    let (rows, cols) = probs.dims2();
                    let scale = gv / T::from_f64(rows as f64);
                    let dx = grad_mut(&mut grads, *x);
                    for i in 0..rows {
                        for j in 0..cols {
                            let onehot = if labels[i] == j { T::one() } else { T::zero() };
                            let k = i * cols + j;
                            dx[k] = dx[k] + scale * (probs.get(i, j) - onehot);
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let da = grad_mut(&mut grads, *a);
                    for slot in da.iter_mut() {
                        *slot = *slot + gv;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, _) = self.nodes[idx].value.dims2();
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| self.nodes[p].value.dims2().1).collect();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let dp = grad_mut(&mut grads, p);
                        for i in 0..rows {
                            for j in 0..w {
                                dp[i * w + j] = dp[i * w + j] + g.get(i, offset + j);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, cols) = self.nodes[*x].value.dims2();
                    let dx = grad_mut(&mut grads, *x);
                    for i in 0..rows {
                        for j in 0..*len {
                            let k = i * cols + start + j;
                            dx[k] = dx[k] + g.get(i, j);
                        }
                    }
                }
                Op::RowScale(a, s) => {
                    let xv = self.nodes[*a].value.clone();
                    let sv = self.nodes[*s].value.clone();
                    let (rows, cols) = xv.dims2();
                    {
                        let da = grad_mut(&mut grads, *a);
                        for i in 0..rows {
                            let f = sv.data()[i];
                            for j in 0..cols {
                                let k = i * cols + j;
                                da[k] = da[k] + g.get(i, j) * f;
                            }
                        }
                    }
                    {
                        let ds = grad_mut(&mut grads, *s);
                        for i in 0..rows {
                            let mut acc = T::zero();
                            for j in 0..cols {
                                acc = acc + g.get(i, j) * xv.get(i, j);
                            }
                            ds[i] = ds[i] + acc;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn grad_mut<T: Scalar>(grads: &mut [Tensor<T>], idx: usize) -> &mut [T] {
    grads[idx].data_mut()
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Numerically stable softmax over the last axis (rows for rank 2).
pub fn softmax_value<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    if cols == 0 {
        return Err(Error::dimension("softmax", "empty rows"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row = if x.rank() == 1 { x.data() } else { x.row(i) };
        let mut max = row[0];
        for v in &row[1..] {
            if *v > max {
                max = *v;
            }
        }
        let mut denom = T::zero();
        let mut exps = Vec::with_capacity(cols);
        for v in row {
            let e = (*v - max).exp();
            denom = denom + e;
            exps.push(e);
        }
        for e in exps {
            data.push(e / denom);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}
