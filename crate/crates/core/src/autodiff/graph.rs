//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` is a single reverse sweep.

use rand::Rng;

use super::tensor::{mm, mm_nt, mm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward pass. Build it, call [`Graph::backward`] once,
/// read gradients with [`Graph::grad`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "add_row")?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(shape_err("add_row", self.value(x).shape(), bs));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let src = self.value(a);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x.max(T::zero())).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax where columns with `attend[j] == false` receive a
    /// logit of −∞ (weight exactly zero).
    pub fn softmax_masked(&mut self, x: Var, attend: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "softmax")?;
        if let Some(mask) = attend {
            if mask.len() != n {
                return Err(shape_err("softmax", &[m, n], &[mask.len()]));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let keep = |j: usize| attend.is_none_or(|a| a[j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                // every column masked: leave the row at zero weight
                continue;
            }
            let mut total = T::zero();
            for j in (0..n).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                total += e;
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v = *v / total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalization, `epsilon` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: T) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm")?;
        for v in [gain, bias] {
            if self.value(v).shape() != [n] {
                return Err(shape_err("layer_norm", &[m, n], self.value(v).shape()));
            }
        }
        let nf = T::of_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + epsilon).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V,d]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "embedding: id {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the listed rows, producing a `[1, d]` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "mean_rows")?;
        if rows.is_empty() {
            return Err(Error::invalid("mean_rows: empty row subset"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!(
                "mean_rows: row {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for &r in rows {
            for (o, &v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of_f64(rows.len() as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![1, n], out)?,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let (m, _) = self.mat_dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != m {
                return Err(shape_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
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
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let (_, n) = self.mat_dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != n {
                return Err(shape_err(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Scales every row to unit L2 norm. Zero rows are an error.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::invalid(format!(
                    "normalize_rows: row {r} has zero norm"
                )));
            }
            for j in 0..n {
                out[r * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::NormalizeRows { x, norms },
            rg,
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`. Rows with `None`
    /// are ignored; at least one row must carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err("cross_entropy", &[m, n], &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every target is ignored"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} out of range for {n} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for r in 0..m {
            let Some(t) = targets[r] else { continue };
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[r * n + j] = e;
                z += e;
            }
            for p in &mut probs[r * n..(r + 1) * n] {
                *p = *p / z;
            }
            total += z.ln() + max - row[t];
        }
        let loss = total / T::of_f64(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of_f64(1.0 / (1.0 - rate));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Smallest |input| over all ReLU nodes, if any. Finite-difference checks
    /// use it to stay away from the kink.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v)))),
                _ => None,
            })
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    /// Gradient of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(&shape, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&mut self, v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.accumulate(v, Tensor::new(shape, data).expect("gradient shape"));
    }

    fn propagate(&mut self, i: usize, grad: &Tensor<T>) {
        let gd = grad.data();
        // Gradients are computed while the node is borrowed, then applied.
        let mut updates: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].requires_grad {
                    updates.push((*a, mm_nt(gd, bv.data(), m, n, k)));
                }
                if self.nodes[b.0].requires_grad {
                    updates.push((*b, mm_tn(av.data(), gd, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        out[r * n + c] = gd[c * m + r];
                    }
                }
                updates.push((*a, out));
            }
            Op::Add(a, b) => {
                updates.push((*a, gd.to_vec()));
                updates.push((*b, gd.to_vec()));
            }
            Op::AddRow(x, b) => {
                let n = node.value.cols();
                let mut gb = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                updates.push((*x, gd.to_vec()));
                updates.push((*b, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                updates.push((*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                updates.push((*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(a, f) => {
                updates.push((*a, gd.iter().map(|&g| g * *f).collect()));
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                updates.push((
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut out = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot: T = ys.iter().zip(gs).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        out[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                updates.push((*a, out));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let m = gd.len() / n;
                let g = self.nodes[gain.0].value.data();
                let nf = T::of_f64(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    let gs = &gd[r * n..(r + 1) * n];
                    let hs = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..n {
                        let dh = gs[j] * g[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hs[j];
                        dg[j] += gs[j] * hs[j];
                        db[j] += gs[j];
                    }
                    for j in 0..n {
                        let dh = gs[j] * g[j];
                        dx[r * n + j] = inv_std[r] / nf * (nf * dh - sum_dh - hs[j] * sum_dh_h);
                    }
                }
                updates.push((*x, dx));
                updates.push((*gain, dg));
                updates.push((*bias, db));
            }
            Op::Embedding { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.cols();
                    let mut out = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in out[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..]) {
                            *o += v;
                        }
                    }
                    updates.push((*table, out));
                }
            }
            Op::MeanRows { x, rows } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.cols();
                let inv = T::one() / T::of_f64(rows.len() as f64);
                let mut out = vec![T::zero(); xv.numel()];
                for &r in rows {
                    for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(gd) {
                        *o += v * inv;
                    }
                }
                updates.push((*x, out));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut out = Vec::with_capacity(m * w);
                    for r in 0..m {
                        out.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    updates.push((*p, out));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    updates.push((*p, gd[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut out = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[r * n + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                }
                updates.push((*x, out));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.nodes[logits.0].value.cols();
                let scale = gd[0] / T::of_f64(*count as f64);
                let mut out = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..n {
                        out[r * n + j] = probs[r * n + j] * scale;
                    }
                    out[r * n + t] -= scale;
                }
                updates.push((*logits, out));
            }
            Op::Dropout { x, mask } => {
                updates.push((*x, gd.iter().zip(mask).map(|(&g, &k)| g * k).collect()));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                updates.push((*x, vec![gd[0]; n]));
            }
        }
        for (v, data) in updates {
            self.accumulate_data(v, data);
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when
    /// `v` is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }
}
