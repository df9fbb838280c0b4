//! Per-pass reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in insertion order, which is also a
//! valid topological order. [`Graph::backward`] walks the nodes in reverse
//! and accumulates adjoints, so shared subexpressions receive the sum of
//! their consumers' gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{lse_unchecked, softmax, Tensor};
use crate::crf;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    LogSumExp(Var),
    RowLogSumExp(Var),
    Softmax(Var),
    MaxPoolRows { input: Var, argmax: Vec<usize> },
    GatherRows { table: Var, rows: Vec<Option<usize>> },
    Gather { input: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Concat(Vec<Var>),
    SqDist(Var, Var),
    Sum(Var),
    Mean(Var),
    Dropout { input: Var, mask: Vec<f64> },
    CrfLogPartition { emissions: Var, transitions: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward pass. Build it, call
/// [`Graph::backward`] once or more, then drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a row vector (length `n`) to every row of an `m×n` matrix.
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var> {
        let m = self.value(matrix);
        let r = self.value(row);
        if r.len() != m.cols() {
            return Err(Error::shape(format!(
                "add_row: matrix {:?} with row {:?}",
                m.shape(),
                r.shape()
            )));
        }
        let cols = m.cols();
        let mut value = m.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % cols];
        }
        Ok(self.push(value, Op::AddRow(matrix, row), &[matrix, row]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a), &[a])
    }

    /// Log-sum-exp over every element, giving a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(lse_unchecked(self.value(a).data()));
        self.push(value, Op::LogSumExp(a), &[a])
    }

    /// Log-sum-exp of each row of an `m×n` matrix, giving a length-`m` vector.
    pub fn row_log_sum_exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|i| lse_unchecked(t.row(i))).collect();
        let value = Tensor::vector(data);
        self.push(value, Op::RowLogSumExp(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).flat_map(|i| softmax(t.row(i))).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Column-wise max over rows `start..=end`, giving a `1×cols` row.
    /// Ties go to the lowest row index.
    pub fn max_pool_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end >= t.rows() {
            return Err(Error::invalid(format!(
                "max_pool_rows: rows {start}..={end} out of range for {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut argmax = vec![start; cols];
        let mut best = t.row(start).to_vec();
        for i in start + 1..=end {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::matrix(1, cols, best)?;
        Ok(self.push(value, Op::MaxPoolRows { input: a, argmax }, &[a]))
    }

    /// Stacks rows of `table`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            match r {
                Some(i) if *i < t.rows() => data.extend_from_slice(t.row(*i)),
                Some(i) => {
                    return Err(Error::invalid(format!(
                        "gather_rows: row {i} out of range for {} rows",
                        t.rows()
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(value, Op::GatherRows { table, rows: rows.to_vec() }, &[table]))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            match t.data().get(i) {
                Some(v) => data.push(*v),
                None => return Err(Error::invalid(format!("gather index {i} out of range"))),
            }
        }
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Gather { input: a, indices: indices.to_vec() }, &[a]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.first_value(parts)?.rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation of matrices (or row vectors) with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.first_value(parts)?.cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let data: Vec<f64> =
            parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
        let value = Tensor::matrix(data.len() / cols, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Flattening concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.first_value(parts)?;
        let data: Vec<f64> =
            parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    fn first_value(&self, parts: &[Var]) -> Result<&Tensor> {
        parts
            .first()
            .map(|p| self.value(*p))
            .ok_or_else(|| Error::invalid("concatenation of zero parts"))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`m×d`)
    /// and `b` (`k×d`), giving `m×k`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(format!("sq_dist {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let (m, k) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                data.push(super::tensor::squared_distance(ta.row(i), tb.row(j)));
            }
        }
        let value = Tensor::matrix(m, k, data)?;
        Ok(self.push(value, Op::SqDist(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1 / (1 - p)`. The mask depends only on `seed`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input: a, mask }, &[a]))
    }

    /// Log-partition of a linear-chain CRF. `emissions` is `n×L`;
    /// `transitions` is `(L+2)×(L+2)` with START at index `L` and STOP at
    /// `L+1`.
    pub fn crf_log_partition(&mut self, emissions: Var, transitions: Var) -> Result<Var> {
        let log_z = crf::log_partition(self.value(emissions), self.value(transitions))?;
        Ok(self.push(
            Tensor::scalar(log_z),
            Op::CrfLogPartition { emissions, transitions },
            &[emissions, transitions],
        ))
    }

    /// Reverse pass from a single-element output node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = up.matmul(&tb.transpose())?.with_shape(ta.shape().to_vec());
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = ta.transpose().matmul(up)?.with_shape(tb.shape().to_vec());
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, up.zip_map(tb, |g, v| g * v)?);
                self.accumulate(grads, *b, up.zip_map(ta, |g, v| g * v)?);
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, up.map(|g| g * factor)),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, up.with_shape(shape));
            }
            Op::AddRow(m, r) => {
                self.accumulate(grads, *m, up.clone());
                if self.requires_grad(*r) {
                    let tr = self.value(*r);
                    let cols = up.cols();
                    let mut d = vec![0.0; cols];
                    for (i, g) in up.data().iter().enumerate() {
                        d[i % cols] += g;
                    }
                    self.accumulate(grads, *r, Tensor::new(tr.shape().to_vec(), d)?);
                }
            }
            Op::Relu(a) => {
                let d = up.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, up.zip_map(y, |g, e| g * e)?),
            Op::Ln(a) => self.accumulate(grads, *a, up.zip_map(self.value(*a), |g, x| g / x)?),
            Op::Sqrt(a) => self.accumulate(grads, *a, up.zip_map(y, |g, s| g / (2.0 * s))?),
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let g = up.data()[0];
                let p = softmax(ta.data());
                let d = Tensor::new(ta.shape().to_vec(), p.into_iter().map(|v| v * g).collect())?;
                self.accumulate(grads, *a, d);
            }
            Op::RowLogSumExp(a) => {
                let ta = self.value(*a);
                let mut d = Vec::with_capacity(ta.len());
                for i in 0..ta.rows() {
                    let g = up.data()[i];
                    d.extend(softmax(ta.row(i)).into_iter().map(|v| v * g));
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &up.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::MaxPoolRows { input, argmax } => {
                let ti = self.value(*input);
                let cols = ti.cols();
                let mut d = Tensor::zeros(ti.shape());
                for (j, &row) in argmax.iter().enumerate() {
                    d.data_mut()[row * cols + j] += up.data()[j];
                }
                self.accumulate(grads, *input, d);
            }
            Op::GatherRows { table, rows } => {
                if self.requires_grad(*table) {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let mut d = Tensor::zeros(tt.shape());
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(i) = r {
                            let src = &up.data()[k * cols..(k + 1) * cols];
                            for (dst, g) in d.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                                *dst += g;
                            }
                        }
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::Gather { input, indices } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                for (k, &i) in indices.iter().enumerate() {
                    d.data_mut()[i] += up.data()[k];
                }
                self.accumulate(grads, *input, d);
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let c = tp.cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(tp.len());
                        for i in 0..rows {
                            d.extend_from_slice(&up.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) | Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    if self.requires_grad(*p) {
                        let d = up.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, dim) = (ta.rows(), tb.rows(), ta.cols());
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for i in 0..m {
                    for j in 0..k {
                        let g = up.data()[i * k + j];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..dim {
                            let diff = 2.0 * g * (ta.row(i)[c] - tb.row(j)[c]);
                            da[i * dim + c] += diff;
                            db[j * dim + c] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Sum(a) => {
                let g = up.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let g = up.data()[0] / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), g));
            }
            Op::Dropout { input, mask } => {
                let d = up.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *input, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::CrfLogPartition { emissions, transitions } => {
                let g = up.data()[0];
                let (node_marg, trans_marg) =
                    crf::marginals(self.value(*emissions), self.value(*transitions))?;
                self.accumulate(grads, *emissions, node_marg.map(|v| v * g));
                self.accumulate(grads, *transitions, trans_marg.map(|v| v * g));
            }
        }
        Ok(())
    }
}
