use std::sync::Arc;

use super::kernels;
use super::{Mask, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        loss_mask: Vec<bool>,
        count: usize,
    },
    Gather {
        x: Var,
        picks: Vec<(usize, usize)>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse. Inputs always precede the nodes that use them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it received no gradient.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the tensor's own gradient buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a shared tensor as a leaf without copying it.
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf: gradients will be reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta);
        let (k2, n) = matrix_dims(tb);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.values(), tb.values(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta);
        let (n, k2) = matrix_dims(tb);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let out = kernels::matmul_nt(ta.values(), tb.values(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        Ok(ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.len() != cols {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.values()) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.values().iter().map(|&v| f(v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Minimum(a, b), rg))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut out = vec![0.0; tx.len()];
        let mut stats = Vec::with_capacity(tx.rows());
        for (row, o) in tx.values().chunks(cols).zip(out.chunks_mut(cols)) {
            stats.push(kernels::layer_norm_row(row, tg.values(), tb.values(), o));
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, stats },
            rg,
        ))
    }

    /// Looks up rows of `table [V×D]`, producing `[ids.len()×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = matrix_dims(tt);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), cols, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = matrix_dims(tx);
        if mask.rows() != rows || mask.cols() != cols {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                left: tx.shape().to_vec(),
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let mut out = vec![0.0; tx.len()];
        for (r, (row, o)) in tx.values().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            if !kernels::masked_softmax_row(row, mask.row(r), o) {
                return Err(TensorError::DegenerateRow { row: r });
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.values().chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::log_softmax_row(row, o);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood of `targets` over rows where `loss_mask`
    /// is set. Rows outside the mask contribute neither value nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = matrix_dims(tl);
        for (op, len) in [("cross_entropy targets", targets.len()), ("cross_entropy mask", loss_mask.len())] {
            if len != rows {
                return Err(TensorError::Length {
                    op,
                    expected: rows,
                    got: len,
                });
            }
        }
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut total = 0.0;
        let mut scratch = vec![0.0; cols];
        for (r, row) in tl.values().chunks(cols).enumerate() {
            if !loss_mask[r] {
                continue;
            }
            if targets[r] >= cols {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: targets[r],
                    size: cols,
                });
            }
            kernels::log_softmax_row(row, &mut scratch);
            total -= scratch[targets[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                loss_mask: loss_mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Picks `x[row, col]` for each pair, producing a vector.
    pub fn gather(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = matrix_dims(tx);
        let mut out = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            if r >= rows || c >= cols {
                return Err(TensorError::Index {
                    op: "gather",
                    index: r * cols + c,
                    size: tx.len(),
                });
            }
            out.push(tx.at(r, c));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out)?,
            Op::Gather {
                x,
                picks: picks.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, cols) = matrix_dims(tx);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(tx.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), cols, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).values().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mean = tx.values().iter().sum::<f64>() / tx.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(mean), Op::Mean(x), rg))
    }

    /// Reverse-mode pass from a scalar `loss`. Each recorded node is visited
    /// once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(TensorError::NotScalar(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(ta);
                let n = tb.cols();
                if wants(*a) {
                    let da = kernels::matmul_nt(dy, tb.values(), m, n, k);
                    add_into(&mut grads[a.0], m * k, |g| {
                        for (g, d) in g.iter_mut().zip(&da) {
                            *g += d;
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], k * n, |g| {
                        kernels::matmul_tn_acc(ta.values(), dy, m, k, n, g)
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(ta);
                let n = tb.rows();
                if wants(*a) {
                    add_into(&mut grads[a.0], m * k, |g| {
                        kernels::matmul_acc(dy, tb.values(), m, n, k, g)
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], n * k, |g| {
                        kernels::matmul_tn_acc(dy, ta.values(), m, n, k, g)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(&mut grads[a.0], dy.len(), |g| {
                        for (g, d) in g.iter_mut().zip(dy) {
                            *g += d;
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], dy.len(), |g| {
                        for (g, d) in g.iter_mut().zip(dy) {
                            *g += sign * d;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    add_into(&mut grads[a.0], dy.len(), |g| {
                        for ((g, d), bv) in g.iter_mut().zip(dy).zip(tb.values()) {
                            *g += d * bv;
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], dy.len(), |g| {
                        for ((g, d), av) in g.iter_mut().zip(dy).zip(ta.values()) {
                            *g += d * av;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*x).cols();
                if wants(*x) {
                    add_into(&mut grads[x.0], dy.len(), |g| {
                        for (g, d) in g.iter_mut().zip(dy) {
                            *g += d;
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[bias.0], cols, |g| {
                        for row in dy.chunks(cols) {
                            for (g, d) in g.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += c * d;
                    }
                });
            }
            Op::AddScalar(x) => {
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::Exp(x) => {
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((g, d), yv) in g.iter_mut().zip(dy).zip(y.values()) {
                        *g += d * yv;
                    }
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((g, d), xv) in g.iter_mut().zip(dy).zip(tx.values()) {
                        *g += d / xv;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((g, d), &xv) in g.iter_mut().zip(dy).zip(tx.values()) {
                        *g += d * kernels::gelu_grad(xv);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.value(*x);
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((g, d), &xv) in g.iter_mut().zip(dy).zip(tx.values()) {
                        if xv >= *lo && xv <= *hi {
                            *g += d;
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta.values().iter().zip(tb.values()).map(|(x, y)| x <= y).collect();
                if wants(*a) {
                    add_into(&mut grads[a.0], dy.len(), |g| {
                        for ((g, d), &pa) in g.iter_mut().zip(dy).zip(&pick_a) {
                            if pa {
                                *g += d;
                            }
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], dy.len(), |g| {
                        for ((g, d), &pa) in g.iter_mut().zip(dy).zip(&pick_a) {
                            if !pa {
                                *g += d;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let cols = tx.cols();
                let n = cols as f64;
                let mut dx = vec![0.0; tx.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for (r, ((xr, dyr), dxr)) in tx
                    .values()
                    .chunks(cols)
                    .zip(dy.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let (mean, rstd) = stats[r];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = dyr[j] * tg.values()[j];
                        dgamma[j] += dyr[j] * xhat[j];
                        dbeta[j] += dyr[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat[j];
                    }
                    for j in 0..cols {
                        dxr[j] = rstd * (dxhat[j] - sum_d / n - xhat[j] * sum_dx / n);
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if wants(v) {
                        add_into(&mut grads[v.0], d.len(), |g| {
                            for (g, dv) in g.iter_mut().zip(&d) {
                                *g += dv;
                            }
                        });
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.value(*table).cols();
                add_into(&mut grads[table.0], len_of(*table), |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &dy[i * cols..(i + 1) * cols];
                        for (g, d) in g[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let cols = y.cols();
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((gr, yr), dr) in g.chunks_mut(cols).zip(y.values().chunks(cols)).zip(dy.chunks(cols)) {
                        let inner = kernels::dot(yr, dr);
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (dv - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                add_into(&mut grads[x.0], dy.len(), |g| {
                    for ((gr, yr), dr) in g.chunks_mut(cols).zip(y.values().chunks(cols)).zip(dy.chunks(cols)) {
                        let total: f64 = dr.iter().sum();
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += dv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                loss_mask,
                count,
            } => {
                let tl = self.value(*logits);
                let cols = tl.cols();
                let scale = dy[0] / *count as f64;
                let mut probs = vec![0.0; cols];
                add_into(&mut grads[logits.0], tl.len(), |g| {
                    for (r, (row, gr)) in tl.values().chunks(cols).zip(g.chunks_mut(cols)).enumerate() {
                        if !loss_mask[r] {
                            continue;
                        }
                        kernels::softmax_row(row, &mut probs);
                        for (j, (g, p)) in gr.iter_mut().zip(&probs).enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *g += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Gather { x, picks } => {
                let cols = self.value(*x).cols();
                add_into(&mut grads[x.0], len_of(*x), |g| {
                    for (&(r, c), d) in picks.iter().zip(dy) {
                        g[r * cols + c] += d;
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let cols = self.value(*x).cols();
                add_into(&mut grads[x.0], len_of(*x), |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (g, d) in g[r * cols..(r + 1) * cols].iter_mut().zip(&dy[i * cols..(i + 1) * cols]) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                add_into(&mut grads[x.0], len_of(*x), |g| {
                    for g in g.iter_mut() {
                        *g += dy[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                add_into(&mut grads[x.0], n, |g| {
                    for g in g.iter_mut() {
                        *g += dy[0] / n as f64;
                    }
                });
            }
        }
    }
}
