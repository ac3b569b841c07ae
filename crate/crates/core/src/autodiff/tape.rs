use super::tensor::matmul_raw;
use super::{Tensor, TensorError, LOG_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    /// Natural log; inputs are clamped at [`LOG_EPS`].
    Log,
    /// Natural log that rejects non-positive inputs.
    LogStrict,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { x: Var, clamped: bool },
    SoftmaxRows(Var),
    GradReverse(Var, f64),
    StopGradient,
    Sum(Var),
    RowSums(Var),
    SliceRows { x: Var, start: usize },
    ClampMax(Var, f64),
    WeightedCrossEntropy { probs: Var, targets: Tensor, weights: Vec<f64> },
    WeightedBce { probs: Var, labels: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a single reverse sweep suffices for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` is unreachable from the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    /// Adds a `[m]` or `[1, m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !tx.is_matrix() || tb.numel() != tx.cols() {
            return Err(mismatch("add_bias", tx, tb));
        }
        let m = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % m])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, LOG_EPS))`; clamped entries receive no gradient.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_EPS).ln(), Op::Log { x, clamped: true })
    }

    /// Natural log without clamping.
    pub fn log_strict(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        Ok(self.unary(x, f64::ln, Op::Log { x, clamped: false }))
    }

    /// Dispatches a unary or binary elementwise kind.
    pub fn elementwise(
        &mut self,
        kind: Elementwise,
        x: Var,
        y: Option<Var>,
    ) -> Result<Var, TensorError> {
        let need_y = || y.ok_or(TensorError::MissingOperand);
        Ok(match kind {
            Elementwise::Add => self.add(x, need_y()?)?,
            Elementwise::Sub => self.sub(x, need_y()?)?,
            Elementwise::Mul => self.mul(x, need_y()?)?,
            Elementwise::Scale(c) => self.scale(x, c),
            Elementwise::Relu => self.relu(x),
            Elementwise::Sigmoid => self.sigmoid(x),
            Elementwise::Log => self.log(x),
            Elementwise::LogStrict => self.log_strict(x)?,
            Elementwise::Exp => self.exp(x),
        })
    }

    /// Row-wise softmax of an `[n, c]` matrix, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(TensorError::NotMatrix {
                op: "softmax_rows",
                shape: tx.shape().to_vec(),
            });
        }
        let out = softmax_rows(tx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Identity on the forward pass; scales the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var, TensorError> {
        if !(lambda >= 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "gradient reversal lambda must be non-negative, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse(x, lambda), rg))
    }

    /// Copies `x` as a constant: no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `[n, m]` to `[n, 1]` row sums.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data: Vec<f64> = (0..tx.rows()).map(|i| tx.row(i).iter().sum()).collect();
        let out = Tensor::matrix(tx.rows(), 1, data).expect("row sums");
        let rg = self.rg(x);
        self.push(out, Op::RowSums(x), rg)
    }

    /// Rows `start..end` of a matrix (or entries of a vector).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if start >= end || end > tx.rows() {
            return Err(TensorError::InvalidArgument(format!(
                "row slice {start}..{end} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, tx.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// `min(x, cap)` elementwise; capped entries receive no gradient.
    pub fn clamp_max(&mut self, x: Var, cap: f64) -> Var {
        self.unary(x, |v| v.min(cap), Op::ClampMax(x, cap))
    }

    /// `(1/n) * sum_i w_i * (-sum_c t_ic * ln p_ic)` with `p` clamped at [`LOG_EPS`].
    ///
    /// `targets` and `weights` are constants.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        targets: &Tensor,
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let p = self.value(probs);
        if p.shape() != targets.shape() || !p.is_matrix() {
            return Err(mismatch("weighted_cross_entropy", p, targets));
        }
        if weights.len() != p.rows() {
            return Err(TensorError::LengthMismatch {
                op: "weighted_cross_entropy",
                expected: p.rows(),
                got: weights.len(),
            });
        }
        let n = p.rows() as f64;
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row: f64 = p
                .row(i)
                .iter()
                .zip(targets.row(i))
                .filter(|(_, &t)| t != 0.0)
                .map(|(&pv, &t)| -t * pv.max(LOG_EPS).ln())
                .sum();
            total += w * row;
        }
        let rg = self.rg(probs);
        let op = Op::WeightedCrossEntropy {
            probs,
            targets: targets.clone(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n), op, rg))
    }

    /// `(1/n) * sum_i w_i * (-y_i ln p_i - (1 - y_i) ln(1 - p_i))` with `p`
    /// clamped to `[LOG_EPS, 1 - LOG_EPS]`.
    pub fn weighted_binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: &[f64],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let p = self.value(probs);
        let n = p.numel();
        if p.cols() != 1 || labels.len() != n || weights.len() != n {
            return Err(TensorError::LengthMismatch {
                op: "weighted_binary_cross_entropy",
                expected: n,
                got: if labels.len() != n { labels.len() } else { weights.len() },
            });
        }
        let mut total = 0.0;
        for i in 0..n {
            let pc = p.data()[i].clamp(LOG_EPS, 1.0 - LOG_EPS);
            let y = labels[i];
            total += weights[i] * (-y * pc.ln() - (1.0 - y) * (1.0 - pc).ln());
        }
        let rg = self.rg(probs);
        let op = Op::WeightedBce {
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, nn) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // g [m,n] * b^T [n,k]
                    let bt = tb.transpose();
                    let da = matmul_raw(g, bt.data(), m, nn, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if self.rg(*b) {
                    let at = ta.transpose();
                    let db = matmul_raw(at.data(), g, k, m, nn);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (o, gv) in s.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (o, gv) in s.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    let m = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % m] += gv;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log { x, clamped } => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if !clamped || vx[i] > LOG_EPS {
                            s[i] += g[i] / vx[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |s| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GradReverse(x, lambda) => acc(*x, &mut |s| {
                for (o, gv) in s.iter_mut().zip(g) {
                    *o += -lambda * gv;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| {
                for o in s.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::RowSums(x) => {
                let m = self.nodes[x.0].value.cols();
                acc(*x, &mut |s| {
                    for (i, o) in s.iter_mut().enumerate() {
                        *o += g[i / m];
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let off = start * self.nodes[x.0].value.cols();
                acc(*x, &mut |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::ClampMax(x, cap) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] < *cap {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::WeightedCrossEntropy {
                probs,
                targets,
                weights,
            } => {
                let p = &self.nodes[probs.0].value;
                let c = p.cols();
                let n = p.rows() as f64;
                acc(*probs, &mut |s| {
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let t = targets.data()[i * c + j];
                            let pv = p.data()[i * c + j];
                            if t != 0.0 && pv > LOG_EPS {
                                s[i * c + j] += g[0] * (-w * t / (n * pv));
                            }
                        }
                    }
                });
            }
            Op::WeightedBce {
                probs,
                labels,
                weights,
            } => {
                let p = val(*probs);
                let n = p.len() as f64;
                acc(*probs, &mut |s| {
                    for i in 0..s.len() {
                        let pv = p[i];
                        if pv > LOG_EPS && pv < 1.0 - LOG_EPS {
                            let y = labels[i];
                            let d = -y / pv + (1.0 - y) / (1.0 - pv);
                            s[i] += g[0] * weights[i] * d / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Untracked row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
