use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{kernels, Tensor};
use crate::error::{Error, Result};

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

fn fresh_epoch() -> u64 {
    NEXT_EPOCH.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
///
/// A handle is only valid for the tape epoch it was created in; `backward`
/// clears the tape and starts a new epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    epoch: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Sqrt(usize),
    Div(usize, usize),
    CenterColumns(usize),
    NormalizeRows {
        input: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: usize,
        target: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![a, b],
            Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Sqrt(a)
            | Op::CenterColumns(a) => vec![a],
            Op::NormalizeRows { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Mse { pred, .. } => vec![pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    epoch: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    epoch: u64,
    leaves: BTreeMap<usize, Vec<f64>>,
    nodes_visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.epoch != self.epoch {
            return None;
        }
        self.leaves.get(&var.index).map(Vec::as_slice)
    }

    /// Writes the gradient of `var` into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        tensor.set_grad(g)
    }

    pub fn nodes_visited(&self) -> usize {
        self.nodes_visited
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            epoch: fresh_epoch(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of leaves that will receive gradients.
    pub fn trainable_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    /// Handles of every recorded node, in recording order.
    pub fn vars(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .map(|index| Var {
                index,
                epoch: self.epoch,
            })
            .collect()
    }

    pub fn is_leaf(&self, var: Var) -> Result<bool> {
        Ok(matches!(self.node(var)?.op, Op::Leaf))
    }

    /// Parents of a recorded node, for structural inspection.
    pub fn parents(&self, var: Var) -> Result<Vec<Var>> {
        let i = self.check(var)?;
        Ok(self.nodes[i]
            .op
            .parents()
            .into_iter()
            .map(|index| Var {
                index,
                epoch: self.epoch,
            })
            .collect())
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        let i = self.check(var)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.detach(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detach(), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            epoch: self.epoch,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.epoch != self.epoch || var.index >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "variable {} does not belong to the active tape",
                var.index
            )));
        }
        Ok(var.index)
    }

    fn node(&self, var: Var) -> Result<&Node> {
        let i = self.check(var)?;
        Ok(&self.nodes[i])
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Result<Var> {
        let rg = self.node(a)?.requires_grad;
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Result<Var> {
        let rg = self.node(a)?.requires_grad || self.node(b)?.requires_grad;
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.value, &self.node(b)?.value);
        if sa.shape() != sb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.shape().to_vec(),
                right: sb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        self.binary(a, b, value, Op::MatMul(a.index, b.index))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (r, c) = t.require_matrix("transpose")?;
        let value = Tensor::matrix(c, r, kernels::transpose(t.data(), r, c))?;
        self.unary(a, value, Op::Transpose(a.index))
    }

    /// `x[n×m] + bias[m]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (n, m) = xt.require_matrix("add_bias")?;
        if bt.len() != m {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let mut data = xt.data().to_vec();
        for i in 0..n {
            for (v, b) in data[i * m..(i + 1) * m].iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        self.binary(x, bias, value, Op::AddBias(x.index, bias.index))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y));
        Tensor::new(ta.shape().to_vec(), data.collect())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let ta = &self.node(a)?.value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y)?;
        self.binary(a, b, value, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y)?;
        self.binary(a, b, value, Op::Sub(a.index, b.index))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y)?;
        self.binary(a, b, value, Op::Mul(a.index, b.index))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.map(a, |x| x * factor)?;
        self.unary(a, value, Op::Scale(a.index, factor))
    }

    /// Elementwise `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 })?;
        self.unary(a, value, Op::Relu(a.index))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(kernels::sum(self.node(a)?.value.data()));
        self.unary(a, value, Op::Sum(a.index))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let value = Tensor::scalar(kernels::sum(t.data()) / t.len() as f64);
        self.unary(a, value, Op::Mean(a.index))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        if !t.is_scalar() || t.item() < 0.0 {
            return Err(Error::InvalidTensor("sqrt expects a nonnegative scalar".into()));
        }
        let value = Tensor::scalar(t.item().sqrt());
        self.unary(a, value, Op::Sqrt(a.index))
    }

    /// Scalar division.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if !ta.is_scalar() || !tb.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "div",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(ta.item() / tb.item());
        self.binary(a, b, value, Op::Div(a.index, b.index))
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (n, d) = t.require_matrix("center_columns")?;
        let value = Tensor::matrix(n, d, kernels::center_columns(t.data(), n, d))?;
        self.unary(a, value, Op::CenterColumns(a.index))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (n, d) = t.require_matrix("l2_normalize_rows")?;
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut data[i * d..(i + 1) * d];
            let norm = kernels::dot(row, row).sqrt();
            if !(norm >= crate::EPS_NORM) {
                return Err(Error::DegenerateRow { row: i });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::matrix(n, d, data)?;
        self.unary(
            a,
            value,
            Op::NormalizeRows {
                input: a.index,
                norms,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits[n×c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, labels, false)
    }

    /// Cross-entropy where entry `(i, i)` is excluded from each row's
    /// normalizer. Used for contrastive objectives over a similarity matrix.
    pub fn masked_self_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, targets, true)
    }

    fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask_diagonal: bool) -> Result<Var> {
        let t = &self.node(logits)?.value;
        let (n, c) = t.require_matrix("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if mask_diagonal && n != c {
            return Err(Error::ShapeMismatch {
                op: "masked_self_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![n, n],
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c || (mask_diagonal && label == i) {
                return Err(Error::LabelOutOfRange {
                    row: i,
                    label,
                    classes: c,
                });
            }
            let row = t.row(i);
            let live = |j: usize| !(mask_diagonal && j == i);
            let max = (0..c)
                .filter(|&j| live(j))
                .fold(f64::NEG_INFINITY, |m, j| m.max(row[j]));
            let mut denom = 0.0;
            for j in (0..c).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            total += denom.ln() + max - row[label];
        }
        let value = Tensor::scalar(total / n as f64);
        self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = &self.node(pred)?.value;
        if t.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left: t.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let sq = t
            .data()
            .iter()
            .zip(target.data())
            .fold(0.0, |acc, (p, q)| acc + (p - q) * (p - q));
        let value = Tensor::scalar(sq / t.len() as f64);
        self.unary(
            pred,
            value,
            Op::Mse {
                pred: pred.index,
                target: target.data().to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Clears the tape afterwards, so every
    /// handle issued before this call becomes invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let node = &self.nodes[li];
        if !node.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss is detached from every trainable leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        let mut visited = 0;
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    leaves.insert(i, g);
                }
                continue;
            }
            for (parent, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let grads = Gradients {
            epoch: self.epoch,
            leaves,
            nodes_visited: visited,
        };
        self.nodes.clear();
        self.epoch = fresh_epoch();
        Ok(grads)
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                let mut out = Vec::new();
                if needs(a) {
                    out.push((a, kernels::matmul_a_bt(g, val(b).data(), m, n, k)));
                }
                if needs(b) {
                    out.push((b, kernels::matmul_at_b(val(a).data(), g, m, k, n)));
                }
                out
            }
            &Op::Transpose(a) => {
                // g has the transposed shape (cols × rows of a)
                let (r, c) = (val(a).rows(), val(a).cols());
                vec![(a, kernels::transpose(g, c, r))]
            }
            &Op::AddBias(x, b) => {
                let (n, m) = (val(x).rows(), val(x).cols());
                let mut gb = vec![0.0; m];
                for row in 0..n {
                    for (acc, v) in gb.iter_mut().zip(&g[row * m..(row + 1) * m]) {
                        *acc += v;
                    }
                }
                vec![(x, g.to_vec()), (b, gb)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(a, f) => vec![(a, g.iter().map(|v| v * f).collect())],
            &Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(a, ga)]
            }
            &Op::Sum(a) => vec![(a, vec![g[0]; val(a).len()])],
            &Op::Mean(a) => {
                let n = val(a).len();
                vec![(a, vec![g[0] / n as f64; n])]
            }
            &Op::Sqrt(a) => vec![(a, vec![g[0] / (2.0 * node.value.item())])],
            &Op::Div(a, b) => {
                let (x, y) = (val(a).item(), val(b).item());
                vec![(a, vec![g[0] / y]), (b, vec![-g[0] * x / (y * y)])]
            }
            &Op::CenterColumns(a) => {
                let (n, d) = (val(a).rows(), val(a).cols());
                vec![(a, kernels::center_columns(g, n, d))]
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let d = y.cols();
                let mut ga = vec![0.0; g.len()];
                for (row, norm) in norms.iter().enumerate() {
                    let yr = y.row(row);
                    let gr = &g[row * d..(row + 1) * d];
                    let proj = kernels::dot(yr, gr);
                    for j in 0..d {
                        ga[row * d + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                vec![(*input, ga)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                ..
            } => {
                let c = val(*logits).cols();
                let n = labels.len() as f64;
                let mut ga: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (row, &label) in labels.iter().enumerate() {
                    ga[row * c + label] -= g[0] / n;
                }
                vec![(*logits, ga)]
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let scale = 2.0 * g[0] / p.len() as f64;
                let ga = p.iter().zip(target).map(|(x, t)| scale * (x - t)).collect();
                vec![(*pred, ga)]
            }
        };
        Ok(out)
    }
}
