//! Dynamic tape: every op appends a node, so node order is already a topological order
//! and backprop is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{MapexError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    SumAll(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { x: Var, r0: usize, c0: usize },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    NormalizeSum(Var),
    MseMasked { pred: Var, diff: Vec<f64>, mask: Vec<f64>, denom: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Compute graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    param_nodes: HashMap<(u64, ParamId), Var>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (input or parameter) node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.key(), id);
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_nodes.insert(key, v);
        v
    }

    /// Adds the gradients held by parameter leaves into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&(key, id), &v) in &self.param_nodes {
            if key != store.key() {
                continue;
            }
            if let Some(g) = self.leaf_grads.get(&v.0) {
                for (acc, x) in store.grad_mut(id).data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    fn matrix2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(MapexError::dim(format!("{what}: expected 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix2(a, "matmul lhs")?;
        let (k2, c) = self.matrix2(b, "matmul rhs")?;
        if k != k2 {
            return Err(MapexError::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; r * c];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MapexError::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix2(a, "add_row")?;
        if self.value(row).numel() != c {
            return Err(MapexError::dim(format!(
                "add_row: row of {} elements for {c} columns",
                self.value(row).numel()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let rv = self.value(row).data();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(a, row), rg))
    }

    /// `x·W + b` for `x: n×in`, `W: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * s).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(MapexError::dim("scale_by: scale must hold one element"));
        }
        let sv = self.value(s).item();
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * sv).collect(),
        )?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn axis_split(&self, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if axis >= s.len() {
            return Err(MapexError::dim(format!("axis {axis} out of range for shape {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Numerically stable softmax along `axis` (per-slice max is subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[at(a)] /= sum;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(MapexError::Contract("layer_norm eps must be positive".into()));
        }
        let (r, c) = self.value(x).as_matrix();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(MapexError::dim("layer_norm: gamma/beta size must match last dim"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = o * len * inner + a * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, outer, len, inner }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MapexError::dim("concat_rows: no inputs"));
        }
        let c = self.matrix2(parts[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.matrix2(p, "concat_rows")?;
            if pc != c {
                return Err(MapexError::dim(format!("concat_rows: {pc} vs {c} columns")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MapexError::dim("concat_cols: no inputs"));
        }
        let r = self.matrix2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix2(p, "concat_cols")?;
            if pr != r {
                return Err(MapexError::dim(format!("concat_cols: {pr} vs {r} rows")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rectangular sub-block `[r0..r0+nr, c0..c0+nc]` of a matrix.
    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (r, c) = self.matrix2(x, "slice")?;
        if r0 + nr > r || c0 + nc > c {
            return Err(MapexError::dim(format!(
                "slice [{r0}+{nr}, {c0}+{nc}] outside {r}x{c}"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&src[i * c + c0..i * c + c0 + nc]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![nr, nc], data)?, Op::Slice { x, r0, c0 }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(MapexError::dim(format!("gather_rows: index {bad} >= {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![idx.len(), c], data)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix2(x, "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(MapexError::dim(format!("gather_cols: index {bad} >= {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(src[i * c + j]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, idx.len()], data)?, Op::GatherCols(x, idx.to_vec()), rg))
    }

    /// Divides each row (last axis) by its sum.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).as_matrix();
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let s: f64 = src[i * c..(i + 1) * c].iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(MapexError::Numeric("normalize_sum: row sum is zero".into()));
            }
            for j in 0..c {
                data[i * c + j] = src[i * c + j] / s;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizeSum(x), rg))
    }

    /// `Σ mask·(pred−target)² / Σ mask`; `target` and `mask` are constants.
    pub fn mse_masked(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(MapexError::dim(format!(
                "mse_masked: pred {:?}, target {:?}, mask {:?}",
                p.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        let denom: f64 = mask.data().iter().sum();
        if denom <= 0.0 {
            return Err(MapexError::DegenerateMask);
        }
        let diff: Vec<f64> = p.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff
            .iter()
            .zip(mask.data())
            .map(|(d, m)| m * d * d)
            .sum::<f64>()
            / denom;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseMasked { pred, diff, mask: mask.data().to_vec(), denom },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits: n×C` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(MapexError::dim(format!("cross_entropy: {} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MapexError::dim(format!("cross_entropy: label {bad} >= {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / sum;
            }
            loss -= row[labels[i]] - max - sum.ln();
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MapexError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph { nodes, leaf_grads, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr) => {
                    grad_slot(&mut grads, nodes, $v)
                };
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    let g = leaf_grads.entry(i).or_insert_with(|| vec![0.0; go.len()]);
                    for (a, b) in g.iter_mut().zip(&go) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (r, k) = nodes[a.0].value.as_matrix();
                    let c = nodes[b.0].value.shape()[1];
                    let bv = nodes[b.0].value.data();
                    let av = nodes[a.0].value.data();
                    if let Some(ga) = acc!(*a) {
                        matmul_bt_acc(&go, bv, ga, r, c, k);
                    }
                    if let Some(gb) = acc!(*b) {
                        matmul_at_acc(av, &go, gb, r, k, c);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(g) = acc!(v) {
                            add_into(g, &go);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(g) = acc!(*a) {
                        add_into(g, &go);
                    }
                    if let Some(g) = acc!(*b) {
                        for (x, y) in g.iter_mut().zip(&go) {
                            *x -= y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(g) = acc!(*a) {
                        for ((x, y), z) in g.iter_mut().zip(&go).zip(bv) {
                            *x += y * z;
                        }
                    }
                    if let Some(g) = acc!(*b) {
                        for ((x, y), z) in g.iter_mut().zip(&go).zip(av) {
                            *x += y * z;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(g) = acc!(*a) {
                        add_into(g, &go);
                    }
                    if let Some(g) = acc!(*row) {
                        let c = g.len();
                        for chunk in go.chunks(c) {
                            add_into(g, chunk);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(g) = acc!(*a) {
                        for (x, y) in g.iter_mut().zip(&go) {
                            *x += s * y;
                        }
                    }
                }
                Op::ScaleBy(a, s) => {
                    let sv = nodes[s.0].value.item();
                    let av = nodes[a.0].value.data();
                    if let Some(g) = acc!(*a) {
                        for (x, y) in g.iter_mut().zip(&go) {
                            *x += sv * y;
                        }
                    }
                    if let Some(g) = acc!(*s) {
                        g[0] += go.iter().zip(av).map(|(y, x)| y * x).sum::<f64>();
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[a.0].value.as_matrix();
                    if let Some(g) = acc!(*a) {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += go[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(g) = acc!(*a) {
                        add_into(g, &go);
                    }
                }
                Op::Softmax { x, outer, len, inner } => {
                    let y = node.value.data();
                    let (outer, len, inner) = (*outer, *len, *inner);
                    if let Some(g) = acc!(*x) {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |a: usize| o * len * inner + a * inner + ii;
                                let dot: f64 = (0..len).map(|a| go[at(a)] * y[at(a)]).sum();
                                for a in 0..len {
                                    g[at(a)] += y[at(a)] * (go[at(a)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = nodes[gamma.0].value.numel();
                    let r = inv_std.len();
                    let gv = nodes[gamma.0].value.data().to_vec();
                    if let Some(g) = acc!(*gamma) {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += go[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if let Some(g) = acc!(*beta) {
                        for chunk in go.chunks(c) {
                            add_into(g, chunk);
                        }
                    }
                    if let Some(g) = acc!(*x) {
                        let mut gh = vec![0.0; c];
                        for i in 0..r {
                            let mut mean_gh = 0.0;
                            let mut mean_ghx = 0.0;
                            for j in 0..c {
                                gh[j] = go[i * c + j] * gv[j];
                                mean_gh += gh[j];
                                mean_ghx += gh[j] * xhat[i * c + j];
                            }
                            mean_gh /= c as f64;
                            mean_ghx /= c as f64;
                            for j in 0..c {
                                g[i * c + j] +=
                                    inv_std[i] * (gh[j] - mean_gh - xhat[i * c + j] * mean_ghx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(g) = acc!(*x) {
                        for ((gx, &y), &v) in g.iter_mut().zip(&go).zip(xv) {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            *gx += y * d;
                        }
                    }
                }
                Op::SumAll(x) => {
                    if let Some(g) = acc!(*x) {
                        for v in g.iter_mut() {
                            *v += go[0];
                        }
                    }
                }
                Op::SumAxis { x, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    if let Some(g) = acc!(*x) {
                        for o in 0..outer {
                            for a in 0..len {
                                let base = o * len * inner + a * inner;
                                add_into(&mut g[base..base + inner], &go[o * inner..(o + 1) * inner]);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        if let Some(g) = acc!(p) {
                            add_into(g, &go[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, c) = node.value.as_matrix();
                    let mut c0 = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.as_matrix().1;
                        if let Some(g) = acc!(p) {
                            for i in 0..r {
                                add_into(&mut g[i * w..(i + 1) * w], &go[i * c + c0..i * c + c0 + w]);
                            }
                        }
                        c0 += w;
                    }
                }
                Op::Slice { x, r0, c0 } => {
                    let (nr, nc) = node.value.as_matrix();
                    let c = nodes[x.0].value.as_matrix().1;
                    if let Some(g) = acc!(*x) {
                        for i in 0..nr {
                            let dst = (r0 + i) * c + c0;
                            add_into(&mut g[dst..dst + nc], &go[i * nc..(i + 1) * nc]);
                        }
                    }
                }
                Op::GatherRows(x, idx) => {
                    let c = node.value.as_matrix().1;
                    if let Some(g) = acc!(*x) {
                        for (k, &i) in idx.iter().enumerate() {
                            add_into(&mut g[i * c..(i + 1) * c], &go[k * c..(k + 1) * c]);
                        }
                    }
                }
                Op::GatherCols(x, idx) => {
                    let (r, c) = nodes[x.0].value.as_matrix();
                    let w = idx.len();
                    if let Some(g) = acc!(*x) {
                        for i in 0..r {
                            for (k, &j) in idx.iter().enumerate() {
                                g[i * c + j] += go[i * w + k];
                            }
                        }
                    }
                }
                Op::NormalizeSum(x) => {
                    let (r, c) = node.value.as_matrix();
                    let y = node.value.data();
                    let xv = nodes[x.0].value.data();
                    if let Some(g) = acc!(*x) {
                        for i in 0..r {
                            let s: f64 = xv[i * c..(i + 1) * c].iter().sum();
                            let dot: f64 = (0..c).map(|j| go[i * c + j] * y[i * c + j]).sum();
                            for j in 0..c {
                                g[i * c + j] += (go[i * c + j] - dot) / s;
                            }
                        }
                    }
                }
                Op::MseMasked { pred, diff, mask, denom } => {
                    if let Some(g) = acc!(*pred) {
                        let k = 2.0 * go[0] / denom;
                        for ((gx, d), m) in g.iter_mut().zip(diff).zip(mask) {
                            *gx += k * m * d;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let c = probs.len() / n.max(1);
                    if let Some(g) = acc!(*logits) {
                        let k = go[0] / n as f64;
                        for i in 0..n {
                            for j in 0..c {
                                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                                g[i * c + j] += k * (probs[i * c + j] - onehot);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
