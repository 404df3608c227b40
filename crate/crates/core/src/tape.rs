//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Tape`]; node indices are the
//! topological order, so backward simply walks the tape from the loss
//! towards index 0. Leaves created with `requires_grad` accumulate
//! gradients across calls to [`Tape::backward`] until [`Tape::zero_grad`].
//!
//! Broadcasting is limited to scalar-with-tensor and row-vector-with-matrix
//! (a rank-1 tensor matching the last dimension). Anything else is a
//! dimension error.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, fast_exp, gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` where query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allow.len()
            )));
        }
        Ok(Mask { rows, cols, allow })
    }

    /// Lower-triangular mask: position `i` sees `j` iff `j <= i`.
    pub fn causal(n: usize) -> Self {
        let allow = (0..n * n).map(|ix| ix % n <= ix / n).collect();
        Mask {
            rows: n,
            cols: n,
            allow,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, c: f64 },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Gather { table: Var, ids: Rc<[usize]> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus accumulated leaf gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A trainable leaf; gradients accumulate on it during backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a [.., k] x b [k, n] -> [.., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel().checked_div(k).unwrap_or_else(|| sa[..sa.len() - 1].iter().product());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product `a [B,m,k] x b [B,k,n]`, or `a x bᵀ` with `b [B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push("bmm", Tensor::new(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.is_empty() {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(Bcast::Row)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn broadcast_apply(&self, a: Var, b: Var, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match bcast {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::Row => {
                let n = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect()
            }
        };
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    /// `a + b` where `b` matches `a`, is a scalar, or is a row vector over the last dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind("add", a, b)?;
        let value = self.broadcast_apply(a, b, bcast, |x, y| x + y);
        self.push("add", value, Op::Add { a, b, bcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind("mul", a, b)?;
        let value = self.broadcast_apply(a, b, bcast, |x, y| x * y);
        self.push("mul", value, Op::Mul { a, b, bcast }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!("softmax axis {axis} on shape {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.data(a);
        let mut y = vec![0.0; x.len()];
        if inner == 1 && len > 0 {
            for (xr, yr) in x.chunks(len).zip(y.chunks_mut(len)) {
                softmax_row(xr, yr);
            }
            return self.push("softmax", Tensor::new(shape, y)?, Op::Softmax { a, axis }, &[a]);
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = fast_exp(x[at(j)] - max);
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        self.push("softmax", Tensor::new(shape, y)?, Op::Softmax { a, axis }, &[a])
    }

    /// Softmax over the last axis of `a [.., rows, cols]` where disallowed
    /// entries get exactly zero probability.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != mask.rows || shape[r - 1] != mask.cols {
            return Err(Error::shape("masked_softmax", &shape, &[mask.rows, mask.cols]));
        }
        let cols = mask.cols;
        let x = self.data(a);
        let mut y = vec![0.0; x.len()];
        for (row, (xr, yr)) in x.chunks(cols.max(1)).zip(y.chunks_mut(cols.max(1))).enumerate() {
            let mrow = row % mask.rows;
            let allow = &mask.allow[mrow * cols..(mrow + 1) * cols];
            if allow.iter().all(|&a| a) {
                softmax_row(xr, yr);
                continue;
            }
            let allowed = |j: usize| allow[j];
            let max = (0..cols)
                .filter(|&j| allowed(j))
                .map(|j| xr[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: mrow });
            }
            let mut sum = 0.0;
            for j in (0..cols).filter(|&j| allowed(j)) {
                let e = fast_exp(xr[j] - max);
                yr[j] = e;
                sum += e;
            }
            yr.iter_mut().for_each(|v| *v /= sum);
        }
        self.push("masked_softmax", Tensor::new(shape, y)?, Op::Softmax { a, axis: r - 1 }, &[a])
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::InvalidShape("layer_norm on scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let (xs, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xs.len().checked_div(d).unwrap_or(0);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, inv_std };
        self.push("layer_norm", Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [n, V]`; positions equal to `ignore_id` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| (t != ignore_id).then_some(t))
            .collect();
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index { what: "vocabulary", index: bad, size: v });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| fast_exp(z - max)).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t];
            for j in 0..v {
                probs[r * v + j] = fast_exp(row[j] - log_z);
            }
        }
        let value = Tensor::scalar(total / count as f64);
        self.push("cross_entropy", value, Op::CrossEntropy { logits, targets, probs, count }, &[logits])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape(format!("concat axis {axis} on shape {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        self.push("concat", Tensor::new(out_shape, out)?, op, inputs)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", Tensor::new(out_shape, out)?, Op::Slice { a, axis, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::InvalidShape("mean of empty tensor".into()));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape(format!("permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(a), &shape, perm);
        let op = Op::Permute { a, perm: perm.to_vec() };
        self.push("permute", Tensor::new(out_shape, out)?, op, &[a])
    }

    /// Rows of `table [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape(format!("gather from shape {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { what: "embedding table", index: bad, size: rows });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let op = Op::Gather { table, ids: ids.into() };
        self.push("gather", Tensor::new(vec![ids.len(), d], out)?, op, &[table])
    }

    /// Accumulates d`loss` into every reachable trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                acc(*a, &mut |ga| gemm(m, n, k, g, false, self.data(*b), true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { self.shape(*b)[1] } else { self.shape(*b)[2] };
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        // dA = G Bᵀ, or G B when B was used transposed.
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, gbi, 1.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, gbi, 1.0);
                        }
                    }
                });
            }
            Op::Add { a, b, bcast } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_broadcast(gb, g, *bcast));
            }
            Op::Mul { a, b, bcast } => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| match bcast {
                    Bcast::Same => ga.iter_mut().zip(g).zip(db).for_each(|((o, gi), y)| *o += gi * y),
                    Bcast::Scalar => ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * db[0]),
                    Bcast::Row => {
                        let n = db.len();
                        ga.iter_mut().zip(g).enumerate().for_each(|(j, (o, gi))| *o += gi * db[j % n]);
                    }
                });
                acc(*b, &mut |gb| {
                    let prod: Vec<f64> = g.iter().zip(da).map(|(gi, x)| gi * x).collect();
                    reduce_broadcast(gb, &prod, *bcast);
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c)),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    if inner == 1 {
                        for ((gr, yr), dr) in g.chunks(len).zip(out.chunks(len)).zip(ga.chunks_mut(len)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gn = self.data(*gain);
                let d = gn.len();
                acc(*gain, &mut |gg| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gn[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += scale * (d as f64 * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, gi), &xi)| *o += gi * gelu_grad(xi));
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        add_into(&mut ga[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
        }
    }
}

fn softmax_row(x: &[f64], y: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = fast_exp(xi - max);
        sum += *yi;
    }
    let inv = 1.0 / sum;
    y.iter_mut().for_each(|v| *v *= inv);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn reduce_broadcast(dst: &mut [f64], g: &[f64], bcast: Bcast) {
    match bcast {
        Bcast::Same => add_into(dst, g),
        Bcast::Scalar => dst[0] += g.iter().sum::<f64>(),
        Bcast::Row => {
            let n = dst.len();
            for chunk in g.chunks(n) {
                add_into(dst, chunk);
            }
        }
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Trailing axes left in place move as contiguous blocks.
    let mut keep = shape.len();
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let rank = keep;
    if rank == 0 {
        out.extend_from_slice(x);
        return out;
    }
    let mut strides = vec![block; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm[..rank].iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm[..rank].iter().map(|&p| strides[p]).collect();
    let mut idx = vec![0; rank];
    let mut src = 0;
    loop {
        out.extend_from_slice(&x[src..src + block]);
        let mut ax = rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// libm tanh is several times slower than exp on this path.
fn fast_tanh(y: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * y) + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(mat(&[vec![1.0, 0.0]]));
        let c = t.constant(mat(&[vec![5.0], vec![7.0]]));
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 1]);
        assert_eq!(t.value(p).item(), 5.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(t.value(y).data()[1].abs() < 1e-12);
        let x = t.constant(Tensor::new(vec![2], vec![3.0, 1.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y).data()[0] - 0.8808).abs() < 1e-4);
        assert!((t.value(y).data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![0.0, 5.0], vec![0.0, 5.0]]));
        let y = t.softmax(x, 0).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 0.5).abs() < 1e-15);
        }
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = t.masked_softmax(x, &Mask::causal(2)).unwrap();
        assert_eq!(t.value(y).data()[0], 1.0);
        assert_eq!(t.value(y).data()[1], 0.0);
        let none = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert!(matches!(t.masked_softmax(x, &none), Err(Error::DegenerateAttention { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(mat(&[vec![3.0, 3.0], vec![1.0, -1.0]]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let y = t.value(y).data();
        assert_eq!(&y[..2], &[0.0, 0.0]);
        assert!((y[2] - 1.0).abs() < 1e-9 && (y[3] + 1.0).abs() < 1e-9);
        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(t.layer_norm(x, bad, b, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_ignore() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 8]));
        let l = t.cross_entropy(z, &[1, 0, 7], 0).unwrap();
        assert!((t.value(l).item() - 8f64.ln()).abs() < 1e-12);
        assert!(matches!(t.cross_entropy(z, &[0, 0, 0], 0), Err(Error::EmptyLoss)));
        assert!(t.cross_entropy(z, &[9, 1, 1], 0).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_limit() {
        let mut t = Tape::new();
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 100.0;
        let z = t.constant(logits);
        let l = t.cross_entropy(z, &[2], 99).unwrap();
        assert!(t.value(l).item() < 1e-40);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        t.zero_grad();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let c = t.constant(Tensor::new(vec![2], vec![2.0, 5.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let y = t.gelu(y).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn concat_and_slice_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::full(&[4, 3], 1.0));
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.shape(c), &[6, 3]);
        let s = t.slice(c, 0, 2, 4).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 1.0));
        let bad = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.concat(&[a, bad], 0).is_err());
        let m = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = t.mean(m).unwrap();
        assert_eq!(t.value(m).item(), 2.0);
    }

    #[test]
    fn broadcasting_is_limited() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::zeros(&[2, 3]));
        let row = t.constant(Tensor::full(&[3], 1.0));
        let col = t.constant(Tensor::zeros(&[2, 1]));
        let s = t.constant(Tensor::scalar(2.0));
        assert!(t.add(m, row).is_ok());
        assert!(t.mul(m, s).is_ok());
        assert!(t.add(m, col).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        assert_eq!(t.value(p).at(&[3, 1, 2]), t.value(x).at(&[1, 2, 3]));
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1], vec![1e300]).unwrap());
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    }
}
