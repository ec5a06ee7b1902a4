//! Reverse-mode tape.
//!
//! Every differentiable operation appends one node holding its output value and
//! enough information to run its vector-Jacobian product. Nodes are stored in
//! execution order, so a single reverse sweep visits each node exactly once.
//! Parameter leaves borrow their values from the owning store instead of
//! copying them.

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        weight: f64,
        ignore: Option<usize>,
    },
    Sum(Var),
    GradReverse(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn shape2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_unchecked(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(Cow::Owned(value), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = shape2(av, "matmul")?;
        let (k2, n) = shape2(bv, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += s * b;
                }
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` for `a: [m × k]`, `b: [n × k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = shape2(av, "matmul_t")?;
        let (n, k2) = shape2(bv, "matmul_t")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t inner dimensions differ: {:?} x {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b], "matmul_t")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv, "transpose")?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x], "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn row_vector(&self, x: Var, r: Var, op: &str) -> Result<()> {
        let n = self.value(x).last_dim();
        if self.shape(r) != [n] {
            return Err(Error::Shape(format!(
                "{op} needs a [{n}] row vector for {:?}, got {:?}",
                self.shape(x),
                self.shape(r)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
    }

    fn row_map(&self, x: Var, r: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (xv, rv) = (self.value(x), self.value(r));
        let n = xv.last_dim();
        let rd = rv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, rd[i % n]))
            .collect();
        Tensor::from_parts(xv.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a `[n]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector(a, row, "add_row")?;
        let out = self.row_map(a, row, |x, r| x + r);
        self.push(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Multiplies every row of `a` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector(a, row, "mul_row")?;
        let out = self.row_map(a, row, |x, r| x * r);
        self.push(out, Op::MulRow(a, row), &[a, row], "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Multiplies `a` by a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape(format!(
                "scale_by needs a one-element scale, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let out = self.map(a, |x| x * c);
        self.push(out, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh(x), &[x], "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `allowed[i] == false` entries are
    /// excluded. A row with no allowed entries yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "mask of length {} for tensor of shape {:?}",
                allowed.len(),
                self.shape(x)
            )));
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if n == 0 || xv.shape().is_empty() {
            return Err(Error::Shape(format!(
                "softmax over empty last axis, shape {:?}",
                xv.shape()
            )));
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if ok(j) {
                    orow[j] = (row[j] - max).exp();
                    total += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(t, Op::Softmax(x), &[x], "softmax")
    }

    /// Layer norm over the last axis. Zero-variance rows normalize to zero
    /// (then take the bias), because `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.row_vector(x, gain, "layer_norm gain")?;
        self.row_vector(x, bias, "layer_norm bias")?;
        let xv = self.value(x);
        let n = xv.last_dim();
        let rows = xv.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], "layer_norm")
    }

    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs, "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        let t = Tensor::from_parts(oshape, out);
        self.push(t, Op::Slice { x, axis, start }, &[x], "slice")
    }

    /// Rows of `table: [V × d]` selected by `ids`, giving `[L × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = shape2(tv, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} out of range for vocabulary of {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Token-level cross-entropy of `logits: [L × V]` against `targets`.
    /// Positions whose target equals `ignore` are skipped; `Mean` divides by
    /// the number of remaining positions (and yields 0 when none remain).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (l, v) = shape2(lv, "cross_entropy")?;
        if targets.len() != l {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {l} positions",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("target id {t} out of range for {v} classes")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            if Some(t) != ignore {
                total += max + z.ln() - row[t];
                count += 1;
            }
        }
        let weight = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, weight, ignore };
        self.push(Tensor::scalar(total * weight), op, &[logits], "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse(x), &[x], "grad_reverse")
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward with the seed gradient `d loss = seed`. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![seed]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.numel();
                let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av.data()[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for j in 0..n {
                            let s = g[r * n + j];
                            if s == 0.0 {
                                continue;
                            }
                            let brow = &bv.data()[j * k..(j + 1) * k];
                            for (d, bb) in da[r * k..(r + 1) * k].iter_mut().zip(brow) {
                                *d += s * bb;
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let arow = &av.data()[r * k..(r + 1) * k];
                        for j in 0..n {
                            let s = g[r * n + j];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, aa) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += s * aa;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = val(*row).numel();
                acc(*row, &mut |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a).data(), val(*row).data());
                let n = rv.len();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * rv[i % n];
                    }
                });
                acc(*row, &mut |d| {
                    for i in 0..g.len() {
                        d[i % n] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s).item();
                let av = val(*a).data();
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                acc(*s, &mut |d| d[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out;
                let n = y.last_dim();
                acc(*x, &mut |d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = val(*x).last_dim();
                let gv = val(*gain).data();
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            d[r * n + j] += rs * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (i, gvv) in g.iter().enumerate() {
                        d[i % n] += gvv * xhat[i];
                    }
                });
                acc(*bias, &mut |d| {
                    for (i, gvv) in g.iter().enumerate() {
                        d[i % n] += gvv;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    acc(*v, &mut |d| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                d[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            d[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dcols = val(*table).shape()[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dcols {
                            d[id * dcols + j] += g[r * dcols + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, weight, ignore } => {
                let v = val(*logits).shape()[1];
                let s = g[0] * weight;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            d[r * v + j] += s * probs[r * v + j];
                        }
                        d[r * v + t] -= s;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::GradReverse(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a -= b));
            }
        }
    }
}
