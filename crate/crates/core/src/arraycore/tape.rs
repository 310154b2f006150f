//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every operation appends a node holding its output value and whatever
//! forward context its backward rule needs. Nodes can only reference
//! earlier nodes, so a single reverse sweep over the node list visits each
//! node once in a valid topological order.

use crate::arraycore::array::{Array, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize),
    SliceAxis0(Var, usize),
    Stack(Vec<Var>),
    Softmax(Var),
    MaxAxis0(Var, Vec<usize>),
    MeanAxis0(Var),
    SelectAxis0(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy(Var, usize, Vec<T>),
    SquaredError(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    max_backward: MaxBackward,
}

/// Gradient rule used by [`Tape::max_axis0`].
///
/// `FlippedSign` exists only so verification tooling can confirm that a
/// broken backward rule is caught; it must never be used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaxBackward {
    #[default]
    Argmax,
    FlippedSign,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape. Post-op finiteness scans are on in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            max_backward: MaxBackward::Argmax,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn with_max_backward(mut self, rule: MaxBackward) -> Self {
        self.max_backward = rule;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, n, p);
        let value = Array::new(vec![m, p], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Adds a length-n vector to every last-axis slice of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, row))
    }

    /// Adds a constant array of identical shape (e.g. an attention mask bias).
    pub fn add_const(&mut self, a: Var, c: &Array<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", self.shape(a), c.shape()));
        }
        let data = zip_with(self.value(a).data(), c.data(), |x, y| x + y);
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("add_const", value, Op::AddConst(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout and padding masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let data = zip_with(self.value(a).data(), &c, |x, y| x * y);
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("transpose", sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let value = Array::new(vec![c, r], transpose_kernel(self.value(a).data(), r, c))?;
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = Array::new(shape.to_vec(), self.value(a).data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero arrays".into()))?;
        let lead = &self.shape(first)[..self.value(first).rank() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
        }
        let rows = self.value(first).outer_len();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Array::new(shape, data)?;
        self.push("concat_last", value, Op::ConcatLast(parts.to_vec()))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).last_dim();
        if len == 0 || start + len > n {
            return Err(Error::Slice(format!(
                "columns {start}..{} of extent {n}",
                start + len
            )));
        }
        let src = self.value(a);
        let data = (0..src.outer_len())
            .flat_map(|r| src.row(r)[start..start + len].iter().copied())
            .collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Array::new(shape, data)?;
        self.push("slice_last", value, Op::SliceLast(a, start))
    }

    /// Entries `start..start+len` of the first axis.
    pub fn slice_axis0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let n0 = src.shape()[0];
        if len == 0 || start + len > n0 {
            return Err(Error::Slice(format!(
                "axis-0 range {start}..{} of extent {n0}",
                start + len
            )));
        }
        let inner = src.len() / n0;
        let data = src.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let value = Array::new(shape, data)?;
        self.push("slice_axis0", value, Op::SliceAxis0(a, start))
    }

    /// Stacks equal-shaped arrays along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero arrays".into()))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::shape("stack", &inner, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let value = Array::new(shape, data)?;
        self.push("stack", value, Op::Stack(parts.to_vec()))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = src.last_dim();
        let mut data = Vec::with_capacity(src.len());
        for row in src.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut total = T::zero();
            for &x in row {
                let e = (x - m).exp();
                total = total + e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / total;
            }
        }
        let value = Array::new(src.shape().to_vec(), data)?;
        self.push("softmax_last", value, Op::Softmax(a))
    }

    /// Elementwise max over the leading axis. Ties go to the lowest index.
    pub fn max_axis0(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rank() < 2 {
            return Err(Error::shape("max_axis0", src.shape(), &[]));
        }
        let k = src.shape()[0];
        let inner = src.len() / k;
        let d = src.data();
        let mut out = d[..inner].to_vec();
        let mut arg = vec![0usize; inner];
        for l in 1..k {
            for (j, &x) in d[l * inner..(l + 1) * inner].iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = l;
                }
            }
        }
        let value = Array::new(src.shape()[1..].to_vec(), out)?;
        self.push("max_axis0", value, Op::MaxAxis0(a, arg))
    }

    /// Every discrete choice recorded so far: max winners and selected
    /// indices. Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::MaxAxis0(_, idx) | Op::SelectAxis0(_, idx) = &node.op {
                sig.extend_from_slice(idx);
            }
        }
        sig
    }

    /// Layer index chosen by a preceding [`Tape::max_axis0`].
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxAxis0(_, arg) => Some(arg),
            _ => None,
        }
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rank() < 2 {
            return Err(Error::shape("mean_axis0", src.shape(), &[]));
        }
        let k = src.shape()[0];
        let inner = src.len() / k;
        let d = src.data();
        let mut out = d[..inner].to_vec();
        for l in 1..k {
            for (o, &x) in out.iter_mut().zip(&d[l * inner..(l + 1) * inner]) {
                *o = *o + x;
            }
        }
        let kf = T::from_usize(k).unwrap();
        for o in &mut out {
            *o = *o / kf;
        }
        let value = Array::new(src.shape()[1..].to_vec(), out)?;
        self.push("mean_axis0", value, Op::MeanAxis0(a))
    }

    /// From a `k×t×d` array, takes row `i` of layer `layer[i]` for each `i`.
    pub fn select_axis0(&mut self, a: Var, layer: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let s = src.shape();
        if s.len() != 3 || layer.len() != s[1] || layer.iter().any(|&l| l >= s[0]) {
            return Err(Error::shape("select_axis0", s, &[layer.len()]));
        }
        let (t, d) = (s[1], s[2]);
        let mut out = Vec::with_capacity(t * d);
        for (i, &l) in layer.iter().enumerate() {
            let off = (l * t + i) * d;
            out.extend_from_slice(&src.data()[off..off + d]);
        }
        let value = Array::new(vec![t, d], out)?;
        self.push("select_axis0", value, Op::SelectAxis0(a, layer.to_vec()))
    }

    /// Per-row normalization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if d < 2 {
            return Err(Error::InvalidArgument("layer_norm needs d >= 2".into()));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", src.shape(), self.shape(gain)));
        }
        let df = T::from_usize(d).unwrap();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.outer_len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Array::new(src.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| gelu_fwd(x).0);
        self.push("gelu", value, Op::Gelu(a))
    }

    /// Rows `ids` of a `V×d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if src.rank() != 2 {
            return Err(Error::shape("gather_rows", src.shape(), &[]));
        }
        let (v, d) = (src.shape()[0], src.shape()[1]);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Slice(format!("row {bad} of table with {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let value = Array::new(vec![ids.len(), d], out)?;
        self.push("gather_rows", value, Op::Gather(table, ids.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Array::new(vec![1], vec![s])?, Op::Sum(a))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let src = self.value(logits);
        let c = src.last_dim();
        if src.outer_len() != 1 {
            return Err(Error::shape("cross_entropy", src.shape(), &[1, c]));
        }
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let z = src.data();
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + total.ln();
        let probs: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(
            "cross_entropy",
            Array::new(vec![1], vec![loss])?,
            Op::CrossEntropy(logits, label, probs),
        )
    }

    /// `(pred - target)^2` for a single-element prediction.
    pub fn squared_error(&mut self, pred: Var, target: T) -> Result<Var> {
        let src = self.value(pred);
        if src.len() != 1 {
            return Err(Error::shape("squared_error", src.shape(), &[1]));
        }
        let diff = src.data()[0] - target;
        self.push(
            "squared_error",
            Array::new(vec![1], vec![diff * diff])?,
            Op::SquaredError(pred, target),
        )
    }

    /// Reverse sweep from a single-element output. Gradients are stored on
    /// every node that requires one; unreached leaves get zeros.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", self.shape(output), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                node.value.clear_grad();
                continue;
            }
            let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, p) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let acc = slot(grads, *a, m * n);
                    for r in 0..m {
                        let gr = &g[r * p..(r + 1) * p];
                        for k in 0..n {
                            let br = &bd[k * p..(k + 1) * p];
                            let mut s = T::zero();
                            for j in 0..p {
                                s = s + gr[j] * br[j];
                            }
                            acc[r * n + k] = acc[r * n + k] + s;
                        }
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let acc = slot(grads, *b, n * p);
                    for r in 0..m {
                        let gr = &g[r * p..(r + 1) * p];
                        for k in 0..n {
                            let av = ad[r * n + k];
                            if av == T::zero() {
                                continue;
                            }
                            let dst = &mut acc[k * p..(k + 1) * p];
                            for j in 0..p {
                                dst[j] = dst[j] + av * gr[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*row) {
                    let n = self.value(*row).len();
                    let acc = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(acc, chunk);
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let acc = slot(grads, *a, g.len());
                    for ((o, &gi), &bi) in acc.iter_mut().zip(g).zip(bd) {
                        *o = *o + gi * bi;
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let acc = slot(grads, *b, g.len());
                    for ((o, &gi), &ai) in acc.iter_mut().zip(g).zip(ad) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((o, &gi), &ci) in acc.iter_mut().zip(g).zip(c) {
                        *o = *o + gi * ci;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for (o, &gi) in acc.iter_mut().zip(g) {
                        *o = *o + gi * *s;
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    // g is c×r
                    let gt = transpose_kernel(g, c, r);
                    add_into(slot(grads, *a, r * c), &gt);
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.outer_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let acc = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast(a, start) => {
                if self.wants(*a) {
                    let n = self.value(*a).last_dim();
                    let w = node.value.last_dim();
                    let acc = slot(grads, *a, self.value(*a).len());
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut acc[r * n + start..r * n + start + w], gr);
                    }
                }
            }
            Op::SliceAxis0(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let inner = src.len() / src.shape()[0];
                    let acc = slot(grads, *a, src.len());
                    add_into(&mut acc[start * inner..start * inner + g.len()], g);
                }
            }
            Op::Stack(parts) => {
                let inner = g.len() / parts.len();
                for (l, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        add_into(slot(grads, p, inner), &g[l * inner..(l + 1) * inner]);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let n = node.value.last_dim();
                    let acc = slot(grads, *a, g.len());
                    for ((y, gy), dst) in out.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                        let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dst[j] = dst[j] + y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::MaxAxis0(a, arg) => {
                if self.wants(*a) {
                    let inner = g.len();
                    let total = self.value(*a).len();
                    let acc = slot(grads, *a, total);
                    for (j, (&l, &gj)) in arg.iter().zip(g).enumerate() {
                        let gj = match self.max_backward {
                            MaxBackward::Argmax => gj,
                            MaxBackward::FlippedSign => -gj,
                        };
                        acc[l * inner + j] = acc[l * inner + j] + gj;
                    }
                }
            }
            Op::MeanAxis0(a) => {
                if self.wants(*a) {
                    let inner = g.len();
                    let total = self.value(*a).len();
                    let k = total / inner;
                    let kf = T::from_usize(k).unwrap();
                    let acc = slot(grads, *a, total);
                    for l in 0..k {
                        for j in 0..inner {
                            acc[l * inner + j] = acc[l * inner + j] + g[j] / kf;
                        }
                    }
                }
            }
            Op::SelectAxis0(a, layer) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let (t, d) = (s[1], s[2]);
                    let acc = slot(grads, *a, s.iter().product());
                    for (r, &l) in layer.iter().enumerate() {
                        let off = (l * t + r) * d;
                        add_into(&mut acc[off..off + d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let df = T::from_usize(d).unwrap();
                let gv = self.value(*gain).data().to_vec();
                if self.wants(*gain) {
                    let acc = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] = acc[j] + gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let acc = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(acc, gr);
                    }
                }
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, ((gr, hr), dst)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(acc.chunks_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / df;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&p, &q)| p * q).sum::<T>() / df;
                        for j in 0..d {
                            dst[j] = dst[j] + inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let src = self.value(*a).data();
                    let acc = slot(grads, *a, g.len());
                    for ((o, &gi), &x) in acc.iter_mut().zip(g).zip(src) {
                        *o = *o + gi * gelu_fwd(x).1;
                    }
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let d = node.value.last_dim();
                    let acc = slot(grads, *table, self.value(*table).len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut acc[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let acc = slot(grads, *a, n);
                    for o in acc.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::CrossEntropy(a, label, probs) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, probs.len());
                    for (j, (o, &p)) in acc.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        *o = *o + g[0] * (p - target);
                    }
                }
            }
            Op::SquaredError(a, target) => {
                if self.wants(*a) {
                    let p = self.value(*a).data()[0];
                    let two = T::one() + T::one();
                    let acc = slot(grads, *a, 1);
                    acc[0] = acc[0] + g[0] * two * (p - *target);
                }
            }
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddConst(a)
        | Op::MulConst(a, _)
        | Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SliceLast(a, _)
        | Op::SliceAxis0(a, _)
        | Op::Softmax(a)
        | Op::MaxAxis0(a, _)
        | Op::MeanAxis0(a)
        | Op::SelectAxis0(a, _)
        | Op::Gelu(a)
        | Op::Gather(a, _)
        | Op::Sum(a)
        | Op::CrossEntropy(a, _, _)
        | Op::SquaredError(a, _) => vec![*a],
        Op::ConcatLast(p) | Op::Stack(p) => p.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn zip_with<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let dst = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == T::zero() {
                continue;
            }
            let br = &b[k * p..(k + 1) * p];
            for j in 0..p {
                dst[j] = dst[j] + av * br[j];
            }
        }
    }
    out
}

fn transpose_kernel<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// GELU value and derivative (tanh approximation).
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    // 1 ± tanh(u) in the logistic form; the direct form cancels for large |u|.
    let two = T::one() + T::one();
    let one_plus = two / (T::one() + (-two * u).exp());
    let one_minus = two / (T::one() + (two * u).exp());
    let value = half * x * one_plus;
    let du = c * (T::one() + three * k * x * x);
    let deriv = half * one_plus + half * x * one_plus * one_minus * du;
    (value, deriv)
}
