//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. `backward` walks the tape once in reverse and
//! accumulates gradients into leaf tensors, so repeated calls add up until
//! `zero_grad` is called.

use super::kernels::{log_sum_exp, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::{NumericsError, RngStream, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    DivRows(Var, Var),
    Scale(Var, T),
    DivScalar(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    RowSum(Var),
    ConcatRows(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MaskMul { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, valid: Vec<bool>, probs: Vec<T>, n_valid: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, parents: &[Var], op: Op<T>) -> Var {
        let rg = self.needs_grad(parents);
        let value = Tensor::new(shape, data).expect("op produced consistent shape").with_requires_grad(rg);
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Dimension { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        let s = self.value(v).shape();
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(NumericsError::Dimension { op, lhs: s.to_vec(), rhs: vec![] }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(NumericsError::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, NumericsError> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.derived(shape, data, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return Err(NumericsError::Dimension {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.derived(shape, data, &[a, bias], Op::AddBias(a, bias)))
    }

    /// Divides row `r` of an `r×c` matrix by `s[r]`.
    pub fn div_rows(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(s).numel() != r {
            return Err(NumericsError::Dimension {
                op: "div_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data();
        let data =
            self.value(a).data().chunks(c).zip(sv).flat_map(|(row, &d)| row.iter().map(move |&x| x / d)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.derived(shape, data, &[a, s], Op::DivRows(a, s)))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.derived(shape, data, &[a], op)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map_op(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn div_scalar(&mut self, a: Var, c: T) -> Var {
        self.map_op(a, |x| x / c, Op::DivScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map_op(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.derived(vec![1], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).numel());
        let s = self.sum(a);
        self.scale(s, n.recip())
    }

    /// Sums each row of an `r×c` matrix into a length-`r` vector.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let data = self.value(a).data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        self.derived(vec![r], data, &[a], Op::RowSum(a))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
        if ca != cb {
            return Err(NumericsError::Dimension {
                op: "concat_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let rows = self.value(a).rows() + self.value(b).rows();
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.derived(vec![rows, ca], data, &[a, b], Op::ConcatRows(a, b)))
    }

    /// Gathers rows of a `V×d` table; the backward pass scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::Index { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        Ok(self.derived(vec![ids.len(), d], data, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(NumericsError::Dimension {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize_lossy(c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.derived(shape, out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product attention of `q` (s×d) over `k`, `v` (t×d).
    ///
    /// With `causal`, query row i only sees key rows ≤ i (requires s == t).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var, NumericsError> {
        let (s, d) = self.matrix_dims("attention", q)?;
        let (t, dk) = self.matrix_dims("attention", k)?;
        let (tv, dv) = self.matrix_dims("attention", v)?;
        if d != dk || d != dv || t != tv || heads == 0 || d % heads != 0 || (causal && s != t) {
            return Err(NumericsError::Dimension {
                op: "attention",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        let dh = d / heads;
        let scale = T::from_usize_lossy(dh).sqrt().recip();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * s * t];
        let mut out = vec![T::zero(); s * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * s * t..(h + 1) * s * t];
            for i in 0..s {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut p[i * t..(i + 1) * t];
                let visible = if causal { i + 1 } else { t };
                for j in 0..visible {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    row[j] = dot * scale;
                }
                softmax_in_place(&mut row[..visible]);
                for x in &mut row[visible..] {
                    *x = T::zero();
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let pij = row[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        Ok(self.derived(vec![s, d], out, &[q, k, v], Op::Attention { q, k, v, heads, probs }))
    }

    /// Inverted dropout. Identity (the same handle) in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream, training: bool) -> Result<Var, NumericsError> {
        check_dropout_p(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask::<T>(self.value(x).numel(), p, rng);
        let data = self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.derived(shape, data, &[x], Op::MaskMul { x, mask }))
    }

    /// Mean softmax cross-entropy over the rows of `logits` (L×V) flagged valid.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (l, vocab) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != l || valid.is_some_and(|m| m.len() != l) {
            return Err(NumericsError::Dimension {
                op: "cross_entropy",
                lhs: self.value(logits).shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if vocab < 2 {
            return Err(NumericsError::Shape(format!("cross_entropy needs V >= 2, got {vocab}")));
        }
        let valid: Vec<bool> = valid.map_or_else(|| vec![true; l], <[bool]>::to_vec);
        let n_valid = valid.iter().filter(|&&b| b).count();
        if n_valid == 0 {
            return Err(NumericsError::Shape("cross_entropy with no valid positions".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (j, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[j];
            if t >= vocab {
                return Err(NumericsError::Index { op: "cross_entropy", index: t, bound: vocab });
            }
            if valid[j] {
                total += log_sum_exp(row) - row[t];
            }
            softmax_in_place(row);
        }
        let loss = total / T::from_usize_lossy(n_valid);
        Ok(self.derived(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), valid, probs, n_valid },
        ))
    }

    /// Accumulates d(loss)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let tracks = |v: Var| nodes[v.0].value.requires_grad();
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if tracks(*a) {
                    matmul_nt_acc(g, val(*b).data(), slot(grads, *a, val(*a).numel()), m, n, k);
                }
                if tracks(*b) {
                    matmul_tn_acc(val(*a).data(), g, slot(grads, *b, val(*b).numel()), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if tracks(v) {
                        slot(grads, v, val(v).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if tracks(v) {
                        slot(grads, v, val(v).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracks(*a) {
                    let bd = val(*b).data();
                    slot(grads, *a, val(*a).numel()).iter_mut().zip(g).zip(bd).for_each(|((s, &x), &y)| *s += x * y);
                }
                if tracks(*b) {
                    let ad = val(*a).data();
                    slot(grads, *b, val(*b).numel()).iter_mut().zip(g).zip(ad).for_each(|((s, &x), &y)| *s += x * y);
                }
            }
            Op::AddBias(a, bias) => {
                if tracks(*a) {
                    slot(grads, *a, val(*a).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
                if tracks(*bias) {
                    let c = val(*bias).numel();
                    let sb = slot(grads, *bias, val(*bias).numel());
                    for row in g.chunks(c) {
                        sb.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::DivRows(a, s) => {
                let c = val(*a).cols();
                let sd = val(*s).data();
                if tracks(*a) {
                    let sa = slot(grads, *a, val(*a).numel());
                    for ((srow, grow), &d) in sa.chunks_mut(c).zip(g.chunks(c)).zip(sd) {
                        srow.iter_mut().zip(grow).for_each(|(x, &y)| *x += y / d);
                    }
                }
                if tracks(*s) {
                    let ad = val(*a).data();
                    let ss = slot(grads, *s, val(*s).numel());
                    for (r, (grow, arow)) in g.chunks(c).zip(ad.chunks(c)).enumerate() {
                        let dot: T = grow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                        ss[r] -= dot / (sd[r] * sd[r]);
                    }
                }
            }
            Op::Scale(a, c) => {
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += *c * x);
            }
            Op::DivScalar(a, c) => {
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += x / *c);
            }
            Op::AddScalar(a) => {
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).for_each(|(s, &x)| *s += x);
            }
            Op::Sqrt(a) => {
                let two = T::lit(2.0);
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).zip(out.data()).for_each(|((s, &x), &y)| {
                    if y > T::zero() {
                        *s += x / (two * y)
                    }
                });
            }
            Op::Recip(a) => {
                slot(grads, *a, val(*a).numel())
                    .iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((s, &x), &y)| *s -= x * y * y);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let ad = val(*a).data();
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).zip(ad).for_each(|((s, &x), &y)| *s += two * x * y);
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                slot(grads, *a, val(*a).numel()).iter_mut().zip(g).zip(ad).for_each(|((s, &x), &y)| {
                    if y > T::zero() {
                        *s += x
                    }
                });
            }
            Op::Sum(a) => {
                slot(grads, *a, val(*a).numel()).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::RowSum(a) => {
                let c = val(*a).cols();
                for (row, &x) in slot(grads, *a, val(*a).numel()).chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|s| *s += x);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).numel();
                if tracks(*a) {
                    slot(grads, *a, val(*a).numel()).iter_mut().zip(&g[..na]).for_each(|(s, &x)| *s += x);
                }
                if tracks(*b) {
                    slot(grads, *b, val(*b).numel()).iter_mut().zip(&g[na..]).for_each(|(s, &x)| *s += x);
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                let st = slot(grads, *table, val(*table).numel());
                for (grow, &id) in g.chunks(d).zip(ids) {
                    st[id * d..(id + 1) * d].iter_mut().zip(grow).for_each(|(s, &x)| *s += x);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = val(*x).cols();
                let n = T::from_usize_lossy(c);
                let gam = val(*gamma).data();
                if tracks(*x) {
                    let sx = slot(grads, *x, val(*x).numel());
                    for (r, ((srow, grow), hrow)) in sx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            srow[j] += inv_std[r] * (dh - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if tracks(*gamma) {
                    let sg = slot(grads, *gamma, val(*gamma).numel());
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            sg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if tracks(*beta) {
                    let sb = slot(grads, *beta, val(*beta).numel());
                    for grow in g.chunks(c) {
                        sb.iter_mut().zip(grow).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (s, d) = (val(*q).rows(), val(*q).cols());
                let t = val(*k).rows();
                let dh = d / heads;
                let scale = T::from_usize_lossy(dh).sqrt().recip();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); s * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let mut dscore = vec![T::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * s * t..(h + 1) * s * t];
                    for i in 0..s {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let prow = &p[i * t..(i + 1) * t];
                        let mut weighted = T::zero();
                        for j in 0..t {
                            let pij = prow[j];
                            if pij == T::zero() {
                                dscore[j] = T::zero();
                                continue;
                            }
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let dp: T = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dscore[j] = dp;
                            weighted += dp * pij;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            dvj.iter_mut().zip(gi).for_each(|(x, &y)| *x += pij * y);
                        }
                        for j in 0..t {
                            let pij = prow[j];
                            if pij == T::zero() {
                                continue;
                            }
                            let ds = pij * (dscore[j] - weighted) * scale;
                            let kj = &kd[j * d + off..j * d + off + dh];
                            let qi = &qd[i * d + off..i * d + off + dh];
                            dq[i * d + off..i * d + off + dh].iter_mut().zip(kj).for_each(|(x, &y)| *x += ds * y);
                            dk[j * d + off..j * d + off + dh].iter_mut().zip(qi).for_each(|(x, &y)| *x += ds * y);
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if tracks(var) {
                        slot(grads, var, val(var).numel()).iter_mut().zip(&buf).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                slot(grads, *x, val(*x).numel()).iter_mut().zip(g).zip(mask).for_each(|((s, &a), &m)| *s += a * m);
            }
            Op::CrossEntropy { logits, targets, valid, probs, n_valid } => {
                let vocab = val(*logits).cols();
                let coef = g[0] / T::from_usize_lossy(*n_valid);
                let sl = slot(grads, *logits, val(*logits).numel());
                for (j, (srow, prow)) in sl.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate() {
                    if !valid[j] {
                        continue;
                    }
                    srow.iter_mut().zip(prow).for_each(|(s, &p)| *s += coef * p);
                    srow[targets[j]] -= coef;
                }
            }
        }
    }
}

pub(crate) fn check_dropout_p(p: f64) -> Result<(), NumericsError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericsError::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Keep-mask with survivors pre-scaled by `1/(1-p)`.
pub(crate) fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut RngStream) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect()
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}
