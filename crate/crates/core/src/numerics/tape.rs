//! Reverse-mode differentiation over an append-only operation record.
//!
//! Nodes are appended in execution order, so walking the record from the loss
//! backwards visits every node after all of its consumers.

use super::kernels::{self, axis_split};
use super::scalar::{gemm, MatRef};
use super::{NumError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    AddPrefix(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var, bool),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    NormalizeLast { x: Var, eps: T, norms: Vec<T> },
    Nll(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable operations for one training context.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`]; only ancestors of the loss that
/// require gradients are present.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NumError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumError> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (broadcast over the leading batch dimensions).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumError::Shape(format!("add_suffix {sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            add_into(chunk, &bd);
        }
        let v = Tensor::from_parts(sa.to_vec(), out);
        let rg = self.rg(&[a, b]);
        self.push("add_suffix", v, Op::AddSuffix(a, b), rg)
    }

    /// `a + b` where `b`'s shape equals the leading dimensions of `a`
    /// (broadcast over the trailing dimensions).
    pub fn add_prefix(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return Err(NumError::Shape(format!("add_prefix {sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data().to_vec();
        let inner = self.value(a).numel() / bd.len();
        let mut out = self.value(a).data().to_vec();
        for (chunk, &bv) in out.chunks_mut(inner).zip(&bd) {
            chunk.iter_mut().for_each(|x| *x = *x + bv);
        }
        let v = Tensor::from_parts(sa.to_vec(), out);
        let rg = self.rg(&[a, b]);
        self.push("add_prefix", v, Op::AddPrefix(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push("scale", v, Op::Scale(a, c), rg)
    }

    /// `[..., k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", v, Op::MatMul(a, b), rg)
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let v = kernels::bmm(self.value(a), self.value(b), trans_b)?;
        let rg = self.rg(&[a, b]);
        self.push("bmm", v, Op::Bmm(a, b, trans_b), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumError> {
        let v = kernels::permute(self.value(a), perm)?;
        let rg = self.rg(&[a]);
        self.push("permute", v, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(NumError::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", v, Op::Reshape(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let v = kernels::softmax(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        self.push("softmax", v, Op::Softmax(a, axis), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let v = kernels::log_softmax_last(self.value(a));
        let rg = self.rg(&[a]);
        self.push("log_softmax", v, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push("sum", v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push("mean", v, Op::MeanAll(a), rg)
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(NumError::Axis { axis, rank: x.rank() });
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::from_parts(shape, out);
        let rg = self.rg(&[a]);
        self.push("sum_axis", v, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or(NumError::Axis { axis, rank: self.shape(a).len() })?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push("gelu", v, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a).map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push("silu", v, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push("relu", v, Op::Relu(a), rg)
    }

    /// Normalizes over the last axis with learnable per-feature scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumError::Shape(format!(
                "layer_norm feature dim {d}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Selects rows (along axis 0) of `table`; repeated indices are allowed.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumError> {
        let t = self.value(table);
        let rows = t.shape()[0];
        let w = t.numel() / rows;
        if indices.is_empty() {
            return Err(NumError::Shape("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(NumError::Index { index: i, len: rows });
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let v = Tensor::from_parts(shape, out);
        let rg = self.rg(&[table]);
        self.push("gather", v, Op::Gather(table, indices.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = self.shape(*parts.first().ok_or_else(|| NumError::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(NumError::Axis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_other = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(NumError::Shape(format!("concat operands {first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        let rg = self.rg(parts);
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NumError> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        self.push("conv2d", v, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Valid 1-D cross-correlation; see [`kernels::conv1d`] for shapes.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var, NumError> {
        let (x4, w4, out_shape) = kernels::conv1d_as_2d(self.shape(x), self.shape(kernels), stride)?;
        let xr = self.reshape(x, &x4)?;
        let wr = self.reshape(kernels, &w4)?;
        let y = self.conv2d(xr, wr, None, stride, 0)?;
        self.reshape(y, &out_shape)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NumError> {
        let v = kernels::upsample2x(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push("upsample2x", v, Op::Upsample2x(x), rg)
    }

    /// L2-normalizes along the last axis; norms below `eps` are clamped.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var, NumError> {
        let d = *self.shape(x).last().unwrap();
        let eps = T::lit(eps);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        self.push("normalize", v, Op::NormalizeLast { x, eps, norms }, rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var, NumError> {
        let s = self.shape(logp);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NumError::Shape(format!("nll over {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        let lp = self.value(logp).data();
        let mut total = T::zero();
        for (b, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(NumError::Index { index: l, len: k });
            }
            total = total - lp[b * k + l];
        }
        let v = Tensor::scalar(total / T::lit(labels.len() as f64));
        let rg = self.rg(&[logp]);
        self.push("nll", v, Op::Nll(logp, labels.to_vec()), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(NumError::NonFinite("backward"));
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g.data_mut(), &data),
            slot @ None => *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), data)),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumError> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddSuffix(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*b) {
                    let w = self.value(*b).numel();
                    let mut gb = vec![T::zero(); w];
                    for chunk in gd.chunks(w) {
                        add_into(&mut gb, chunk);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddPrefix(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*b) {
                    let inner = gd.len() / self.value(*b).numel();
                    let gb = gd.chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *c).collect());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k;
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(MatRef::new(gd, m, n), MatRef::new(bv.data(), k, n).t(), &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(gd, m, n), &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Bmm(a, b, tb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (br, bc) = (bv.shape()[1], bv.shape()[2]);
                let n = if *tb { br } else { bc };
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for i in 0..batch {
                        let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bi = MatRef::new(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc);
                        let bi = if *tb { bi } else { bi.t() };
                        gemm(gi, bi, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for i in 0..batch {
                        let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let ai = MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut gb[i * br * bc..(i + 1) * br * bc];
                        if *tb {
                            gemm(gi.t(), ai, dst, false);
                        } else {
                            gemm(ai.t(), gi, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let ga = kernels::permute(g, &inv)?;
                self.accumulate(grads, *a, ga.into_data());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Softmax(a, axis) => {
                let y = &self.nodes[i].value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut ga = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot = dot + gd[base + l * inner] * yd[base + l * inner];
                        }
                        for l in 0..len {
                            let ix = base + l * inner;
                            ga[ix] = yd[ix] * (gd[ix] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let len = *y.shape().last().unwrap();
                let mut ga = vec![T::zero(); gd.len()];
                for ((gr, yr), out) in gd.chunks(len).zip(y.data().chunks(len)).zip(ga.chunks_mut(len)) {
                    let total: T = gr.iter().copied().sum();
                    for l in 0..len {
                        out[l] = gr[l] - yr[l].exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0] / T::lit(n as f64); n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect());
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let dn = T::lit(d as f64);
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); gd.len()];
                    for r in 0..rstd.len() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xr[j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for (gr, xr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * xr[j];
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let w = t.numel() / t.shape()[0];
                let mut gt = vec![T::zero(); t.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gt[src * w..(src + 1) * w], &gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Concat(parts, axis) => {
                let out_shape = g.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.requires_grad(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let gx = kernels::upsample2x_backward(g, self.shape(*x));
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeLast { x, eps, norms } => {
                let y = self.nodes[i].value.data();
                let d = y.len() / norms.len();
                let mut gx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (gr, yr) = (&gd[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let out = &mut gx[r * d..(r + 1) * d];
                    if n > *eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / *eps;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Nll(logp, labels) => {
                let k = self.shape(*logp)[1];
                let mut gl = vec![T::zero(); labels.len() * k];
                let w = -gd[0] / T::lit(labels.len() as f64);
                for (b, &l) in labels.iter().enumerate() {
                    gl[b * k + l] = w;
                }
                self.accumulate(grads, *logp, gl);
            }
        }
        Ok(())
    }
}
