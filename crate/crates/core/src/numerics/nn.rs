//! Parameter binding and the handful of layers every model here is built from.
//!
//! Layers carry only names and extents; values live in a [`ParamStore`] and
//! enter a [`Session`]'s tape as leaves the first time they are used.

use std::collections::BTreeMap;

use rand::Rng;

use super::{NumError, ParamStore, Scalar, Tape, Tensor, Var};

/// One forward/backward context: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    track: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// `track` makes trainable parameters require gradients.
    pub fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Self { tape: Tape::new(), store, bound: BTreeMap::new(), track }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name).ok_or_else(|| NumError::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(p.value.clone(), self.track && p.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, NumError> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Backward from `loss`, returning gradients keyed by parameter name.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>, NumError> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect())
    }
}

fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// Affine map over the last axis: `y = x·W + b`, `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out, bias: true }
    }

    pub fn no_bias(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out, bias: false }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.init_scaled(store, rng, 1.0);
    }

    /// Init with weights scaled by `gain` (0 gives a zero map).
    pub fn init_scaled<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        let std = gain * (1.0 / self.d_in as f64).sqrt();
        let w = if gain == 0.0 {
            Tensor::zeros(&[self.d_in, self.d_out])
        } else {
            normal(&[self.d_in, self.d_out], std, rng)
        };
        store.insert(self.weight_name(), w, true);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]), true);
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let w = s.param(&self.weight_name())?;
        let y = s.tape.matmul(x, w)?;
        if self.bias {
            let b = s.param(&self.bias_name())?;
            s.tape.add_suffix(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Per-feature normalization over the last axis, eps 1e-5.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim]), true);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]), true);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let g = s.param(&format!("{}.gamma", self.name))?;
        let b = s.param(&format!("{}.beta", self.name))?;
        s.tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Square-kernel 2-D convolution with bias over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride, pad }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(name, c_in, c_out, 3, 1, 1)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.init_scaled(store, rng, 1.0);
    }

    pub fn init_scaled<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        let fan_in = (self.c_in * self.kernel * self.kernel) as f64;
        let shape = [self.c_out, self.c_in, self.kernel, self.kernel];
        let w = if gain == 0.0 { Tensor::zeros(&shape) } else { normal(&shape, gain / fan_in.sqrt(), rng) };
        store.insert(format!("{}.weight", self.name), w, true);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.c_out]), true);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let w = s.param(&format!("{}.weight", self.name))?;
        let b = s.param(&format!("{}.bias", self.name))?;
        s.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(format!("{name}.fc1"), dim, hidden), fc2: Linear::new(format!("{name}.fc2"), hidden, dim) }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init_scaled(store, rng, 0.5);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Scaled dot-product attention of `q [B, N, d]` against `k, v [B, M, d]`
/// split into `heads` equal heads; returns `[B, N, d]`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var, NumError> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || tape.shape(v) != ks.as_slice() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(NumError::Shape(format!(
            "attention q {qs:?}, k {ks:?}, v {:?}",
            tape.shape(v)
        )));
    }
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Invalid(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if heads == 1 {
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax(scores, 2)?;
        return tape.bmm(p, v, false);
    }
    let split = |tape: &mut Tape<T>, x: Var, len: usize| -> Result<Var, NumError> {
        let x = tape.reshape(x, &[b, len, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, len, dh])
    };
    let qh = split(tape, q, n)?;
    let kh = split(tape, k, m)?;
    let vh = split(tape, v, m)?;
    let scores = tape.bmm(qh, kh, true)?;
    let scores = tape.scale(scores, scale)?;
    let p = tape.softmax(scores, 2)?;
    let o = tape.bmm(p, vh, false)?;
    let o = tape.reshape(o, &[b, heads, n, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    tape.reshape(o, &[b, n, d])
}

/// Multi-head self-attention over `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(format!("{name}.wq"), dim, dim),
            wk: Linear::new(format!("{name}.wk"), dim, dim),
            wv: Linear::new(format!("{name}.wv"), dim, dim),
            wo: Linear::new(format!("{name}.wo"), dim, dim),
            heads,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.wq.init(store, rng);
        self.wk.init(store, rng);
        self.wv.init(store, rng);
        self.wo.init_scaled(store, rng, 0.5);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let o = attention(&mut s.tape, q, k, v, self.heads)?;
        self.wo.forward(s, o)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            attn: SelfAttention::new(&format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let h = self.ln1.forward(s, x)?;
        let h = self.attn.forward(s, h)?;
        let x = s.tape.add(x, h)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.tape.add(x, h)
    }
}

/// Fixed sinusoidal table `[len, dim]`: even columns sin, odd columns cos.
pub fn sinusoidal_table<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            data.push(T::lit(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}
