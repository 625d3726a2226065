//! Latent diffusion: noise schedule, forward corruption, the noise-prediction
//! loss, ancestral sampling, the image autoencoder and the conditional
//! denoiser.

pub mod autoencoder;
pub mod ppm;
mod train;
pub mod unet;

pub use autoencoder::{AeConfig, AeMode, ImageAutoencoder};
pub(crate) use train::{minibatch, pick};
pub use train::{sample_latents, train_autoencoder, train_unconditional, AeOutcome, LdmConfig, LdmOutcome, SampleConfig};
pub use unet::{ConditionProjector, ConditionalDenoiser, DenoiserConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::nn::{attention, Linear, Session};
use crate::numerics::{NumError, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

// β_end 0.04 over 200 steps brings ᾱ_T to 0.017, so sampling can start
// from pure noise; 0.02 would leave ᾱ_T at 0.13.
impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.04 }
    }
}

/// Linear-β DDPM schedule; `t` runs over `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule, NumError> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(NumError::Invalid(format!("schedule T={steps}, beta {beta_start}..{beta_end}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut prod = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            prod *= 1.0 - b;
            prod
        })
        .collect();
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self, NumError> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), NumError> {
        if t == 0 || t > self.steps() {
            return Err(NumError::Invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>, NumError> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Per-sample [`q_sample`] over a batch `[B, ...]` with one timestep each.
pub fn q_sample_batch<T: Scalar>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>, NumError> {
    if z0.shape() != eps.shape() || z0.shape()[0] != ts.len() {
        return Err(NumError::Shape(format!("q_sample {:?} with noise {:?}", z0.shape(), eps.shape())));
    }
    let per = z0.numel() / ts.len();
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let zs = &z0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(zs.iter().zip(es).map(|(&z, &e)| a * z + b * e));
    }
    Tensor::new(z0.shape(), out)
}

pub fn randn_like<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// `softmax(Q·Kᵀ/√d)·V` with `Q = x·W_Q`, `K = ctx·W_K`, `V = ctx·W_V`.
/// Weights are stored input-major: `W_Q [d_ε, d]`, `W_K, W_V [d_τ, d]`.
/// Plain-tensor form for single sequences `x [N, d_ε]`, `ctx [M, d_τ]`.
pub fn cross_attention<T: Scalar>(
    x: &Tensor<T>,
    ctx: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<Tensor<T>, NumError> {
    let mut tape = Tape::new();
    let [x, ctx, wq, wk, wv] = [x, ctx, wq, wk, wv].map(|t| tape.constant(t.clone()));
    let (x, ctx) = (x?, ctx?);
    let x = batch1(&mut tape, x)?;
    let ctx = batch1(&mut tape, ctx)?;
    let out = cross_attention_tape(&mut tape, x, ctx, wq?, wk?, wv?, 1)?;
    let v = tape.value(out);
    v.reshape(&v.shape()[1..])
}

/// The `[N, M]` weights `softmax(Q·Kᵀ/√d)` of [`cross_attention`].
pub fn attention_weights<T: Scalar>(
    x: &Tensor<T>,
    ctx: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
) -> Result<Tensor<T>, NumError> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone())?;
    let ctx = tape.constant(ctx.clone())?;
    let wq = tape.constant(wq.clone())?;
    let wk = tape.constant(wk.clone())?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(ctx, wk)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let d = tape.shape(wq)[1] as f64;
    let scores = tape.scale(scores, 1.0 / d.sqrt())?;
    let p = tape.softmax(scores, 1)?;
    Ok(tape.value(p).clone())
}

fn batch1<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var, NumError> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 {
        return Err(NumError::Shape(format!("expected a matrix, got {s:?}")));
    }
    tape.reshape(v, &[1, s[0], s[1]])
}

/// Batched cross-attention of `x [B, N, d_ε]` over `ctx [B, M, d_τ]`.
pub fn cross_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ctx: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Result<Var, NumError> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(ctx, wk)?;
    let v = tape.matmul(ctx, wv)?;
    attention(tape, q, k, v, heads)
}

/// Names of the projection layers of one cross-attention block.
#[derive(Clone, Debug)]
pub struct CrossAttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl CrossAttentionWeights {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, ctx: Var, heads: usize) -> Result<Var, NumError> {
        let wq = s.param(&self.wq.weight_name())?;
        let wk = s.param(&self.wk.weight_name())?;
        let wv = s.param(&self.wv.weight_name())?;
        cross_attention_tape(&mut s.tape, x, ctx, wq, wk, wv, heads)
    }
}

/// Mean squared error between drawn noise and its prediction. Each sample
/// of `z0 [B, ...]` gets a timestep uniform in `1..=T` and fresh noise.
/// `predict(session, z_t, timesteps)` returns `ε̂` shaped like `z_t`.
pub fn sd_loss<T, R, F>(
    s: &mut Session<'_, T>,
    z0: &Tensor<T>,
    sched: &DiffusionSchedule,
    rng: &mut R,
    mut predict: F,
) -> Result<Var, NumError>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut Session<'_, T>, Var, &[usize]) -> Result<Var, NumError>,
{
    let b = z0.shape()[0];
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = randn_like(z0.shape(), rng);
    let zt = q_sample_batch(z0, &ts, &eps, sched)?;
    let zt = s.input(zt)?;
    let pred = predict(s, zt, &ts)?;
    let eps = s.input(eps)?;
    s.tape.mse(pred, eps)
}

/// One reverse step with `σ_t² = β_t`:
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·ξ`, no noise at `t = 1`.
pub fn reverse_step<T: Scalar>(
    zt: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>, NumError> {
    sched.check(t)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let (coef, inv) = (T::lit(coef), T::lit(inv));
    let mean = zt.zip_map(eps_hat, |z, e| (z - coef * e) * inv)?;
    match noise {
        Some(xi) if t > 1 => {
            let sigma = T::lit(sched.beta(t).sqrt());
            mean.zip_map(xi, |m, x| m + sigma * x)
        }
        _ => Ok(mean),
    }
}

/// Ancestral chain from `z_T ~ N(0, I)` to `z_0` for a batch `[B, ...]`.
/// Sample `i` draws all of its noise from `rngs[i]`, so results do not
/// depend on how samples are batched.
pub fn ancestral_sample<T, R, F>(
    shape: &[usize],
    sched: &DiffusionSchedule,
    rngs: &mut [R],
    mut predict: F,
) -> Result<Tensor<T>, NumError>
where
    T: Scalar,
    R: Rng,
    F: FnMut(&Tensor<T>, usize) -> Result<Tensor<T>, NumError>,
{
    if shape.first() != Some(&rngs.len()) {
        return Err(NumError::Shape(format!("{} streams for batch shape {shape:?}", rngs.len())));
    }
    let per: Vec<usize> = shape[1..].to_vec();
    let draw = |rngs: &mut [R]| -> Result<Tensor<T>, NumError> {
        let parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| randn_like(&per, r)).collect();
        Tensor::stack(&parts)
    };
    let mut z = draw(rngs)?;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predict(&z, t)?;
        let noise = if t > 1 { Some(draw(rngs)?) } else { None };
        z = reverse_step(&z, &eps_hat, t, sched, noise.as_ref())?;
        if !z.is_finite() {
            return Err(NumError::NonFinite("reverse step"));
        }
    }
    Ok(z)
}
