use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sd_loss, AeMode, ConditionalDenoiser, DenoiserConfig, DiffusionSchedule, ImageAutoencoder};
use super::autoencoder::AeConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::Session;
use crate::numerics::{Adam, AdamConfig, ParamStore, Tensor};
use crate::rng::stream;

pub(crate) fn pick(items: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let rows: Vec<Tensor<f32>> = idx
        .iter()
        .map(|&i| {
            let per = &items.shape()[1..];
            Tensor::new(per, items.row(i).to_vec())
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::stack(&rows)?)
}

/// Epoch-shuffled minibatch indices for `step`.
pub(crate) fn minibatch(n: usize, batch: usize, step: usize, seed: u64, tag: &str) -> Vec<usize> {
    let bs = batch.min(n).max(1);
    let per_epoch = n / bs;
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag, epoch as u64));
    order[slot * bs..(slot + 1) * bs].to_vec()
}

pub struct AeOutcome {
    /// Autoencoder parameters, all frozen.
    pub params: ParamStore<f32>,
    pub losses: Vec<f64>,
    /// Mean per-pixel squared error over the training images.
    pub recon_mse: f64,
}

/// MSE-trains the autoencoder on `images [n, 3, H, W]`, then fixes the
/// latent scale so encoded training images have unit standard deviation.
pub fn train_autoencoder(images: &Tensor<f32>, cfg: &AeConfig, seed: u64) -> Result<AeOutcome> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::Invalid(format!("autoencoder images {shape:?}, expected [n, 3, S, S]")));
    }
    let ae = ImageAutoencoder::new(cfg.clone(), shape[2])?;
    let mut params = ParamStore::new();
    ae.init(&mut params, &mut stream(seed, "ae-init", 0));
    let mut losses = Vec::new();
    if cfg.mode == AeMode::Conv {
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: Some(1.0), ..Default::default() });
        for step in 0..cfg.steps {
            let idx = minibatch(shape[0], cfg.batch_size, step, seed, "ae-shuffle");
            let x = pick(images, &idx)?;
            let diverged = Error::at_step("autoencoder training", step);
            let mut s = Session::new(&params, true);
            let xv = s.input(x)?;
            let z = ae.encode_var(&mut s, xv).map_err(&diverged)?;
            let y = ae.decode_var(&mut s, z).map_err(&diverged)?;
            let loss = s.tape.mse(y, xv).map_err(&diverged)?;
            losses.push(s.value(loss).item() as f64);
            let grads = s.param_grads(loss).map_err(&diverged)?;
            drop(s);
            adam.step(&mut params, &grads).map_err(&diverged)?;
        }
        let z = ae.encode(&params, images)?;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / z.numel() as f64;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.numel() as f64;
        let scale = 1.0 / var.sqrt().max(1e-6);
        params.insert(ImageAutoencoder::LATENT_SCALE, Tensor::new(&[1], vec![scale as f32])?, false);
    }
    params.set_all_trainable(false);
    let recon = ae.decode(&params, &ae.encode(&params, images)?)?;
    let recon_mse = recon
        .data()
        .iter()
        .zip(images.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / images.numel() as f64;
    Ok(AeOutcome { params, losses, recon_mse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, lr: 1e-3, clip_norm: Some(1.0) }
    }
}

pub struct LdmOutcome {
    /// Denoiser parameters, all trainable.
    pub params: ParamStore<f32>,
    pub losses: Vec<f64>,
}

/// Unconditional warm-up of a fresh denoiser on latents `[n, c_z, h, w]`,
/// using the learned null context.
pub fn train_unconditional(
    latents: &Tensor<f32>,
    den_cfg: &DenoiserConfig,
    sched: &DiffusionSchedule,
    cfg: &LdmConfig,
    seed: u64,
) -> Result<LdmOutcome> {
    let shape = latents.shape();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("latents {shape:?}, expected [n, c, h, w]")));
    }
    let net = ConditionalDenoiser::new(den_cfg.clone(), shape[1])?;
    let mut params = ParamStore::new();
    net.init(&mut params, &mut stream(seed, "ldm-init", 0));
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..Default::default() });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = minibatch(shape[0], cfg.batch_size, step, seed, "ldm-shuffle");
        let z0 = pick(latents, &idx)?;
        let diverged = Error::at_step("unconditional diffusion training", step);
        let mut rng = stream(seed, "ldm-noise", step as u64);
        let mut s = Session::new(&params, true);
        let loss = sd_loss(&mut s, &z0, sched, &mut rng, |s, zt, ts| {
            let ctx = net.null_context(s, ts.len())?;
            net.forward(s, zt, ts, ctx)
        })
        .map_err(&diverged)?;
        losses.push(s.value(loss).item() as f64);
        let grads = s.param_grads(loss).map_err(&diverged)?;
        drop(s);
        adam.step(&mut params, &grads).map_err(&diverged)?;
    }
    Ok(LdmOutcome { params, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Classifier-free guidance scale `w`: the prediction is
    /// `ε_null + w·(ε_ctx − ε_null)`, so 1 is plain conditional sampling.
    pub guidance: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { guidance: 4.0 }
    }
}

/// Ancestral sampling of `[B, c_z, h, w]` latents with one RNG stream per
/// image. `ctx` is `[B, M, d_τ]`; `None` samples with the null context.
pub fn sample_latents<R: rand::Rng>(
    net: &ConditionalDenoiser,
    params: &ParamStore<f32>,
    sched: &DiffusionSchedule,
    latent_shape: [usize; 3],
    ctx: Option<&Tensor<f32>>,
    cfg: &SampleConfig,
    streams: &mut [R],
) -> Result<Tensor<f32>> {
    let b = streams.len();
    if let Some(c) = ctx {
        if c.shape().len() != 3 || c.shape()[0] != b {
            return Err(Error::Invalid(format!("context {:?} for {b} samples", c.shape())));
        }
    }
    if !cfg.guidance.is_finite() {
        return Err(Error::Invalid(format!("guidance scale {}", cfg.guidance)));
    }
    let w = cfg.guidance as f32;
    let shape = [b, latent_shape[0], latent_shape[1], latent_shape[2]];
    let z = super::ancestral_sample(&shape, sched, streams, |z, t| {
        let mut s = Session::new(params, false);
        let zt = s.input(z.clone())?;
        let ts = vec![t; b];
        let null = net.null_context(&mut s, b)?;
        let Some(c) = ctx else {
            let eps = net.forward(&mut s, zt, &ts, null)?;
            return Ok(s.value(eps).clone());
        };
        let c = s.input(c.clone())?;
        let eps_c = net.forward(&mut s, zt, &ts, c)?;
        if w == 1.0 {
            return Ok(s.value(eps_c).clone());
        }
        let eps_u = net.forward(&mut s, zt, &ts, null)?;
        let (ec, eu) = (s.value(eps_c), s.value(eps_u));
        let data = ec.data().iter().zip(eu.data()).map(|(&c, &u)| u + w * (c - u)).collect();
        Tensor::new(ec.shape(), data)
    })
    .map_err(Error::at_step("sampling", 0))?;
    Ok(z)
}
