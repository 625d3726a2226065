//! Convolutional image autoencoder (×4 spatial reduction) or an identity
//! pass-through that keeps pixels as the latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::nn::{Conv2d, Session};
use crate::numerics::{NumError, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeMode {
    Conv,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub mode: AeMode,
    pub channels: usize,
    pub latent_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { mode: AeMode::Conv, channels: 32, latent_channels: 4, steps: 400, batch_size: 16, lr: 2e-3 }
    }
}

pub const AE_PREFIX: &str = "ae.";

#[derive(Clone, Debug)]
pub struct ImageAutoencoder {
    pub cfg: AeConfig,
    pub image_size: usize,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

impl ImageAutoencoder {
    /// Multiplier applied to encoder outputs so latents have unit spread.
    pub const LATENT_SCALE: &'static str = "ae.latent_scale";

    pub fn new(cfg: AeConfig, image_size: usize) -> Result<Self, NumError> {
        if cfg.mode == AeMode::Conv && (image_size % 4 != 0 || cfg.channels == 0 || cfg.latent_channels == 0) {
            return Err(NumError::Invalid(format!(
                "autoencoder needs image size divisible by 4 and positive widths, got {image_size}"
            )));
        }
        let c = cfg.channels;
        let (enc, dec) = match cfg.mode {
            AeMode::Identity => (Vec::new(), Vec::new()),
            AeMode::Conv => (
                vec![
                    Conv2d::same3("ae.enc0", 3, c),
                    Conv2d::new("ae.enc1", c, c, 3, 2, 1),
                    Conv2d::new("ae.enc2", c, 2 * c, 3, 2, 1),
                    Conv2d::same3("ae.enc3", 2 * c, cfg.latent_channels),
                ],
                vec![
                    Conv2d::same3("ae.dec0", cfg.latent_channels, 2 * c),
                    Conv2d::same3("ae.dec1", 2 * c, c),
                    Conv2d::same3("ae.dec2", c, c),
                    Conv2d::same3("ae.dec3", c, 3),
                ],
            ),
        };
        Ok(Self { cfg, image_size, enc, dec })
    }

    /// `[c_z, h, w]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        match self.cfg.mode {
            AeMode::Identity => [3, self.image_size, self.image_size],
            AeMode::Conv => [self.cfg.latent_channels, self.image_size / 4, self.image_size / 4],
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for conv in self.enc.iter().chain(&self.dec) {
            conv.init(store, rng);
        }
        store.insert(Self::LATENT_SCALE, Tensor::ones(&[1]), false);
    }

    fn scale<T: Scalar>(&self, s: &Session<'_, T>) -> Result<T, NumError> {
        Ok(s.store().value(Self::LATENT_SCALE)?.data()[0])
    }

    /// `[B, 3, H, W] → [B, c_z, h, w]`, scaled.
    pub fn encode_var<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(s, h)?;
            if i + 1 < self.enc.len() {
                h = s.tape.silu(h)?;
            }
        }
        let k = self.scale(s)?;
        if self.enc.is_empty() && k == T::one() {
            return Ok(h);
        }
        s.tape.scale(h, k.to_f64_lossy())
    }

    /// Inverse of [`Self::encode_var`]'s scaling, then the decoder stack.
    pub fn decode_var<T: Scalar>(&self, s: &mut Session<'_, T>, z: Var) -> Result<Var, NumError> {
        let k = self.scale(s)?;
        let mut h = if k == T::one() { z } else { s.tape.scale(z, 1.0 / k.to_f64_lossy())? };
        for (i, conv) in self.dec.iter().enumerate() {
            if i == 1 || i == 2 {
                h = s.tape.upsample2x(h)?;
            }
            h = conv.forward(s, h)?;
            if i + 1 < self.dec.len() {
                h = s.tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>, NumError> {
        let mut s = Session::new(store, false);
        let x = s.input(images.clone())?;
        let z = self.encode_var(&mut s, x)?;
        Ok(s.value(z).clone())
    }

    /// Decoded images clamped to `[0, 1]`.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>, NumError> {
        let mut s = Session::new(store, false);
        let zv = s.input(z.clone())?;
        let x = self.decode_var(&mut s, zv)?;
        Ok(s.value(x).map(|v| v.max(T::zero()).min(T::one())))
    }
}
