//! Multichannel recordings: preprocessing, temporal tokens, corpus files and
//! the synthetic paired corpus.

pub mod filter;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub use filter::bandpass_filter;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("band {low_hz}-{high_hz} Hz invalid for Nyquist {nyquist} Hz")]
    Band { low_hz: f64, high_hz: f64, nyquist: f64 },
    #[error("recording too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("recording has {got} channels, more than the target {target}")]
    TooManyChannels { got: usize, target: usize },
    #[error("length {len} is not divisible by token size {token_size}")]
    NotDivisible { len: usize, token_size: usize },
    #[error("non-finite sample in recording")]
    NonFinite,
    #[error("{0}")]
    Invalid(String),
}

/// One `channels × time` recording.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    samples: Tensor<f32>,
    pub sample_rate_hz: f32,
    pub subject_id: u32,
    pub label: Option<usize>,
}

impl EegRecording {
    pub fn new(
        channels: usize,
        len: usize,
        samples: Vec<f32>,
        sample_rate_hz: f32,
        subject_id: u32,
        label: Option<usize>,
    ) -> Result<Self, SignalError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(SignalError::Invalid(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        let samples = Tensor::new(&[channels, len], samples).map_err(|e| SignalError::Invalid(e.to_string()))?;
        Ok(Self { samples, sample_rate_hz, subject_id, label })
    }

    /// Same metadata, new sample matrix.
    pub fn with_samples(&self, channels: usize, len: usize, samples: Vec<f32>) -> Result<Self, SignalError> {
        Self::new(channels, len, samples, self.sample_rate_hz, self.subject_id, self.label)
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn samples(&self) -> &Tensor<f32> {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.samples.row(c)
    }
}

/// Cyclic channel replication up to `target_c`: channel `j` copies `j mod C`.
pub fn pad_channels(rec: &EegRecording, target_c: usize) -> Result<EegRecording, SignalError> {
    let c = rec.channels();
    if c > target_c {
        return Err(SignalError::TooManyChannels { got: c, target: target_c });
    }
    let mut out = Vec::with_capacity(target_c * rec.len());
    for j in 0..target_c {
        out.extend_from_slice(rec.channel(j % c));
    }
    rec.with_samples(target_c, rec.len(), out)
}

/// Keeps the first `len` samples of every channel.
pub fn truncate(rec: &EegRecording, len: usize) -> Result<EegRecording, SignalError> {
    if rec.len() < len {
        return Err(SignalError::TooShort { needed: len, got: rec.len() });
    }
    let mut out = Vec::with_capacity(rec.channels() * len);
    for c in 0..rec.channels() {
        out.extend_from_slice(&rec.channel(c)[..len]);
    }
    rec.with_samples(rec.channels(), len, out)
}

pub const ZSCORE_EPS: f64 = 1e-8;

/// Per-channel standardization; a constant channel maps to zeros.
pub fn zscore(rec: &EegRecording) -> Result<EegRecording, SignalError> {
    let len = rec.len();
    let mut out = Vec::with_capacity(rec.channels() * len);
    for c in 0..rec.channels() {
        let ch = rec.channel(c);
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
        let denom = var.sqrt() + ZSCORE_EPS;
        out.extend(ch.iter().map(|&v| ((v as f64 - mean) / denom) as f32));
    }
    rec.with_samples(rec.channels(), len, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub channels: usize,
    pub length: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { channels: 32, length: 512, low_hz: 5.0, high_hz: 95.0 }
    }
}

/// band-pass → [`standardize`].
pub fn preprocess(rec: &EegRecording, cfg: &PreprocessConfig) -> Result<EegRecording, SignalError> {
    let filtered = bandpass_filter(rec, cfg.low_hz, cfg.high_hz)?;
    standardize(&filtered, cfg)
}

/// truncate → pad channels → per-channel z-score.
pub fn standardize(rec: &EegRecording, cfg: &PreprocessConfig) -> Result<EegRecording, SignalError> {
    let cut = truncate(rec, cfg.length)?;
    let padded = pad_channels(&cut, cfg.channels)?;
    zscore(&padded)
}

/// A recording cut into `N = L / S` temporal tokens. Token `i` holds all
/// channels over steps `[i·S, (i+1)·S)`, channel-major: element `c·S + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor<f32>,
    pub token_size: usize,
    pub channels: usize,
    pub sample_rate_hz: f32,
    pub subject_id: u32,
    pub label: Option<usize>,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

pub fn tokenize(rec: &EegRecording, token_size: usize) -> Result<TokenSequence, SignalError> {
    let (c, len) = (rec.channels(), rec.len());
    if token_size == 0 || len % token_size != 0 {
        return Err(SignalError::NotDivisible { len, token_size });
    }
    let n = len / token_size;
    let mut data = Vec::with_capacity(c * len);
    for i in 0..n {
        for ch in 0..c {
            data.extend_from_slice(&rec.channel(ch)[i * token_size..(i + 1) * token_size]);
        }
    }
    let tokens = Tensor::new(&[n, c * token_size], data).map_err(|e| SignalError::Invalid(e.to_string()))?;
    Ok(TokenSequence {
        tokens,
        token_size,
        channels: c,
        sample_rate_hz: rec.sample_rate_hz,
        subject_id: rec.subject_id,
        label: rec.label,
    })
}

pub fn detokenize(seq: &TokenSequence) -> Result<EegRecording, SignalError> {
    let (n, s, c) = (seq.n_tokens(), seq.token_size, seq.channels);
    let len = n * s;
    let mut data = vec![0.0f32; c * len];
    for i in 0..n {
        let tok = seq.tokens.row(i);
        for ch in 0..c {
            data[ch * len + i * s..ch * len + (i + 1) * s].copy_from_slice(&tok[ch * s..(ch + 1) * s]);
        }
    }
    EegRecording::new(c, len, data, seq.sample_rate_hz, seq.subject_id, seq.label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub recording: EegRecording,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class: usize,
}

/// Recordings paired with the image shown while they were taken.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub items: Vec<PairedSample>,
    pub split: Split,
    pub classes: usize,
}

impl PairedDataset {
    pub fn new(items: Vec<PairedSample>, split: Split, classes: usize) -> Result<Self, SignalError> {
        for (i, it) in items.iter().enumerate() {
            if it.recording.label != Some(it.class) {
                return Err(SignalError::Invalid(format!("pair {i}: recording label differs from image class")));
            }
            if it.class >= classes {
                return Err(SignalError::Invalid(format!("pair {i}: class {} out of {classes}", it.class)));
            }
            if it.image.rank() != 3 || it.image.shape()[0] != 3 {
                return Err(SignalError::Invalid(format!("pair {i}: image shape {:?}", it.image.shape())));
            }
        }
        Ok(Self { items, split, classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|p| p.class).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, len: usize) -> EegRecording {
        let data = (0..c * len).map(|i| i as f32).collect();
        EegRecording::new(c, len, data, 1000.0, 3, Some(1)).unwrap()
    }

    #[test]
    fn pad_channels_is_cyclic() {
        let rec = ramp(3, 4);
        let p = pad_channels(&rec, 8).unwrap();
        for (j, src) in [0, 1, 2, 0, 1, 2, 0, 1].iter().enumerate() {
            assert_eq!(p.channel(j), rec.channel(*src));
        }
        assert_eq!(pad_channels(&rec, 3).unwrap(), rec);
        let one = ramp(1, 5);
        let p = pad_channels(&one, 4).unwrap();
        for j in 0..4 {
            assert_eq!(p.channel(j), one.channel(0));
        }
        assert!(matches!(pad_channels(&rec, 2), Err(SignalError::TooManyChannels { .. })));
    }

    #[test]
    fn preprocess_shapes_and_standardizes() {
        let len = 700;
        let mut data = Vec::new();
        for c in 0..5 {
            for n in 0..len {
                let t = n as f64 / 1000.0;
                data.push((3.0 * (2.0 * std::f64::consts::PI * (30.0 + c as f64) * t).sin() + 10.0) as f32);
            }
        }
        let rec = EegRecording::new(5, len, data, 1000.0, 0, None).unwrap();
        for cfg in [PreprocessConfig::default(), PreprocessConfig { channels: 128, ..Default::default() }] {
            let out = preprocess(&rec, &cfg).unwrap();
            assert_eq!(out.samples().shape(), &[cfg.channels, 512]);
            for c in 0..cfg.channels {
                let ch = out.channel(c);
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / 512.0;
                let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 512.0).sqrt();
                assert!(mean.abs() < 1e-5);
                assert!((std - 1.0).abs() < 1e-4);
            }
        }
        let short = EegRecording::new(1, 300, vec![0.5; 300], 1000.0, 0, None).unwrap();
        assert!(matches!(preprocess(&short, &PreprocessConfig::default()), Err(SignalError::TooShort { .. })));
    }

    #[test]
    fn constant_channel_zscores_to_zero() {
        let rec = EegRecording::new(1, 10, vec![4.0; 10], 1000.0, 0, None).unwrap();
        assert!(zscore(&rec).unwrap().channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokenize_counts_and_layout() {
        let rec = ramp(32, 512);
        let t = tokenize(&rec, 4).unwrap();
        assert_eq!(t.n_tokens(), 128);
        assert_eq!(t.token_dim(), 128);
        assert_eq!(t.tokens.at(&[2, 4 + 1]), rec.channel(1)[9]);
        let whole = tokenize(&rec, 512).unwrap();
        assert_eq!(whole.n_tokens(), 1);
        assert_eq!(whole.tokens.data(), rec.samples().data());
        assert!(matches!(tokenize(&ramp(2, 10), 4), Err(SignalError::NotDivisible { .. })));
    }

    #[test]
    fn pairing_validates_labels() {
        let rec = ramp(1, 4);
        let bad = PairedSample { recording: rec.clone(), image: Tensor::zeros(&[3, 2, 2]), class: 0 };
        assert!(PairedDataset::new(vec![bad], Split::Train, 2).is_err());
        let good = PairedSample { recording: rec, image: Tensor::zeros(&[3, 2, 2]), class: 1 };
        assert!(PairedDataset::new(vec![good], Split::Train, 2).is_ok());
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip_is_bit_exact(c in 1usize..6, n in 1usize..9, s in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c * n * s).map(|_| rng.random_range(-5.0..5.0)).collect();
            let rec = EegRecording::new(c, n * s, data, 250.0, 1, Some(0)).unwrap();
            let back = detokenize(&tokenize(&rec, s).unwrap()).unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn padding_then_dropping_is_identity(c in 1usize..6, extra in 0usize..7, len in 1usize..20) {
            let rec = ramp(c, len);
            let padded = pad_channels(&rec, c + extra).unwrap();
            let kept: Vec<f32> = (0..c).flat_map(|j| padded.channel(j).to_vec()).collect();
            prop_assert_eq!(kept.as_slice(), rec.samples().data());
        }
    }

    #[test]
    fn standardization_is_idempotent_on_preprocessed_data() {
        let len = 600;
        let data: Vec<f32> = (0..3 * len)
            .map(|i| {
                let (c, n) = (i / len, i % len);
                ((2.0 * std::f64::consts::PI * (35.0 + 10.0 * c as f64) * n as f64 / 1000.0).sin()) as f32
            })
            .collect();
        let rec = EegRecording::new(3, len, data, 1000.0, 0, None).unwrap();
        let cfg = PreprocessConfig { channels: 4, length: 512, ..Default::default() };
        let once = preprocess(&rec, &cfg).unwrap();
        let twice = standardize(&once, &cfg).unwrap();
        let diff = once.samples().max_abs_diff(twice.samples());
        assert!(diff < 1e-5, "{diff}");
    }
}
