//! Synthetic paired corpus: class-keyed procedural images and recordings
//! whose spectra depend on the class.
//!
//! Recording model, per channel `c`:
//! `x(t) = A·Σ_j g_{c,j}(k)·sin(2π f_j(k) t + φ_j) + o_{s,c} + n_c(t)`
//! with class-keyed frequencies `f_j(k)` and spatial gains `g`, one random
//! phase per component, a subject-keyed DC offset, and AR(1) noise `n_c`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EegRecording, PairedDataset, PairedSample, SignalError, Split};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub classes: usize,
    pub subjects: usize,
    pub pretrain_count: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Channel count of paired recordings.
    pub channels: usize,
    /// Channel counts drawn uniformly for pretraining recordings.
    pub pretrain_channels: Vec<usize>,
    pub raw_length: usize,
    pub sample_rate_hz: f64,
    pub image_size: usize,
    pub signal_amplitude: f64,
    pub noise_amplitude: f64,
    pub ar_coefficient: f64,
    pub subject_offset: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            subjects: 4,
            pretrain_count: 512,
            train_pairs: 256,
            test_pairs: 64,
            channels: 32,
            pretrain_channels: vec![16, 24, 32],
            raw_length: 640,
            sample_rate_hz: 1000.0,
            image_size: 32,
            signal_amplitude: 1.0,
            noise_amplitude: 4.0,
            ar_coefficient: 0.9,
            subject_offset: 2.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::Invalid(format!("corpus spec: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.subjects == 0 || self.channels == 0 || self.raw_length == 0 {
            return bad("subjects, channels and raw_length must be positive");
        }
        if self.pretrain_channels.is_empty() || self.pretrain_channels.iter().any(|&c| c == 0) {
            return bad("pretrain_channels must be non-empty and positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(self.sample_rate_hz > 2.0 * Self::MAX_FREQ_HZ) {
            return bad("sample rate too low for the class frequency grid");
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad("ar_coefficient must be in [0, 1)");
        }
        if self.noise_amplitude < 0.0 || self.signal_amplitude < 0.0 || self.subject_offset < 0.0 {
            return bad("amplitudes must be non-negative");
        }
        Ok(())
    }

    const MIN_FREQ_HZ: f64 = 22.0;
    const MAX_FREQ_HZ: f64 = 78.0;

    /// Two component frequencies for `class`, inside the flat part of the
    /// default pass band. Classes take disjoint points of an even grid:
    /// the even points in order, and the odd points rotated by half.
    pub fn class_frequencies(&self, class: usize) -> [f64; 2] {
        let points = 2 * self.classes;
        let step = (Self::MAX_FREQ_HZ - Self::MIN_FREQ_HZ) / (points - 1) as f64;
        let at = |i: usize| Self::MIN_FREQ_HZ + step * i as f64;
        [at(2 * class), at(2 * ((class + self.classes / 2) % self.classes) + 1)]
    }

    fn spatial_gain(&self, class: usize, channel: usize, channels: usize, component: usize) -> f64 {
        let pos = channel as f64 / channels as f64;
        1.0 + 0.5 * (2.0 * std::f64::consts::PI * pos * (component + 1) as f64 + class as f64).cos()
    }

    fn subject_offsets(&self, seed: u64, subject: usize, channels: usize) -> Vec<f64> {
        let mut rng = stream(seed, "subject-offset", subject as u64);
        (0..channels)
            .map(|_| self.subject_offset * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// One raw recording; `rng` supplies phases and noise.
    pub fn recording<R: Rng + ?Sized>(
        &self,
        seed: u64,
        class: usize,
        subject: usize,
        channels: usize,
        label: Option<usize>,
        rng: &mut R,
    ) -> Result<EegRecording, SignalError> {
        let fs = self.sample_rate_hz;
        let freqs = self.class_frequencies(class);
        let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI)).collect();
        let offsets = self.subject_offsets(seed, subject, channels);
        let innovation = (1.0 - self.ar_coefficient * self.ar_coefficient).sqrt();
        let mut data = Vec::with_capacity(channels * self.raw_length);
        for c in 0..channels {
            let mut noise: f64 = rng.sample(StandardNormal);
            for n in 0..self.raw_length {
                let t = n as f64 / fs;
                let mut v = offsets[c];
                for (j, (&f, &ph)) in freqs.iter().zip(&phases).enumerate() {
                    v += self.signal_amplitude
                        * self.spatial_gain(class, c, channels, j)
                        * (2.0 * std::f64::consts::PI * f * t + ph).sin();
                }
                if n > 0 {
                    let e: f64 = rng.sample(StandardNormal);
                    noise = self.ar_coefficient * noise + innovation * e;
                }
                v += self.noise_amplitude * noise;
                data.push(v as f32);
            }
        }
        EegRecording::new(channels, self.raw_length, data, fs as f32, subject as u32, label)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether pixel offset `(dx, dy)` from the centre lies in primitive `kind`
/// of radius `r`.
fn inside(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match kind % 8 {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= 0.8 * r && ay <= 0.8 * r,
        2 => dy <= 0.8 * r && dy >= -r && ax <= (dy + r) * 0.5,
        3 => ax + ay <= r,
        4 => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        5 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        6 => ax <= r && ay <= 0.35 * r,
        _ => ay <= r && ax <= 0.35 * r,
    }
}

/// `[3, size, size]` image: a class-coloured, class-shaped primitive with
/// jittered centre and radius on a dark background.
pub fn class_image<R: Rng + ?Sized>(class: usize, classes: usize, size: usize, rng: &mut R) -> Tensor<f32> {
    let color = hsv_to_rgb(class as f64 / classes as f64, 0.85, 0.95);
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.125..0.125) * s;
    let cy = s / 2.0 + rng.random_range(-0.125..0.125) * s;
    let r = rng.random_range(0.22..0.34) * s;
    let bg = 0.1;
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let hit = inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for ch in 0..3 {
                data[ch * size * size + y * size + x] = if hit { color[ch] } else { bg } as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("consistent image shape")
}

pub struct SyntheticCorpus {
    pub pretrain: Vec<EegRecording>,
    pub train: PairedDataset,
    pub test: PairedDataset,
}

fn paired(spec: &CorpusSpec, seed: u64, split: Split, count: usize) -> Result<PairedDataset, SignalError> {
    let tag = match split {
        Split::Train => "pair-train",
        Split::Test => "pair-test",
    };
    let items = (0..count)
        .map(|i| {
            let class = i % spec.classes;
            let subject = (i / spec.classes) % spec.subjects;
            let mut rng = stream(seed, tag, i as u64);
            let recording = spec.recording(seed, class, subject, spec.channels, Some(class), &mut rng)?;
            let image = class_image(class, spec.classes, spec.image_size, &mut rng);
            Ok(PairedSample { recording, image, class })
        })
        .collect::<Result<Vec<_>, SignalError>>()?;
    PairedDataset::new(items, split, spec.classes)
}

/// Deterministic corpus: per-sample streams come from `(seed, split, index)`.
/// Classes cycle through the paired splits, so both are balanced whenever
/// their size is a multiple of the class count. Pretraining recordings are
/// unlabeled.
pub fn generate_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus, SignalError> {
    spec.validate()?;
    let pretrain = (0..spec.pretrain_count)
        .map(|i| {
            let mut rng = stream(seed, "pretrain", i as u64);
            let class = rng.random_range(0..spec.classes);
            let subject = rng.random_range(0..spec.subjects);
            let channels = spec.pretrain_channels[rng.random_range(0..spec.pretrain_channels.len())];
            spec.recording(seed, class, subject, channels, None, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let train = paired(spec, seed, Split::Train, spec.train_pairs)?;
    let test = paired(spec, derive_seed(seed, "test-split", 0), Split::Test, spec.test_pairs)?;
    Ok(SyntheticCorpus { pretrain, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { pretrain_count: 6, train_pairs: 16, test_pairs: 8, channels: 4, pretrain_channels: vec![2, 4], ..Default::default() }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_corpus(&small_spec(), 5).unwrap();
        let b = generate_synthetic_corpus(&small_spec(), 5).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic_corpus(&small_spec(), 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_noise_recordings_differ_only_by_phase() {
        let spec = CorpusSpec { noise_amplitude: 0.0, ..small_spec() };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = spec.recording(9, 3, 1, 4, Some(3), &mut r1).unwrap();
        let b = spec.recording(9, 3, 1, 4, Some(3), &mut r2).unwrap();
        assert_ne!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(a, spec.recording(9, 3, 1, 4, Some(3), &mut r1).unwrap());
        // Peak-to-peak range over a long window barely depends on phase.
        for c in 0..4 {
            let span = |x: &[f32]| x.iter().cloned().fold(f32::MIN, f32::max) - x.iter().cloned().fold(f32::MAX, f32::min);
            assert!((span(a.channel(c)) - span(b.channel(c))).abs() < 0.15 * span(a.channel(c)));
        }
    }

    #[test]
    fn paired_splits_are_balanced_and_consistent() {
        let corpus = generate_synthetic_corpus(&CorpusSpec { pretrain_count: 0, ..small_spec() }, 3).unwrap();
        let mut counts = vec![0; 8];
        for p in &corpus.test.items {
            counts[p.class] += 1;
            assert_eq!(p.recording.label, Some(p.class));
            assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(counts.iter().all(|&c| c == 1));
        assert_ne!(corpus.train.items[0].recording, corpus.test.items[0].recording);
    }

    #[test]
    fn class_frequencies_are_distinct_and_in_band() {
        let spec = CorpusSpec::default();
        let mut all = Vec::new();
        for k in 0..spec.classes {
            for f in spec.class_frequencies(k) {
                assert!((20.0..=80.0).contains(&f));
                all.push(f);
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(all.windows(2).all(|w| w[1] - w[0] > 0.5));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_synthetic_corpus(&CorpusSpec { classes: 1, ..small_spec() }, 0).is_err());
        assert!(generate_synthetic_corpus(&CorpusSpec { sample_rate_hz: 100.0, ..small_spec() }, 0).is_err());
        assert!(generate_synthetic_corpus(&CorpusSpec { pretrain_channels: vec![], ..small_spec() }, 0).is_err());
    }
}
