//! Zero-phase FIR band-pass filtering.

use super::{EegRecording, SignalError};

pub const DEFAULT_TAPS: usize = 101;

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Hamming-windowed sinc low-pass normalized to unit DC gain.
fn lowpass(cutoff_hz: f64, fs: f64, taps: usize) -> Vec<f64> {
    let mid = (taps / 2) as f64;
    let fc = cutoff_hz / fs;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| 2.0 * fc * sinc(2.0 * fc * (n as f64 - mid)) * hamming(n, taps))
        .collect();
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Symmetric band-pass kernel: difference of two DC-normalized low-passes,
/// so the DC gain is exactly zero.
pub fn design_bandpass(low_hz: f64, high_hz: f64, fs: f64, taps: usize) -> Result<Vec<f64>, SignalError> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(SignalError::Band { low_hz, high_hz, nyquist: fs / 2.0 });
    }
    if taps % 2 == 0 || taps < 3 {
        return Err(SignalError::Invalid(format!("filter length must be odd and >= 3, got {taps}")));
    }
    let hi = lowpass(high_hz, fs, taps);
    let lo = lowpass(low_hz, fs, taps);
    Ok(hi.iter().zip(&lo).map(|(a, b)| a - b).collect())
}

/// Magnitude of the kernel's frequency response at `freq_hz`.
pub fn magnitude_response(kernel: &[f64], freq_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
    let (re, im) = kernel
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, &h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()));
    (re * re + im * im).sqrt()
}

/// Centered convolution with reflect-padded edges; output length equals
/// input length and a symmetric kernel introduces no delay.
pub fn filter_centered(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let len = x.len() as isize;
    let reflect = |i: isize| -> f64 {
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= len {
            j = 2 * (len - 1) - j;
        }
        x[j as usize]
    };
    (0..x.len())
        .map(|n| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &h)| h * reflect(n as isize + k as isize - half as isize))
                .sum()
        })
        .collect()
}

/// Band-passes every channel with a [`DEFAULT_TAPS`]-tap zero-phase FIR.
pub fn bandpass_filter(rec: &EegRecording, low_hz: f64, high_hz: f64) -> Result<EegRecording, SignalError> {
    bandpass_filter_with(rec, low_hz, high_hz, DEFAULT_TAPS)
}

pub fn bandpass_filter_with(
    rec: &EegRecording,
    low_hz: f64,
    high_hz: f64,
    taps: usize,
) -> Result<EegRecording, SignalError> {
    let kernel = design_bandpass(low_hz, high_hz, rec.sample_rate_hz as f64, taps)?;
    let len = rec.len();
    if len < taps {
        return Err(SignalError::TooShort { needed: taps, got: len });
    }
    let mut out = Vec::with_capacity(rec.channels() * len);
    for c in 0..rec.channels() {
        let ch: Vec<f64> = rec.channel(c).iter().map(|&v| v as f64).collect();
        out.extend(filter_centered(&ch, &kernel).into_iter().map(|v| v as f32));
    }
    rec.with_samples(rec.channels(), len, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, len: usize) -> Vec<f32> {
        (0..len).map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / fs).sin() as f32).collect()
    }

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn designed_response_meets_band_edges() {
        let k = design_bandpass(5.0, 95.0, 1000.0, 101).unwrap();
        let at50 = 20.0 * magnitude_response(&k, 50.0, 1000.0).log10();
        let at1 = 20.0 * magnitude_response(&k, 1.0, 1000.0).log10();
        assert!(at50.abs() < 1.0, "50 Hz gain {at50} dB");
        assert!(at1 <= -20.0, "1 Hz gain {at1} dB");
        assert!(magnitude_response(&k, 0.0, 1000.0) < 1e-12);
    }

    #[test]
    fn passband_sine_is_preserved_and_slow_sine_attenuated() {
        let fs = 1000.0;
        let len = 2000;
        let keep = EegRecording::new(1, len, sine(50.0, fs, len), fs as f32, 0, None).unwrap();
        let out = bandpass_filter(&keep, 5.0, 95.0).unwrap();
        // interior only: reflect padding perturbs the first and last half-kernel
        let ratio = rms(&out.channel(0)[200..1800]) / rms(&keep.channel(0)[200..1800]);
        assert!((20.0 * ratio.log10()).abs() < 1.0);

        let slow = EegRecording::new(1, len, sine(1.0, fs, len), fs as f32, 0, None).unwrap();
        let out = bandpass_filter(&slow, 5.0, 95.0).unwrap();
        let ratio = rms(&out.channel(0)[200..1800]) / rms(&slow.channel(0)[200..1800]);
        assert!(20.0 * ratio.log10() <= -20.0);
    }

    #[test]
    fn constant_channel_is_removed() {
        let rec = EegRecording::new(2, 300, vec![3.0; 600], 1000.0, 0, None).unwrap();
        let out = bandpass_filter(&rec, 5.0, 95.0).unwrap();
        for c in 0..2 {
            let mean = out.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 300.0;
            assert!(mean.abs() < 1e-3 * 3.0);
        }
    }

    #[test]
    fn filter_is_zero_phase() {
        let fs = 1000.0;
        let len = 1000;
        let x = sine(40.0, fs, len);
        let rec = EegRecording::new(1, len, x.clone(), fs as f32, 0, None).unwrap();
        let y = bandpass_filter(&rec, 5.0, 95.0).unwrap();
        let yc = y.channel(0);
        let mut best = (i32::MIN, f64::MIN);
        for lag in -10i32..=10 {
            let mut acc = 0.0;
            for n in 100..900 {
                acc += x[n] as f64 * yc[(n as i32 + lag) as usize] as f64;
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0);
    }

    #[test]
    fn invalid_band_and_short_input_are_errors() {
        let rec = EegRecording::new(1, 50, vec![0.0; 50], 1000.0, 0, None).unwrap();
        assert!(matches!(bandpass_filter(&rec, 5.0, 95.0), Err(SignalError::TooShort { .. })));
        let rec = EegRecording::new(1, 500, vec![0.0; 500], 100.0, 0, None).unwrap();
        assert!(matches!(bandpass_filter(&rec, 5.0, 95.0), Err(SignalError::Band { .. })));
        assert!(design_bandpass(50.0, 20.0, 1000.0, 101).is_err());
    }
}
