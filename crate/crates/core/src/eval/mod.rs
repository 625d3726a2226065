//! N-way top-1 accuracy of generated images under a separately trained
//! probe classifier, its binomial error bars, and the ablation grid.

mod ablation;

pub use ablation::{
    ablation_csv, generator_params, run_ablation, run_row, table1_grid, AblationResult, AblationRow, EncoderCache, Foundation,
    Groups, RowOutput,
};

use crate::align::{train_classifier, ClassifierConfig, ClassifierOutcome, ImageClassifier};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const PROBE_PREFIX: &str = "probe.";

/// Desk probe: wider than the image encoder and trained on noisy copies.
pub fn default_probe_config() -> ClassifierConfig {
    ClassifierConfig { width: 24, embed_dim: 48, steps: 400, batch_size: 32, lr: 2e-3, augment_noise: 0.1 }
}

pub struct Probe {
    pub model: ImageClassifier,
    pub params: ParamStore<f32>,
    pub train_accuracy: f64,
}

impl Probe {
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.model.predict(&self.params, images)?)
    }
}

pub fn train_probe(
    images: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Probe> {
    let model = ImageClassifier::new(PROBE_PREFIX, cfg.clone(), classes)?;
    let ClassifierOutcome { params, train_accuracy, .. } = train_classifier(&model, images, labels, seed)?;
    Ok(Probe { model, params, train_accuracy })
}

/// Fraction of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy of the probe on generated `images [n, 3, H, W]` against
/// the classes of their conditioning signals.
pub fn nway_accuracy(probe: &Probe, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::Invalid(format!("{} labels for images {:?}", labels.len(), images.shape())));
    }
    accuracy(&probe.predict(images)?, labels)
}

/// Reference labels for `n` unconditional samples: classes cycled in
/// order, so they are balanced and independent of the samples. Scoring
/// unconditional generations against them has expected accuracy `1/K`
/// whatever the sampler's class mix, which makes it the metric's null check.
pub fn null_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes.max(1)).collect()
}

/// Standard error of an accuracy `p` measured on `n` items.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Central 95% acceptance region `[lo, hi]` of hit counts out of `n` trials
/// with success probability `p`: each tail outside it has mass ≤ 2.5%.
pub fn binomial_interval95(p: f64, n: usize) -> (usize, usize) {
    let mut pmf = vec![0.0f64; n + 1];
    // Log space keeps (1 − p)^n representable for large n.
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0f64;
    for (k, v) in pmf.iter_mut().enumerate() {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        *v = (log_choose + k as f64 * lp + (n - k) as f64 * lq).exp();
    }
    let mut lo = 0;
    let mut tail = 0.0;
    while lo < n && tail + pmf[lo] <= 0.025 {
        tail += pmf[lo];
        lo += 1;
    }
    let mut hi = n;
    let mut tail = 0.0;
    while hi > 0 && tail + pmf[hi] <= 0.025 {
        tail += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests;
