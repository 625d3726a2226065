//! The ablation grid: which stages run and which groups fine-tuning may
//! touch, one row per variant.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{nway_accuracy, Probe};
use crate::align::FinetunePolicy;
use crate::config::RunConfig;
use crate::diffusion::ppm::{tile, write_ppm};
use crate::diffusion::unet::{DENOISER_PREFIX, PROJECTOR_PREFIX};
use crate::error::{Error, Result};
use crate::msm::ENCODER_PREFIX;
use crate::numerics::{ParamStore, Tensor};
use crate::pipeline::{self, Models};
use crate::signal::{EegRecording, PairedDataset};

/// Trainable groups during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Groups {
    #[serde(rename = "E+A")]
    EncoderAndAttention,
    #[serde(rename = "E")]
    EncoderOnly,
    #[serde(rename = "A")]
    AttentionOnly,
}

impl Groups {
    pub fn label(self) -> &'static str {
        match self {
            Groups::EncoderAndAttention => "E+A",
            Groups::EncoderOnly => "E",
            Groups::AttentionOnly => "A",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub row_id: String,
    /// Start from a masked-signal-modeling encoder rather than a fresh one.
    pub msm: bool,
    /// Include the alignment loss during fine-tuning.
    pub clip: bool,
    /// Pretraining mask ratio; ignored without `msm`, defaulting to the
    /// configured ratio.
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    pub groups: Groups,
}

impl AblationRow {
    pub fn new(row_id: &str, msm: bool, clip: bool, mask_ratio: Option<f64>, groups: Groups) -> Self {
        Self { row_id: row_id.to_string(), msm, clip, mask_ratio, groups }
    }

    /// The fine-tuning policy this row implies on top of `base`.
    pub fn policy(&self, base: &FinetunePolicy) -> FinetunePolicy {
        let mut p = FinetunePolicy {
            encoder: self.groups != Groups::AttentionOnly,
            attention: self.groups != Groups::EncoderOnly,
            ..base.clone()
        };
        if !self.clip {
            p = p.without_alignment();
        } else if p.lambda_clip == 0.0 {
            p.lambda_clip = FinetunePolicy::default().lambda_clip;
            p.head = true;
        }
        p
    }

    pub fn effective_mask_ratio(&self, cfg: &RunConfig) -> Option<f64> {
        self.msm.then(|| self.mask_ratio.unwrap_or(cfg.msm.mask_ratio))
    }
}

/// The ablation rows reproducible at desk scale (encoder-size rows omitted).
pub fn table1_grid() -> Vec<AblationRow> {
    use Groups::*;
    vec![
        AblationRow::new("Full", true, true, Some(0.75), EncoderAndAttention),
        AblationRow::new("1", false, false, None, EncoderAndAttention),
        AblationRow::new("3", false, true, None, EncoderAndAttention),
        AblationRow::new("5", true, true, Some(0.25), EncoderAndAttention),
        AblationRow::new("6", true, true, Some(0.5), EncoderAndAttention),
        AblationRow::new("7", true, true, Some(0.85), EncoderAndAttention),
        AblationRow::new("12", true, true, Some(0.75), EncoderOnly),
        AblationRow::new("13", true, false, Some(0.75), EncoderAndAttention),
        AblationRow::new("14", true, false, Some(0.75), AttentionOnly),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub mask_ratio: Option<f64>,
    /// Parameters of the generator: encoder, projector and denoiser.
    pub params: usize,
    /// Accuracy, or the reason the row failed.
    pub accuracy: std::result::Result<f64, String>,
    /// Evaluated images.
    pub samples: usize,
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row_id,msm,clip,mask_ratio,groups,params,accuracy\n");
    for r in results {
        let ratio = r.mask_ratio.map_or("-".to_string(), |m| m.to_string());
        let acc = match &r.accuracy {
            Ok(a) => a.to_string(),
            Err(_) => "error".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.row.row_id,
            r.row.msm,
            r.row.clip,
            ratio,
            r.row.groups.label(),
            r.params,
            acc
        ));
    }
    out
}

/// Everything the rows share: frozen stages, the warm denoiser, the probe
/// and the fine-tuning inputs.
pub struct Foundation {
    pub models: Models,
    pub ae: ParamStore<f32>,
    pub image_encoder: ParamStore<f32>,
    pub image_encoder_accuracy: f64,
    pub denoiser: ParamStore<f32>,
    pub probe: Probe,
    pub data: crate::align::FinetuneData,
}

impl Foundation {
    pub fn build(cfg: &RunConfig, train: &PairedDataset) -> Result<Self> {
        let models = Models::for_dataset(cfg, train)?;
        let ae = pipeline::run_train_ae(cfg, train)?.params;
        let enc = pipeline::run_train_image_encoder(cfg, &models, train)?;
        let denoiser = pipeline::run_train_ldm(cfg, &models, &ae, train)?.params;
        let probe = pipeline::run_train_probe(cfg, train)?;
        let data = pipeline::finetune_data(cfg, &models, train, &ae, &enc.params)?;
        Ok(Self {
            models,
            ae,
            image_encoder: enc.params,
            image_encoder_accuracy: enc.train_accuracy,
            denoiser,
            probe,
            data,
        })
    }
}

/// Pretrained encoders keyed by mask ratio, trained on first use.
#[derive(Default)]
pub struct EncoderCache {
    encoders: BTreeMap<u64, ParamStore<f32>>,
}

impl EncoderCache {
    pub fn get(&mut self, cfg: &RunConfig, recordings: &[EegRecording], ratio: f64) -> Result<&ParamStore<f32>> {
        let key = ratio.to_bits();
        if !self.encoders.contains_key(&key) {
            let mut c = cfg.clone();
            c.msm.mask_ratio = ratio;
            let out = pipeline::run_pretrain(&c, recordings)?;
            self.encoders.insert(key, out.encoder);
        }
        Ok(&self.encoders[&key])
    }

    pub fn insert(&mut self, ratio: f64, encoder: ParamStore<f32>) {
        self.encoders.insert(ratio.to_bits(), encoder);
    }
}

/// Generated test images and accuracy of one row.
pub struct RowOutput {
    pub params: ParamStore<f32>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
}

/// Fine-tunes, generates for every test pair and scores one row.
pub fn run_row(
    cfg: &RunConfig,
    row: &AblationRow,
    base: &Foundation,
    cache: &mut EncoderCache,
    pretrain: &[EegRecording],
    test: &PairedDataset,
) -> Result<RowOutput> {
    let encoder = match row.effective_mask_ratio(cfg) {
        Some(r) => Some(cache.get(cfg, pretrain, r)?.clone()),
        None => None,
    };
    let policy = row.policy(&cfg.policy);
    let tuned = pipeline::run_finetune(
        cfg,
        &base.models,
        &base.data,
        encoder.as_ref(),
        &base.ae,
        &base.image_encoder,
        Some(&base.denoiser),
        &policy,
    )?;
    let recs: Vec<EegRecording> = test.items.iter().map(|p| p.recording.clone()).collect();
    let images = pipeline::generate(cfg, &base.models, &tuned.params, &recs, cfg.eval.repeats)?;
    let labels: Vec<usize> =
        test.items.iter().flat_map(|p| std::iter::repeat_n(p.class, cfg.eval.repeats)).collect();
    let accuracy = nway_accuracy(&base.probe, &Tensor::stack(&images)?, &labels)?;
    Ok(RowOutput { params: tuned.params, images, labels, accuracy })
}

pub fn generator_params(params: &ParamStore<f32>) -> usize {
    [ENCODER_PREFIX, PROJECTOR_PREFIX, DENOISER_PREFIX].iter().map(|p| params.numel_with_prefix(p)).sum()
}

/// Runs every row; a failing row is recorded and the grid continues. With
/// `out`, writes `ablation.csv` and `<row_id>/grid.ppm` there.
pub fn run_ablation(
    grid: &[AblationRow],
    cfg: &RunConfig,
    base: &Foundation,
    cache: &mut EncoderCache,
    pretrain: &[EegRecording],
    test: &PairedDataset,
    out: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let mut seen = std::collections::BTreeSet::new();
    for row in grid {
        if !seen.insert(&row.row_id) {
            return Err(Error::Config(format!("ablation row `{}` appears twice", row.row_id)));
        }
        if row.row_id.is_empty() || row.row_id.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("ablation row id `{}` is not a plain name", row.row_id)));
        }
    }
    let mut results = Vec::with_capacity(grid.len());
    for row in grid {
        let outcome = run_row(cfg, row, base, cache, pretrain, test).and_then(|o| {
            if let Some(dir) = out {
                let d = dir.join(&row.row_id);
                std::fs::create_dir_all(&d)?;
                write_ppm(&d.join("grid.ppm"), &tile(&o.images, cfg.eval.grid_columns)?)?;
            }
            Ok(o)
        });
        results.push(match outcome {
            Ok(o) => AblationResult {
                mask_ratio: row.effective_mask_ratio(cfg),
                params: generator_params(&o.params),
                accuracy: Ok(o.accuracy),
                samples: o.labels.len(),
                row: row.clone(),
            },
            Err(e) => AblationResult {
                mask_ratio: row.effective_mask_ratio(cfg),
                params: 0,
                accuracy: Err(e.to_string()),
                samples: 0,
                row: row.clone(),
            },
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), ablation_csv(&results))?;
    }
    Ok(results)
}
