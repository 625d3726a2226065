//! The stages of a run wired from one [`RunConfig`], shared by the command
//! line and the ablation harness. Each stage draws its randomness from the
//! root seed under its own name, so stages can be rerun independently.

use crate::align::{
    finetune, train_classifier, ClassifierOutcome, FinetuneData, FinetuneOutcome, FinetunePolicy, ImageClassifier,
    IMAGE_ENCODER_PREFIX,
};
use crate::config::RunConfig;
use crate::diffusion::{
    sample_latents, train_autoencoder, train_unconditional, AeOutcome, ConditionProjector, ConditionalDenoiser,
    DiffusionSchedule, ImageAutoencoder, LdmOutcome,
};
use crate::error::{Error, Result};
use crate::eval::{train_probe, Probe};
use crate::msm::{pretrain, token_rows, EegEncoder, PretrainOutcome};
use crate::numerics::nn::Session;
use crate::numerics::{ParamStore, Tensor};
use crate::rng::{derive_seed, stream};
use crate::signal::{EegRecording, PairedDataset};

/// Seed of a named stage under the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    derive_seed(root, stage, 0)
}

/// Every network of a run, instantiated from the config.
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: EegEncoder,
    pub tau: ConditionProjector,
    pub ae: ImageAutoencoder,
    pub image_encoder: ImageClassifier,
    pub denoiser: ConditionalDenoiser,
    pub schedule: DiffusionSchedule,
}

impl Models {
    pub fn new(cfg: &RunConfig, classes: usize, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let ae = ImageAutoencoder::new(cfg.ae.clone(), image_size)?;
        let latent_channels = ae.latent_shape()[0];
        Ok(Self {
            encoder: EegEncoder::new(cfg.encoder.clone())?,
            tau: ConditionProjector::new(cfg.encoder.d_model, cfg.denoiser.d_tau),
            image_encoder: ImageClassifier::new(IMAGE_ENCODER_PREFIX, cfg.image_encoder.clone(), classes)?,
            denoiser: ConditionalDenoiser::new(cfg.denoiser.clone(), latent_channels)?,
            schedule: DiffusionSchedule::from_config(&cfg.schedule)?,
            ae,
        })
    }

    /// Instantiates the models matching a paired dataset.
    pub fn for_dataset(cfg: &RunConfig, ds: &PairedDataset) -> Result<Self> {
        let size = ds.items.first().ok_or_else(|| Error::Invalid("paired dataset is empty".into()))?.image.shape()[1];
        Self::new(cfg, ds.classes, size)
    }
}

/// Paired images stacked to `[n, 3, H, W]`.
pub fn images_of(ds: &PairedDataset) -> Result<Tensor<f32>> {
    let imgs: Vec<Tensor<f32>> = ds.items.iter().map(|p| p.image.clone()).collect();
    Ok(Tensor::stack(&imgs)?)
}

pub fn labels_of(ds: &PairedDataset) -> Vec<usize> {
    ds.items.iter().map(|p| p.class).collect()
}

fn recordings_of(ds: &PairedDataset) -> Vec<EegRecording> {
    ds.items.iter().map(|p| p.recording.clone()).collect()
}

pub fn run_pretrain(cfg: &RunConfig, recordings: &[EegRecording]) -> Result<PretrainOutcome> {
    pretrain(recordings, &cfg.preprocess, &cfg.encoder, &cfg.msm, stage_seed(cfg.seed, "pretrain"))
}

pub fn run_train_ae(cfg: &RunConfig, train: &PairedDataset) -> Result<AeOutcome> {
    train_autoencoder(&images_of(train)?, &cfg.ae, stage_seed(cfg.seed, "train-ae"))
}

pub fn run_train_image_encoder(cfg: &RunConfig, models: &Models, train: &PairedDataset) -> Result<ClassifierOutcome> {
    train_classifier(&models.image_encoder, &images_of(train)?, &labels_of(train), stage_seed(cfg.seed, "train-image-encoder"))
}

pub fn run_train_probe(cfg: &RunConfig, train: &PairedDataset) -> Result<Probe> {
    train_probe(&images_of(train)?, &labels_of(train), train.classes, &cfg.probe, stage_seed(cfg.seed, "probe"))
}

/// Unconditional warm-up of the denoiser on autoencoder latents.
pub fn run_train_ldm(cfg: &RunConfig, models: &Models, ae: &ParamStore<f32>, train: &PairedDataset) -> Result<LdmOutcome> {
    let latents = models.ae.encode(ae, &images_of(train)?)?;
    train_unconditional(&latents, &cfg.denoiser, &models.schedule, &cfg.ldm, stage_seed(cfg.seed, "train-ldm"))
}

/// Frozen-stage outputs for fine-tuning: tokens, latents and image embeddings.
pub fn finetune_data(
    cfg: &RunConfig,
    models: &Models,
    train: &PairedDataset,
    ae: &ParamStore<f32>,
    image_encoder: &ParamStore<f32>,
) -> Result<FinetuneData> {
    let images = images_of(train)?;
    let embeddings = models.image_encoder.embed(image_encoder, &images)?;
    Ok(FinetuneData {
        tokens: token_rows(&recordings_of(train), &cfg.preprocess, cfg.encoder.token_size)?,
        latents: models.ae.encode(ae, &images)?,
        image_embeddings: Tensor::stack(&embeddings)?,
    })
}

/// Joint fine-tuning. A missing encoder is freshly initialized (no
/// pretraining); a missing denoiser likewise (no warm-up). The result holds
/// the autoencoder and image encoder too, frozen, so it alone can generate.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    cfg: &RunConfig,
    models: &Models,
    data: &FinetuneData,
    encoder: Option<&ParamStore<f32>>,
    ae: &ParamStore<f32>,
    image_encoder: &ParamStore<f32>,
    denoiser: Option<&ParamStore<f32>>,
    policy: &FinetunePolicy,
) -> Result<FinetuneOutcome> {
    let seed = stage_seed(cfg.seed, "finetune");
    let mut params = match encoder {
        Some(e) => e.clone(),
        None => models.encoder.init_store(&mut stream(seed, "encoder-init", 0)),
    };
    match denoiser {
        Some(d) => params.merge(d.clone()),
        None => models.denoiser.init(&mut params, &mut stream(seed, "denoiser-init", 0)),
    }
    let mut frozen = ae.clone();
    frozen.merge(image_encoder.clone());
    frozen.set_all_trainable(false);
    params.merge(frozen);
    finetune(&models.encoder, &models.denoiser, &models.schedule, params, data, policy, &cfg.finetune, seed)
}

/// Context rows `[B, N, d_τ]` for a batch of token sequences.
pub fn contexts(models: &Models, params: &ParamStore<f32>, tokens: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut s = Session::new(params, false);
    let y = models.encoder.encode_batch(&mut s, &Tensor::stack(tokens)?, None)?;
    let c = models.tau.forward(&mut s, y)?;
    Ok(s.value(c).clone())
}

const SAMPLE_CHUNK: usize = 16;

fn decode_each(models: &Models, params: &ParamStore<f32>, z: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let x = models.ae.decode(params, z)?;
    let per = &x.shape()[1..];
    (0..x.shape()[0]).map(|i| Ok(Tensor::new(per, x.row(i).to_vec())?)).collect()
}

/// `repeats` images per recording, ordered recording-major. Image `k` uses
/// its own noise stream, so results do not depend on batching.
pub fn generate(
    cfg: &RunConfig,
    models: &Models,
    params: &ParamStore<f32>,
    recordings: &[EegRecording],
    repeats: usize,
) -> Result<Vec<Tensor<f32>>> {
    let seed = stage_seed(cfg.seed, "generate");
    let tokens = token_rows(recordings, &cfg.preprocess, cfg.encoder.token_size)?;
    let jobs: Vec<usize> = (0..tokens.len()).flat_map(|i| std::iter::repeat_n(i, repeats)).collect();
    let mut out = Vec::with_capacity(jobs.len());
    for (c, chunk) in jobs.chunks(SAMPLE_CHUNK).enumerate() {
        let picked: Vec<Tensor<f32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
        let ctx = contexts(models, params, &picked)?;
        let mut streams: Vec<_> =
            (0..chunk.len()).map(|k| stream(seed, "sample", (c * SAMPLE_CHUNK + k) as u64)).collect();
        let z = sample_latents(&models.denoiser, params, &models.schedule, models.ae.latent_shape(), Some(&ctx), &cfg.sample, &mut streams)?;
        out.extend(decode_each(models, params, &z)?);
    }
    Ok(out)
}

/// `n` images from the null context.
pub fn generate_unconditional(cfg: &RunConfig, models: &Models, params: &ParamStore<f32>, n: usize) -> Result<Vec<Tensor<f32>>> {
    let seed = stage_seed(cfg.seed, "generate-unconditional");
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let b = SAMPLE_CHUNK.min(n - start);
        let mut streams: Vec<_> = (0..b).map(|k| stream(seed, "sample", (start + k) as u64)).collect();
        let z = sample_latents(&models.denoiser, params, &models.schedule, models.ae.latent_shape(), None, &cfg.sample, &mut streams)?;
        out.extend(decode_each(models, params, &z)?);
    }
    Ok(out)
}
