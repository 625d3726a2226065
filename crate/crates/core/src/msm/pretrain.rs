use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sample_mask, DecoderConfig, EegEncoder, EncoderConfig, MaskPlan, MsmDecoder, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::numerics::nn::Session;
use crate::numerics::{Adam, AdamConfig, ParamStore, Tensor};
use crate::rng::stream;
use crate::signal::{preprocess, tokenize, EegRecording, PreprocessConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmConfig {
    pub mask_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Sequences in the fixed evaluation batch behind the initial and final
    /// masked MSE.
    pub eval_size: usize,
    pub decoder: DecoderConfig,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: Some(1.0),
            eval_size: 32,
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsmLogRow {
    pub epoch: usize,
    /// Steps completed at the end of the epoch.
    pub step: usize,
    /// Mean training masked MSE over the epoch's steps.
    pub masked_mse: f64,
}

impl MsmLogRow {
    pub fn csv(rows: &[MsmLogRow]) -> String {
        let mut out = String::from("epoch,step,masked_mse\n");
        for r in rows {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.masked_mse));
        }
        out
    }
}

pub struct PretrainOutcome {
    /// Encoder parameters only, all trainable.
    pub encoder: ParamStore<f32>,
    pub log: Vec<MsmLogRow>,
    pub step_losses: Vec<f64>,
    /// Masked MSE of the fixed evaluation batch before the first step.
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Preprocesses and tokenizes every recording to `[N, C·S]`.
pub fn token_rows(recs: &[EegRecording], pre: &PreprocessConfig, token_size: usize) -> Result<Vec<Tensor<f32>>> {
    recs.iter()
        .map(|r| Ok(tokenize(&preprocess(r, pre)?, token_size)?.tokens))
        .collect()
}

pub(crate) fn batch_of(rows: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let picked: Vec<Tensor<f32>> = idx.iter().map(|&i| rows[i].clone()).collect();
    Ok(Tensor::stack(&picked)?)
}

/// Masked MSE of `tokens [B, N, D]` under `plans`, without gradients.
pub fn masked_mse(
    enc: &EegEncoder,
    dec: &MsmDecoder,
    store: &ParamStore<f32>,
    tokens: &Tensor<f32>,
    plans: &[MaskPlan],
) -> Result<f64> {
    let mut s = Session::new(store, false);
    let lat = enc.encode_batch(&mut s, tokens, Some(plans))?;
    let rec = dec.reconstruct_batch(&mut s, lat, plans)?;
    let loss = super::msm_loss(&mut s.tape, rec, tokens, plans)?;
    Ok(s.value(loss).item() as f64)
}

/// Masked reconstruction training. Batches follow a per-epoch shuffle and
/// every sequence gets a fresh mask at every step.
pub fn pretrain(
    recordings: &[EegRecording],
    pre: &PreprocessConfig,
    enc_cfg: &EncoderConfig,
    cfg: &MsmConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if recordings.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if pre.channels != enc_cfg.channels || pre.length != enc_cfg.length {
        return Err(Error::Config(format!(
            "preprocessing gives {}x{} but the encoder expects {}x{}",
            pre.channels, pre.length, enc_cfg.channels, enc_cfg.length
        )));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("msm batch_size and steps must be positive".into()));
    }
    let enc = EegEncoder::new(enc_cfg.clone())?;
    let dec = MsmDecoder::new(cfg.decoder.clone(), enc_cfg)?;
    let mut init_rng = stream(seed, "msm-init", 0);
    let mut store = enc.init_store(&mut init_rng);
    dec.init(&mut store, &mut init_rng);

    let rows = token_rows(recordings, pre, enc_cfg.token_size)?;
    let n = enc_cfg.n_tokens();

    let eval_idx: Vec<usize> = (0..rows.len().min(cfg.eval_size.max(1))).collect();
    let eval_tokens = batch_of(&rows, &eval_idx)?;
    let mut eval_rng = stream(seed, "msm-eval", 0);
    let eval_plans = eval_idx
        .iter()
        .map(|_| sample_mask(n, cfg.mask_ratio, &mut eval_rng))
        .collect::<Result<Vec<_>, _>>()?;
    let initial_mse = masked_mse(&enc, &dec, &store, &eval_tokens, &eval_plans)?;

    let bs = cfg.batch_size.min(rows.len());
    let per_epoch = rows.len() / bs;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..Default::default() });
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_steps = 0usize;
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order = (0..rows.len()).collect();
            order.shuffle(&mut stream(seed, "msm-shuffle", epoch as u64));
        }
        let idx = &order[slot * bs..(slot + 1) * bs];
        let tokens = batch_of(&rows, idx)?;
        let mut mask_rng = stream(seed, "msm-mask", step as u64);
        let plans = idx
            .iter()
            .map(|_| sample_mask(n, cfg.mask_ratio, &mut mask_rng))
            .collect::<Result<Vec<_>, _>>()?;

        let diverged = Error::at_step("msm pretraining", step);
        let mut s = Session::new(&store, true);
        let lat = enc.encode_batch(&mut s, &tokens, Some(&plans)).map_err(&diverged)?;
        let rec = dec.reconstruct_batch(&mut s, lat, &plans).map_err(&diverged)?;
        let loss = super::msm_loss(&mut s.tape, rec, &tokens, &plans).map_err(&diverged)?;
        let value = s.value(loss).item() as f64;
        let grads = s.param_grads(loss).map_err(&diverged)?;
        drop(s);
        adam.step(&mut store, &grads).map_err(&diverged)?;

        step_losses.push(value);
        epoch_sum += value;
        epoch_steps += 1;
        if slot + 1 == per_epoch || step + 1 == cfg.steps {
            log.push(MsmLogRow { epoch, step: step + 1, masked_mse: epoch_sum / epoch_steps as f64 });
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
    }
    let final_mse = masked_mse(&enc, &dec, &store, &eval_tokens, &eval_plans)?;
    let mut encoder = store.subset(ENCODER_PREFIX);
    encoder.set_all_trainable(true);
    Ok(PretrainOutcome { encoder, log, step_losses, initial_mse, final_mse })
}
