use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_loss_var, AlignmentHead, Pooling, HEAD_PREFIX};
use crate::diffusion::unet::{ATTENTION_MARK, DENOISER_PREFIX, PROJECTOR_PREFIX};
use crate::diffusion::{minibatch, pick, sd_loss, ConditionProjector, ConditionalDenoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::msm::{EegEncoder, ENCODER_PREFIX};
use crate::numerics::nn::Session;
use crate::numerics::{Adam, AdamConfig, NumError, ParamStore, Tensor, Var};
use crate::rng::stream;

/// Parameter groups a fine-tuning policy can unfreeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// The signal encoder `E`.
    Encoder,
    /// Every parameter of the denoiser's cross-attention blocks `A`.
    Attention,
    /// The context projector `τ`.
    Projector,
    /// The alignment projection `h`.
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with(ENCODER_PREFIX) {
            Some(ParamGroup::Encoder)
        } else if name.starts_with(DENOISER_PREFIX) && name.contains(ATTENTION_MARK) {
            Some(ParamGroup::Attention)
        } else if name.starts_with(PROJECTOR_PREFIX) {
            Some(ParamGroup::Projector)
        } else if name.strip_prefix(HEAD_PREFIX).is_some_and(|r| r.starts_with('.')) {
            Some(ParamGroup::Head)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetunePolicy {
    pub encoder: bool,
    pub attention: bool,
    pub projector: bool,
    pub head: bool,
    /// Weight of the alignment loss; zero disables alignment gradients.
    pub lambda_clip: f64,
}

impl Default for FinetunePolicy {
    fn default() -> Self {
        Self { encoder: true, attention: true, projector: true, head: true, lambda_clip: 1.0 }
    }
}

impl FinetunePolicy {
    pub fn without_alignment(self) -> Self {
        Self { head: false, lambda_clip: 0.0, ..self }
    }

    pub fn aligned(&self) -> bool {
        self.lambda_clip > 0.0
    }

    pub fn enables(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Attention => self.attention,
            ParamGroup::Projector => self.projector,
            ParamGroup::Head => self.head,
        }
    }

    pub fn trains(&self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.enables(g))
    }

    /// Short label in the style `E+A`, `E`, `A`.
    pub fn label(&self) -> String {
        match (self.encoder, self.attention) {
            (true, true) => "E+A".into(),
            (true, false) => "E".into(),
            (false, true) => "A".into(),
            (false, false) => "none".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_clip.is_finite() || self.lambda_clip < 0.0 {
            return Err(Error::Config(format!("lambda_clip {} must be finite and non-negative", self.lambda_clip)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub pooling: Pooling,
    /// Probability that a sample's diffusion loss sees the null context
    /// instead of its own, keeping the unconditional path usable for guidance.
    pub cond_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, lr: 2e-3, clip_norm: Some(1.0), pooling: Pooling::Mean, cond_dropout: 0.1 }
    }
}

/// Paired training material with the frozen stages already applied.
pub struct FinetuneData {
    /// One `[N, C·S]` token sequence per pair.
    pub tokens: Vec<Tensor<f32>>,
    /// Autoencoder latents `[n, c_z, h, w]` of the paired images.
    pub latents: Tensor<f32>,
    /// Image embeddings `[n, d_clip]` of the paired images.
    pub image_embeddings: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLogRow {
    pub epoch: usize,
    /// Steps completed, counting this one.
    pub step: usize,
    pub l_sd: f64,
    pub l_clip: f64,
}

impl FinetuneLogRow {
    pub fn csv(rows: &[FinetuneLogRow]) -> String {
        let mut out = String::from("epoch,step,l_sd,l_clip\n");
        for r in rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.l_sd, r.l_clip));
        }
        out
    }
}

pub struct FinetuneOutcome {
    /// Every input parameter plus `τ` and `h`, flagged trainable per policy.
    pub params: ParamStore<f32>,
    pub log: Vec<FinetuneLogRow>,
}

fn keep(grads: BTreeMap<String, Tensor<f32>>, allow: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor<f32>> {
    grads.into_iter().filter(|(n, _)| allow(n)).collect()
}

/// `ctx [B, M, d]` with the rows of samples flagged in `drop` replaced by
/// the null row. Attention over `M` equal rows equals attention over one.
pub(super) fn with_null_rows(s: &mut Session<'_, f32>, den: &ConditionalDenoiser, ctx: Var, dropped: &[bool]) -> Result<Var, NumError> {
    if !dropped.contains(&true) {
        return Ok(ctx);
    }
    let shape = s.tape.shape(ctx).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    let rows = den.null_context(s, b * m)?;
    let rows = s.tape.reshape(rows, &[b, m, d])?;
    let keep: Vec<f32> = dropped.iter().flat_map(|&x| std::iter::repeat_n(if x { 0.0 } else { 1.0 }, m * d)).collect();
    let keep_t = Tensor::new(&shape, keep.clone())?;
    let swap_t = Tensor::new(&shape, keep.iter().map(|k| 1.0 - k).collect())?;
    let (kv, sv) = (s.input(keep_t)?, s.input(swap_t)?);
    let a = s.tape.mul(ctx, kv)?;
    let c = s.tape.mul(rows, sv)?;
    s.tape.add(a, c)
}

/// Minimizes `L_SD + λ·L_clip` on `data`. The diffusion loss reaches the
/// policy's groups; the alignment loss reaches only the encoder, `τ` and `h`.
/// `τ` and `h` are freshly initialized when `params` lacks them.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    enc: &EegEncoder,
    den: &ConditionalDenoiser,
    sched: &DiffusionSchedule,
    mut params: ParamStore<f32>,
    data: &FinetuneData,
    policy: &FinetunePolicy,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    policy.validate()?;
    let n = data.tokens.len();
    let ls = data.latents.shape();
    let es = data.image_embeddings.shape();
    if n == 0 || ls.len() != 4 || ls[0] != n || es.len() != 2 || es[0] != n {
        return Err(Error::Invalid(format!(
            "{n} token sequences, latents {ls:?}, image embeddings {es:?}"
        )));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("finetune batch_size and steps must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Config(format!("finetune cond_dropout {} is outside [0, 1)", cfg.cond_dropout)));
    }
    let tau = ConditionProjector::new(enc.cfg.d_model, den.cfg.d_tau);
    let head = AlignmentHead::new(den.cfg.d_tau, es[1], cfg.pooling);
    if !params.contains(&tau.proj.weight_name()) {
        tau.init(&mut params, &mut stream(seed, "ft-init", 0));
    }
    if !params.contains(&head.h.weight_name()) {
        head.init(&mut params, &mut stream(seed, "ft-init", 1));
    }
    for g in [ParamGroup::Encoder, ParamGroup::Attention, ParamGroup::Projector, ParamGroup::Head] {
        if policy.enables(g) && !params.names().any(|name| ParamGroup::of(name) == Some(g)) {
            return Err(Error::Config(format!("policy trains {g:?} but the model has no such parameters")));
        }
    }
    params.set_trainable_by(|name| policy.trains(name));

    let sd_route = |name: &str| {
        matches!(ParamGroup::of(name), Some(ParamGroup::Encoder | ParamGroup::Attention | ParamGroup::Projector))
    };
    let clip_route =
        |name: &str| matches!(ParamGroup::of(name), Some(ParamGroup::Encoder | ParamGroup::Projector | ParamGroup::Head));

    let bs = cfg.batch_size.min(n);
    let per_epoch = n / bs;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..Default::default() });
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = minibatch(n, bs, step, seed, "ft-shuffle");
        let tokens = Tensor::stack(&idx.iter().map(|&i| data.tokens[i].clone()).collect::<Vec<_>>())?;
        let z0 = pick(&data.latents, &idx)?;
        let img = pick(&data.image_embeddings, &idx)?;
        let mut rng = stream(seed, "ft-noise", step as u64);

        let diverged = Error::at_step("fine-tuning", step);
        let mut s = Session::new(&params, true);
        let y = enc.encode_batch(&mut s, &tokens, None).map_err(&diverged)?;
        let ctx = tau.forward(&mut s, y).map_err(&diverged)?;
        let dropped: Vec<bool> = {
            let mut r = stream(seed, "ft-drop", step as u64);
            (0..bs).map(|_| r.random_bool(cfg.cond_dropout)).collect()
        };
        let den_ctx = with_null_rows(&mut s, den, ctx, &dropped).map_err(&diverged)?;
        let l_sd =
            sd_loss(&mut s, &z0, sched, &mut rng, |s, zt, ts| den.forward(s, zt, ts, den_ctx)).map_err(&diverged)?;
        let emb = head.embed_var(&mut s, ctx).map_err(&diverged)?;
        let img = s.input(img)?;
        let l_clip = clip_loss_var(&mut s.tape, emb, img).map_err(&diverged)?;

        let mut grads = keep(s.param_grads(l_sd).map_err(&diverged)?, sd_route);
        if policy.aligned() {
            let lambda = policy.lambda_clip as f32;
            for (name, g) in keep(s.param_grads(l_clip).map_err(&diverged)?, clip_route) {
                let g = g.map(|v| lambda * v);
                let merged = match grads.remove(&name) {
                    Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
                    None => g,
                };
                grads.insert(name, merged);
            }
        }
        log.push(FinetuneLogRow {
            epoch: step / per_epoch,
            step: step + 1,
            l_sd: s.value(l_sd).item() as f64,
            l_clip: s.value(l_clip).item() as f64,
        });
        drop(s);
        adam.step(&mut params, &grads).map_err(&diverged)?;
    }
    Ok(FinetuneOutcome { params, log })
}
