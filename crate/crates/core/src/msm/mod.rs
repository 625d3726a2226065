//! Masked signal modeling over temporal tokens: mask plans, the signal
//! encoder, the light reconstruction decoder and the masked-only loss.

mod pretrain;

pub use pretrain::{masked_mse, pretrain, token_rows, MsmConfig, MsmLogRow, PretrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::nn::{sinusoidal_table, LayerNorm, Linear, Session, TransformerBlock};
use crate::numerics::{NumError, ParamStore, Scalar, Tape, Tensor, Var};

/// Which tokens of one sequence are hidden from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    n_tokens: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

/// Masked count for `ratio` of `n`; the small slack keeps products such as
/// `0.85 · 20` from flooring one short.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64 + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Plan hiding exactly `masked` (any order, no repeats).
    pub fn from_masked(n_tokens: usize, masked: &[usize]) -> Result<Self, NumError> {
        let mut flag = vec![false; n_tokens];
        for &i in masked {
            if i >= n_tokens {
                return Err(NumError::Index { index: i, len: n_tokens });
            }
            if std::mem::replace(&mut flag[i], true) {
                return Err(NumError::Invalid(format!("token {i} masked twice")));
            }
        }
        if masked.is_empty() || masked.len() == n_tokens {
            return Err(NumError::Invalid(format!(
                "mask of {} out of {n_tokens} tokens leaves an empty set",
                masked.len()
            )));
        }
        let visible = (0..n_tokens).filter(|&i| !flag[i]).collect();
        let masked = (0..n_tokens).filter(|&i| flag[i]).collect();
        Ok(Self { n_tokens, masked, visible })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Sorted masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Sorted visible indices.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Uniformly chosen `floor(ratio · n)` masked tokens.
pub fn sample_mask<R: Rng + ?Sized>(n_tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan, NumError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(NumError::Invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = masked_count(n_tokens, ratio);
    if k == 0 || k >= n_tokens {
        return Err(NumError::Invalid(format!(
            "mask ratio {ratio} over {n_tokens} tokens masks {k}, leaving an empty set"
        )));
    }
    let chosen = rand::seq::index::sample(rng, n_tokens, k).into_vec();
    MaskPlan::from_masked(n_tokens, &chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub length: usize,
    pub token_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: 32, length: 512, token_size: 16, d_model: 128, depth: 4, heads: 4, mlp_ratio: 2 }
    }
}

impl EncoderConfig {
    pub fn n_tokens(&self) -> usize {
        self.length / self.token_size
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.token_size
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.token_size == 0 || self.length % self.token_size != 0 {
            return Err(NumError::Invalid(format!(
                "token size {} does not divide length {}",
                self.token_size, self.length
            )));
        }
        if self.channels == 0 || self.d_model == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(NumError::Invalid("encoder extents must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NumError::Invalid(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        Ok(())
    }
}

pub const ENCODER_PREFIX: &str = "eeg.";

/// Token embedding (a conv1d with kernel = stride = token size), fixed
/// sinusoidal positions, pre-norm transformer blocks, output norm.
#[derive(Clone, Debug)]
pub struct EegEncoder {
    pub cfg: EncoderConfig,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl EegEncoder {
    pub const EMBED_WEIGHT: &'static str = "eeg.embed.weight";
    pub const EMBED_BIAS: &'static str = "eeg.embed.bias";

    pub fn new(cfg: EncoderConfig) -> Result<Self, NumError> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&format!("eeg.block{i}"), cfg.d_model, cfg.heads, cfg.mlp_ratio))
            .collect();
        let norm = LayerNorm::new("eeg.norm", cfg.d_model);
        Ok(Self { cfg, blocks, norm })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.cfg;
        let std = (1.0 / c.token_dim() as f64).sqrt();
        store.insert(Self::EMBED_WEIGHT, Tensor::randn(&[c.d_model, c.channels, c.token_size], std, rng), true);
        store.insert(Self::EMBED_BIAS, Tensor::zeros(&[c.d_model]), true);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
    }

    /// Fresh parameter store for this encoder.
    pub fn init_store<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    /// Encodes token rows `[B, V, C·S]` placed at `positions` (row-major,
    /// `B·V` original indices); returns `[B, V, d_model]`.
    pub fn encode_at<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        rows: &Tensor<T>,
        positions: &[usize],
    ) -> Result<Var, NumError> {
        let c = &self.cfg;
        let shape = rows.shape();
        if shape.len() != 3 || shape[2] != c.token_dim() || positions.len() != shape[0] * shape[1] {
            return Err(NumError::Shape(format!(
                "encoder rows {shape:?} with {} positions, token dim {}",
                positions.len(),
                c.token_dim()
            )));
        }
        let (b, v) = (shape[0], shape[1]);
        let n = c.n_tokens();
        let table: Tensor<T> = sinusoidal_table(n, c.d_model);
        let mut pos = Vec::with_capacity(b * v * c.d_model);
        for &p in positions {
            if p >= n {
                return Err(NumError::Index { index: p, len: n });
            }
            pos.extend_from_slice(table.row(p));
        }
        let x = s.input(rows.reshape(&[b * v, c.token_dim()])?)?;
        let w = s.param(Self::EMBED_WEIGHT)?;
        let w = s.tape.reshape(w, &[c.d_model, c.token_dim()])?;
        let w = s.tape.transpose(w)?;
        let h = s.tape.matmul(x, w)?;
        let bias = s.param(Self::EMBED_BIAS)?;
        let h = s.tape.add_suffix(h, bias)?;
        let pos = s.input(Tensor::new(&[b * v, c.d_model], pos)?)?;
        let h = s.tape.add(h, pos)?;
        let mut h = s.tape.reshape(h, &[b, v, c.d_model])?;
        for blk in &self.blocks {
            h = blk.forward(s, h)?;
        }
        self.norm.forward(s, h)
    }

    /// Encodes a batch `[B, N, C·S]`. With plans, only each sequence's
    /// visible tokens enter and the result is `[B, N_visible, d_model]`;
    /// without, all `N` tokens are encoded.
    pub fn encode_batch<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        tokens: &Tensor<T>,
        plans: Option<&[MaskPlan]>,
    ) -> Result<Var, NumError> {
        let shape = tokens.shape();
        let n = self.cfg.n_tokens();
        if shape.len() != 3 || shape[1] != n {
            return Err(NumError::Shape(format!("encoder input {shape:?}, expected [B, {n}, _]")));
        }
        let b = shape[0];
        match plans {
            None => {
                let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
                self.encode_at(s, tokens, &positions)
            }
            Some(plans) => {
                let v = visible_count(plans, b, n)?;
                let d = shape[2];
                let mut rows = Vec::with_capacity(b * v * d);
                let mut positions = Vec::with_capacity(b * v);
                for (bi, plan) in plans.iter().enumerate() {
                    for &i in plan.visible() {
                        let off = (bi * n + i) * d;
                        rows.extend_from_slice(&tokens.data()[off..off + d]);
                        positions.push(i);
                    }
                }
                self.encode_at(s, &Tensor::new(&[b, v, d], rows)?, &positions)
            }
        }
    }

    /// Inference-only encoding of one sequence `[N, C·S]`.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &Tensor<T>,
        plan: Option<&MaskPlan>,
    ) -> Result<Tensor<T>, NumError> {
        let mut s = Session::new(store, false);
        let shape = tokens.shape().to_vec();
        let batch = tokens.reshape(&[1, shape[0], *shape.last().unwrap_or(&0)])?;
        let out = match plan {
            Some(p) => self.encode_batch(&mut s, &batch, Some(std::slice::from_ref(p)))?,
            None => self.encode_batch(&mut s, &batch, None)?,
        };
        let v = s.value(out);
        v.reshape(&v.shape()[1..])
    }
}

fn visible_count(plans: &[MaskPlan], b: usize, n: usize) -> Result<usize, NumError> {
    if plans.len() != b {
        return Err(NumError::Shape(format!("{} mask plans for a batch of {b}", plans.len())));
    }
    let v = plans[0].visible().len();
    for p in plans {
        if p.n_tokens() != n || p.visible().len() != v {
            return Err(NumError::Shape(format!(
                "mask plan over {} tokens with {} visible, expected {n} tokens with {v} visible",
                p.n_tokens(),
                p.visible().len()
            )));
        }
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_dec: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_dec: 64, depth: 2, heads: 4, mlp_ratio: 2 }
    }
}

pub const DECODER_PREFIX: &str = "msm_dec.";

/// Learned mask token, light transformer stack and a linear head back to
/// token space. Lives only during pretraining.
#[derive(Clone, Debug)]
pub struct MsmDecoder {
    pub cfg: DecoderConfig,
    n_tokens: usize,
    embed: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    pub head: Linear,
}

impl MsmDecoder {
    pub const MASK_TOKEN: &'static str = "msm_dec.mask_token";

    pub fn new(cfg: DecoderConfig, enc: &EncoderConfig) -> Result<Self, NumError> {
        if cfg.d_dec == 0 || cfg.heads == 0 || cfg.d_dec % cfg.heads != 0 || cfg.mlp_ratio == 0 {
            return Err(NumError::Invalid(format!("decoder width {} with {} heads", cfg.d_dec, cfg.heads)));
        }
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&format!("msm_dec.block{i}"), cfg.d_dec, cfg.heads, cfg.mlp_ratio))
            .collect();
        Ok(Self {
            embed: Linear::new("msm_dec.embed", enc.d_model, cfg.d_dec),
            blocks,
            norm: LayerNorm::new("msm_dec.norm", cfg.d_dec),
            head: Linear::new("msm_dec.head", cfg.d_dec, enc.token_dim()),
            n_tokens: enc.n_tokens(),
            cfg,
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.embed.init(store, rng);
        store.insert(Self::MASK_TOKEN, Tensor::randn(&[1, self.cfg.d_dec], 0.02, rng), true);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
        self.head.init(store, rng);
    }

    /// Scatters visible latents `[B, V, d_model]` back to their positions,
    /// fills the rest with the mask token and decodes all `N` positions to
    /// `[B, N, C·S]`.
    pub fn reconstruct_batch<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        latents: Var,
        plans: &[MaskPlan],
    ) -> Result<Var, NumError> {
        let shape = s.tape.shape(latents).to_vec();
        let n = self.n_tokens;
        if shape.len() != 3 {
            return Err(NumError::Shape(format!("decoder latents {shape:?}")));
        }
        let (b, v) = (shape[0], shape[1]);
        if visible_count(plans, b, n)? != v {
            return Err(NumError::Shape(format!("{v} latent rows for plans with a different visible count")));
        }
        let dd = self.cfg.d_dec;
        let h = self.embed.forward(s, latents)?;
        let h = s.tape.reshape(h, &[b * v, dd])?;
        let mask = s.param(Self::MASK_TOKEN)?;
        let table = s.tape.concat(&[mask, h], 0)?;
        let mut index = Vec::with_capacity(b * n);
        for (bi, plan) in plans.iter().enumerate() {
            let mut slot = vec![0; n];
            for (j, &i) in plan.visible().iter().enumerate() {
                slot[i] = 1 + bi * v + j;
            }
            index.extend(slot);
        }
        let full = s.tape.gather(table, &index)?;
        let pos: Tensor<T> = sinusoidal_table(n, dd);
        let pos = s.input(pos)?;
        let full = s.tape.reshape(full, &[b, n, dd])?;
        let mut h = s.tape.add_suffix(full, pos)?;
        for blk in &self.blocks {
            h = blk.forward(s, h)?;
        }
        let h = self.norm.forward(s, h)?;
        self.head.forward(s, h)
    }
}

/// Squared error averaged over the elements of masked tokens only.
/// `recon` is `[B, N, D]`; `target` has the same shape.
pub fn msm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: Var,
    target: &Tensor<T>,
    plans: &[MaskPlan],
) -> Result<Var, NumError> {
    let shape = tape.shape(recon).to_vec();
    if shape != target.shape() || shape.len() != 3 || plans.len() != shape[0] {
        return Err(NumError::Shape(format!(
            "msm loss over {shape:?} against {:?} with {} plans",
            target.shape(),
            plans.len()
        )));
    }
    let (n, d) = (shape[1], shape[2]);
    let mut weights = Vec::with_capacity(target.numel());
    let mut count = 0usize;
    for plan in plans {
        if plan.n_tokens() != n {
            return Err(NumError::Shape(format!("plan over {} tokens for {n}", plan.n_tokens())));
        }
        if plan.masked().is_empty() {
            return Err(NumError::Invalid("no masked tokens".into()));
        }
        for i in 0..n {
            let m = plan.is_masked(i);
            count += m as usize * d;
            weights.extend(std::iter::repeat_n(if m { T::one() } else { T::zero() }, d));
        }
    }
    let target = tape.constant(target.clone())?;
    let weights = tape.constant(Tensor::new(&shape, weights)?)?;
    let diff = tape.sub(recon, target)?;
    let diff = tape.mul(diff, weights)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / count as f64)
}
