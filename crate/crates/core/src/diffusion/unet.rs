//! Two-level UNet noise predictor whose only conditioning path is
//! cross-attention, and the projector `τ` from encoder rows to context rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CrossAttentionWeights;
use crate::numerics::nn::{Conv2d, LayerNorm, Linear, Session};
use crate::numerics::{NumError, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub c1: usize,
    pub c2: usize,
    pub time_dim: usize,
    /// Context row width `d_τ`.
    pub d_tau: usize,
    /// Attention width `d`.
    pub attn_dim: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { c1: 64, c2: 128, time_dim: 128, d_tau: 128, attn_dim: 64, heads: 1 }
    }
}

pub const DENOISER_PREFIX: &str = "unet.";
/// Marks parameters of cross-attention blocks.
pub const ATTENTION_MARK: &str = ".xattn.";
pub const PROJECTOR_PREFIX: &str = "tau.";

/// `τ`: per-row linear map `d_model → d_τ`.
#[derive(Clone, Debug)]
pub struct ConditionProjector {
    pub proj: Linear,
}

impl ConditionProjector {
    pub fn new(d_model: usize, d_tau: usize) -> Self {
        Self { proj: Linear::new("tau.proj", d_model, d_tau) }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.proj.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, y: Var) -> Result<Var, NumError> {
        self.proj.forward(s, y)
    }
}

const TIME_FREQS: usize = 64;

/// Sinusoidal features of integer timesteps, `[B, 64]`.
pub fn timestep_features<T: Scalar>(ts: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(ts.len() * TIME_FREQS);
    for &t in ts {
        for j in 0..TIME_FREQS {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / TIME_FREQS as f64);
            let a = t as f64 * freq;
            data.push(T::lit(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[ts.len(), TIME_FREQS], data).expect("non-empty timesteps")
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Linear,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, c_in: usize, c_out: usize, time_dim: usize) -> Self {
        Self {
            conv1: Conv2d::same3(format!("{name}.conv1"), c_in, c_out),
            conv2: Conv2d::same3(format!("{name}.conv2"), c_out, c_out),
            temb: Linear::new(format!("{name}.temb"), time_dim, c_out),
            skip: (c_in != c_out).then(|| Conv2d::new(format!("{name}.skip"), c_in, c_out, 1, 1, 0)),
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init_scaled(store, rng, 0.2);
        self.temb.init(store, rng);
        if let Some(k) = &self.skip {
            k.init(store, rng);
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, temb: Var) -> Result<Var, NumError> {
        let h = s.tape.silu(x)?;
        let h = self.conv1.forward(s, h)?;
        let tp = self.temb.forward(s, temb)?;
        let h = s.tape.add_prefix(h, tp)?;
        let h = s.tape.silu(h)?;
        let h = self.conv2.forward(s, h)?;
        let x = match &self.skip {
            Some(k) => k.forward(s, x)?,
            None => x,
        };
        s.tape.add(x, h)
    }
}

/// Residual cross-attention over the flattened feature map.
#[derive(Clone, Debug)]
struct AttnBlock {
    norm: LayerNorm,
    w: CrossAttentionWeights,
    wo: Linear,
    heads: usize,
}

impl AttnBlock {
    fn new(name: &str, dim: usize, cfg: &DenoiserConfig) -> Self {
        let name = format!("{name}{}", ATTENTION_MARK.trim_end_matches('.'));
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), dim),
            w: CrossAttentionWeights {
                wq: Linear::no_bias(format!("{name}.wq"), dim, cfg.attn_dim),
                wk: Linear::no_bias(format!("{name}.wk"), cfg.d_tau, cfg.attn_dim),
                wv: Linear::no_bias(format!("{name}.wv"), cfg.d_tau, cfg.attn_dim),
            },
            wo: Linear::new(format!("{name}.wo"), cfg.attn_dim, dim),
            heads: cfg.heads,
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm.init(store);
        self.w.wq.init(store, rng);
        self.w.wk.init(store, rng);
        self.w.wv.init(store, rng);
        self.wo.init_scaled(store, rng, 0.5);
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, ctx: Var) -> Result<Var, NumError> {
        let shape = s.tape.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let f = s.tape.reshape(x, &[b, c, h * w])?;
        let f = s.tape.permute(f, &[0, 2, 1])?;
        let f = self.norm.forward(s, f)?;
        let a = self.w.forward(s, f, ctx, self.heads)?;
        let a = self.wo.forward(s, a)?;
        let a = s.tape.permute(a, &[0, 2, 1])?;
        let a = s.tape.reshape(a, &[b, c, h, w])?;
        s.tape.add(x, a)
    }
}

/// `ε_θ(z_t, t, context)` over latents `[B, c_z, H, W]` with even `H`, `W`.
#[derive(Clone, Debug)]
pub struct ConditionalDenoiser {
    pub cfg: DenoiserConfig,
    pub latent_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_down: ResBlock,
    attn_down: AttnBlock,
    down: Conv2d,
    res_mid: ResBlock,
    attn_mid: AttnBlock,
    up: Conv2d,
    res_up: ResBlock,
    attn_up: AttnBlock,
    conv_out: Conv2d,
}

impl ConditionalDenoiser {
    pub const NULL_CONTEXT: &'static str = "unet.null_ctx";

    pub fn new(cfg: DenoiserConfig, latent_channels: usize) -> Result<Self, NumError> {
        let (c1, c2, td) = (cfg.c1, cfg.c2, cfg.time_dim);
        if [c1, c2, td, cfg.d_tau, cfg.attn_dim, latent_channels].contains(&0)
            || cfg.heads == 0
            || cfg.attn_dim % cfg.heads != 0
        {
            return Err(NumError::Invalid(format!("denoiser config {cfg:?}")));
        }
        Ok(Self {
            time1: Linear::new("unet.time.fc1", TIME_FREQS, td),
            time2: Linear::new("unet.time.fc2", td, td),
            conv_in: Conv2d::same3("unet.in", latent_channels, c1),
            res_down: ResBlock::new("unet.down1.res", c1, c1, td),
            attn_down: AttnBlock::new("unet.down1", c1, &cfg),
            down: Conv2d::new("unet.down", c1, c2, 3, 2, 1),
            res_mid: ResBlock::new("unet.mid.res", c2, c2, td),
            attn_mid: AttnBlock::new("unet.mid", c2, &cfg),
            up: Conv2d::same3("unet.up", c2, c1),
            res_up: ResBlock::new("unet.up1.res", 2 * c1, c1, td),
            attn_up: AttnBlock::new("unet.up1", c1, &cfg),
            conv_out: Conv2d::same3("unet.out", c1, latent_channels),
            latent_channels,
            cfg,
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.time1.init(store, rng);
        self.time2.init(store, rng);
        self.conv_in.init(store, rng);
        self.res_down.init(store, rng);
        self.attn_down.init(store, rng);
        self.down.init(store, rng);
        self.res_mid.init(store, rng);
        self.attn_mid.init(store, rng);
        self.up.init(store, rng);
        self.res_up.init(store, rng);
        self.attn_up.init(store, rng);
        self.conv_out.init_scaled(store, rng, 0.1);
        store.insert(Self::NULL_CONTEXT, Tensor::randn(&[1, self.cfg.d_tau], 1.0, rng), true);
    }

    /// The learned null context repeated for a batch: `[B, 1, d_τ]`.
    pub fn null_context<T: Scalar>(&self, s: &mut Session<'_, T>, batch: usize) -> Result<Var, NumError> {
        let row = s.param(Self::NULL_CONTEXT)?;
        let rows = s.tape.gather(row, &vec![0; batch])?;
        s.tape.reshape(rows, &[batch, 1, self.cfg.d_tau])
    }

    /// Predicted noise, shaped like `zt`. `ctx` is `[B, M, d_τ]`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        zt: Var,
        ts: &[usize],
        ctx: Var,
    ) -> Result<Var, NumError> {
        let zs = s.tape.shape(zt).to_vec();
        let cs = s.tape.shape(ctx).to_vec();
        if zs.len() != 4
            || zs[1] != self.latent_channels
            || zs[2] % 2 != 0
            || zs[3] % 2 != 0
            || ts.len() != zs[0]
            || cs.len() != 3
            || cs[0] != zs[0]
            || cs[2] != self.cfg.d_tau
        {
            return Err(NumError::Shape(format!(
                "denoiser input {zs:?}, {} timesteps, context {cs:?}",
                ts.len()
            )));
        }
        let tf = s.input(timestep_features(ts))?;
        let temb = self.time1.forward(s, tf)?;
        let temb = s.tape.silu(temb)?;
        let temb = self.time2.forward(s, temb)?;
        let temb = s.tape.silu(temb)?;

        let h = self.conv_in.forward(s, zt)?;
        let h = self.res_down.forward(s, h, temb)?;
        let skip = self.attn_down.forward(s, h, ctx)?;
        let h = self.down.forward(s, skip)?;
        let h = self.res_mid.forward(s, h, temb)?;
        let h = self.attn_mid.forward(s, h, ctx)?;
        let h = s.tape.upsample2x(h)?;
        let h = self.up.forward(s, h)?;
        let h = s.tape.concat(&[h, skip], 1)?;
        let h = self.res_up.forward(s, h, temb)?;
        let h = self.attn_up.forward(s, h, ctx)?;
        let h = s.tape.silu(h)?;
        self.conv_out.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ConditionalDenoiser, ParamStore<f64>) {
        let cfg = DenoiserConfig { c1: 4, c2: 6, time_dim: 8, d_tau: 5, attn_dim: 4, heads: 2 };
        let net = ConditionalDenoiser::new(cfg, 2).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (net, store)
    }

    fn run(net: &ConditionalDenoiser, store: &ParamStore<f64>, z: &Tensor<f64>, ctx: Option<&Tensor<f64>>) -> Tensor<f64> {
        let mut s = Session::new(store, false);
        let zt = s.input(z.clone()).unwrap();
        let c = match ctx {
            Some(c) => s.input(c.clone()).unwrap(),
            None => net.null_context(&mut s, z.shape()[0]).unwrap(),
        };
        let out = net.forward(&mut s, zt, &vec![3; z.shape()[0]], c).unwrap();
        s.value(out).clone()
    }

    #[test]
    fn output_matches_latent_shape() {
        let (net, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let ctx = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        assert_eq!(run(&net, &store, &z, Some(&ctx)).shape(), &[2, 2, 4, 4]);
        assert_eq!(run(&net, &store, &z, None), run(&net, &store, &z, None));
    }

    #[test]
    fn parameter_groups_are_named() {
        let (_, store) = tiny();
        let attn: Vec<_> = store.names().filter(|n| n.contains(ATTENTION_MARK)).collect();
        assert_eq!(attn.len(), 3 * 7);
        assert!(store.names().all(|n| n.starts_with(DENOISER_PREFIX)));
    }
}
