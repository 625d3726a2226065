//! Alignment of pooled condition embeddings with a frozen image embedding,
//! and the joint fine-tuning stage.

mod classifier;
mod finetune;

pub use classifier::{train_classifier, ClassifierConfig, ClassifierOutcome, ImageClassifier};
pub use finetune::{finetune, FinetuneConfig, FinetuneData, FinetuneLogRow, FinetuneOutcome, FinetunePolicy, ParamGroup};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionProjector;
use crate::numerics::nn::{Linear, Session};
use crate::numerics::{NumError, ParamStore, Scalar, Tape, Tensor, Var};

pub const IMAGE_ENCODER_PREFIX: &str = "imgenc.";
pub const HEAD_PREFIX: &str = "align.h";

/// How the `M` context rows become one vector before `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// The projection `h` from pooled context rows to the image embedding space.
#[derive(Clone, Debug)]
pub struct AlignmentHead {
    pub h: Linear,
    pub pooling: Pooling,
}

impl AlignmentHead {
    pub fn new(d_tau: usize, d_clip: usize, pooling: Pooling) -> Self {
        Self { h: Linear::new(HEAD_PREFIX, d_tau, d_clip), pooling }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.h.init(store, rng);
    }

    /// `h(pool(ctx))` before normalization, `[B, d_clip]` from `[B, M, d_τ]`.
    pub fn project_var<T: Scalar>(&self, s: &mut Session<'_, T>, ctx: Var) -> Result<Var, NumError> {
        let cs = s.tape.shape(ctx).to_vec();
        if cs.len() != 3 || cs[1] == 0 {
            return Err(NumError::Shape(format!("context {cs:?}, expected [B, M, d]")));
        }
        let pooled = match self.pooling {
            Pooling::Mean => s.tape.mean_axis(ctx, 1)?,
            Pooling::First => {
                let flat = s.tape.reshape(ctx, &[cs[0] * cs[1], cs[2]])?;
                let firsts: Vec<usize> = (0..cs[0]).map(|b| b * cs[1]).collect();
                s.tape.gather(flat, &firsts)?
            }
        };
        self.h.forward(s, pooled)
    }

    /// Unit-norm `h(pool(ctx))`.
    pub fn embed_var<T: Scalar>(&self, s: &mut Session<'_, T>, ctx: Var) -> Result<Var, NumError> {
        let p = self.project_var(s, ctx)?;
        s.tape.normalize(p, NORM_EPS)
    }
}

/// Unit-norm condition embedding of one encoded sequence `y [N, d_model]`.
/// Fails when the projected vector is zero.
pub fn eeg_clip_embedding<T: Scalar>(
    store: &ParamStore<T>,
    tau: &ConditionProjector,
    head: &AlignmentHead,
    y: &Tensor<T>,
) -> Result<Tensor<T>, NumError> {
    let ys = y.shape();
    if ys.len() != 2 {
        return Err(NumError::Shape(format!("encoded sequence {ys:?}, expected [N, d]")));
    }
    let mut s = Session::new(store, false);
    let yv = s.input(y.reshape(&[1, ys[0], ys[1]])?)?;
    let ctx = tau.forward(&mut s, yv)?;
    let p = head.project_var(&mut s, ctx)?;
    let norm = s.value(p).data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        return Err(NumError::Invalid("condition embedding is the zero vector".into()));
    }
    let e = s.tape.normalize(p, NORM_EPS)?;
    let d = s.tape.shape(e)[1];
    s.value(e).reshape(&[d])
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn clip_loss(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NumError::Shape(format!("clip loss over lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(NumError::Invalid("clip loss of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Batch mean of `1 − cos` between the rows of `eeg` and `img`, both `[B, d]`.
pub fn clip_loss_var<T: Scalar>(tape: &mut Tape<T>, eeg: Var, img: Var) -> Result<Var, NumError> {
    let (se, si) = (tape.shape(eeg).to_vec(), tape.shape(img).to_vec());
    if se.len() != 2 || se != si {
        return Err(NumError::Shape(format!("clip loss over {se:?} and {si:?}")));
    }
    let a = tape.normalize(eeg, NORM_EPS)?;
    let b = tape.normalize(img, NORM_EPS)?;
    let p = tape.mul(a, b)?;
    let cos = tape.sum(p)?;
    let neg = tape.scale(cos, -1.0 / se[0] as f64)?;
    let one = tape.constant(Tensor::scalar(T::one()))?;
    tape.add(one, neg)
}

#[cfg(test)]
mod tests;
