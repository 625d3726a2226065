use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumError, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape), v: Tensor::zeros(shape) }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` counts from 1.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamMoments<T>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), NumError> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(NumError::Shape(format!(
            "adam: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if step == 0 {
        return Err(NumError::Invalid("adam step counter starts at 1".into()));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`]; only trainable parameters with a gradient
/// are touched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter or moment is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<(), NumError> {
        let mut sq = 0.0f64;
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(NumError::NonFinite("gradient"));
            }
            if store.get(name).is_some_and(|p| p.trainable) {
                sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
            }
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if sq.sqrt() > c => Some(c / sq.sqrt()),
            _ => None,
        };
        self.step += 1;
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else {
                return Err(NumError::MissingParam(name.clone()));
            };
            if !p.trainable {
                continue;
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamMoments::zeros(p.value.shape()));
            match scale {
                Some(s) => {
                    let gs = g.map(|v| v * T::lit(s));
                    adam_step(&mut p.value, &gs, st, self.step, &self.cfg)?;
                }
                None => adam_step(&mut p.value, g, st, self.step, &self.cfg)?,
            }
        }
        Ok(())
    }
}
