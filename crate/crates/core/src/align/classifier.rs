//! Small convolutional image classifier. Its normalized penultimate
//! activations serve as a fixed image embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::randn_like;
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, Linear, Session};
use crate::numerics::{Adam, AdamConfig, NumError, ParamStore, Scalar, Tensor, Var};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub width: usize,
    /// Embedding width `d_clip`.
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of Gaussian pixel noise added to training batches.
    pub augment_noise: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 16, embed_dim: 64, steps: 400, batch_size: 32, lr: 2e-3, augment_noise: 0.0 }
    }
}

/// Fixed logit temperature on the unit-norm embedding.
const TEMPERATURE: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct ImageClassifier {
    pub prefix: String,
    pub cfg: ClassifierConfig,
    pub classes: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
}

impl ImageClassifier {
    /// `prefix` names every parameter (e.g. `"imgenc."`).
    pub fn new(prefix: &str, cfg: ClassifierConfig, classes: usize) -> Result<Self, NumError> {
        if cfg.width == 0 || cfg.embed_dim == 0 || classes < 2 {
            return Err(NumError::Invalid(format!("classifier with {classes} classes and {cfg:?}")));
        }
        let w = cfg.width;
        let convs = vec![
            Conv2d::same3(format!("{prefix}conv0"), 3, w),
            Conv2d::new(format!("{prefix}conv1"), w, 2 * w, 3, 2, 1),
            Conv2d::new(format!("{prefix}conv2"), 2 * w, 2 * w, 3, 2, 1),
        ];
        Ok(Self {
            fc: Linear::new(format!("{prefix}fc"), 2 * w, cfg.embed_dim),
            head: Linear::new(format!("{prefix}head"), cfg.embed_dim, classes),
            prefix: prefix.to_string(),
            convs,
            cfg,
            classes,
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.fc.init(store, rng);
        self.head.init(store, rng);
    }

    /// Unit-norm embeddings `[B, d_clip]` of images `[B, 3, H, W]`.
    pub fn embed_var<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(NumError::Shape(format!("classifier input {shape:?}")));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(s, h)?;
            h = s.tape.silu(h)?;
        }
        let hs = s.tape.shape(h).to_vec();
        let h = s.tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let h = s.tape.mean_axis(h, 2)?;
        let h = self.fc.forward(s, h)?;
        s.tape.normalize(h, 1e-12)
    }

    /// Class logits `[B, K]`.
    pub fn logits_var<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NumError> {
        let e = self.embed_var(s, x)?;
        let e = s.tape.scale(e, TEMPERATURE)?;
        self.head.forward(s, e)
    }

    fn chunked<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        mut f: impl FnMut(&mut Session<'_, T>, Var) -> Result<Var, NumError>,
    ) -> Result<Vec<Tensor<T>>, NumError> {
        let n = images.shape().first().copied().unwrap_or(0);
        let per = &images.shape()[1..];
        let stride: usize = per.iter().product();
        let mut out = Vec::new();
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(per);
            let chunk = Tensor::new(&shape, images.data()[start * stride..end * stride].to_vec())?;
            let mut s = Session::new(store, false);
            let x = s.input(chunk)?;
            let y = f(&mut s, x)?;
            let k = s.tape.shape(y)[1];
            let v = s.value(y);
            out.extend((0..end - start).map(|i| Tensor::from_parts(vec![k], v.row(i).to_vec())));
        }
        Ok(out)
    }

    /// One unit-norm embedding per image.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>, NumError> {
        self.chunked(store, images, |s, x| self.embed_var(s, x))
    }

    /// Top-1 class per image.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<usize>, NumError> {
        let logits = self.chunked(store, images, |s, x| self.logits_var(s, x))?;
        Ok(logits
            .iter()
            .map(|l| {
                let d = l.data();
                (0..d.len()).fold(0, |best, k| if d[k] > d[best] { k } else { best })
            })
            .collect())
    }
}

pub struct ClassifierOutcome {
    /// Classifier parameters, all frozen.
    pub params: ParamStore<f32>,
    pub losses: Vec<f64>,
    /// Top-1 accuracy on the (unaugmented) training images.
    pub train_accuracy: f64,
}

/// Cross-entropy training on `images [n, 3, H, W]` with `labels`.
pub fn train_classifier(
    model: &ImageClassifier,
    images: &Tensor<f32>,
    labels: &[usize],
    seed: u64,
) -> Result<ClassifierOutcome> {
    let shape = images.shape();
    if shape.len() != 4 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Invalid(format!("{} labels for images {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::Invalid(format!("label {bad} outside {} classes", model.classes)));
    }
    let cfg = &model.cfg;
    let tag = |t: &str| format!("{}{t}", model.prefix);
    let mut params = ParamStore::new();
    model.init(&mut params, &mut stream(seed, &tag("init"), 0));
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: Some(1.0), ..Default::default() });
    let per: usize = shape[1..].iter().product();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = crate::diffusion::minibatch(labels.len(), cfg.batch_size, step, seed, &tag("shuffle"));
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in &idx {
            data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = idx.len();
        let mut x = Tensor::new(&bshape, data)?;
        if cfg.augment_noise > 0.0 {
            let noise: Tensor<f32> = randn_like(&bshape, &mut stream(seed, &tag("augment"), step as u64));
            let k = cfg.augment_noise as f32;
            x = x.zip_map(&noise, |a, n| a + k * n)?;
        }
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let diverged = Error::at_step("classifier training", step);
        let mut s = Session::new(&params, true);
        let xv = s.input(x)?;
        let logits = model.logits_var(&mut s, xv).map_err(&diverged)?;
        let lp = s.tape.log_softmax(logits).map_err(&diverged)?;
        let loss = s.tape.nll(lp, &batch_labels).map_err(&diverged)?;
        losses.push(s.value(loss).item() as f64);
        let grads = s.param_grads(loss).map_err(&diverged)?;
        drop(s);
        adam.step(&mut params, &grads).map_err(&diverged)?;
    }
    params.set_all_trainable(false);
    let pred = model.predict(&params, images)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ClassifierOutcome { params, losses, train_accuracy: hits as f64 / labels.len() as f64 })
}
