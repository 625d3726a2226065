use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::{make_schedule, ConditionalDenoiser, DenoiserConfig};
use crate::msm::{EegEncoder, EncoderConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn clip_loss_fixed_points() {
    let a = [0.6, 0.8, 0.0];
    assert!(clip_loss(&a, &a).unwrap().abs() < 1e-12);
    assert!((clip_loss(&a, &[0.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((clip_loss(&a, &[-0.6, -0.8, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    assert!(clip_loss(&a, &[0.0; 3]).is_err());
    assert!(clip_loss(&a, &[1.0]).is_err());
}

proptest! {
    #[test]
    fn clip_loss_symmetric_and_scale_free(
        a in prop::collection::vec(-3.0f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
        ka in 1e-3f64..1e3,
        kb in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let l = clip_loss(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((clip_loss(&b, &a).unwrap() - l).abs() < 1e-12);
        let sa: Vec<f64> = a.iter().map(|v| v * ka).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * kb).collect();
        prop_assert!((clip_loss(&sa, &sb).unwrap() - l).abs() < 1e-6);
    }
}

#[test]
fn clip_loss_gradient_is_orthogonal_to_its_input() {
    let mut r = rng(1);
    for _ in 0..20 {
        let e: Tensor<f64> = Tensor::randn(&[1, 6], 1.0, &mut r);
        let img: Tensor<f64> = Tensor::randn(&[1, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let ev = tape.leaf(e.clone(), true).unwrap();
        let iv = tape.constant(img.clone()).unwrap();
        let l = clip_loss_var(&mut tape, ev, iv).unwrap();
        let g = tape.backward(l).unwrap().take(ev).unwrap();
        let radial: f64 = g.data().iter().zip(e.data()).map(|(a, b)| a * b).sum();
        assert!(radial.abs() < 1e-12, "{radial}");

        let f = |k: f64| clip_loss(&e.data().iter().map(|v| v * k).collect::<Vec<_>>(), img.data()).unwrap();
        let h = 1e-4;
        assert!(((f(1.0 + h) - f(1.0 - h)) / (2.0 * h)).abs() < 1e-4);
        assert!((tape.value(l).item() - f(1.0)).abs() < 1e-12);
    }
}

fn identity_head(d: usize, pooling: Pooling) -> (ConditionProjector, AlignmentHead, ParamStore<f64>) {
    let tau = ConditionProjector::new(d, d);
    let head = AlignmentHead::new(d, d, pooling);
    let mut store = ParamStore::new();
    store.insert(tau.proj.weight_name(), Tensor::eye(d), true);
    store.insert(tau.proj.bias_name(), Tensor::zeros(&[d]), true);
    store.insert(head.h.weight_name(), Tensor::eye(d), true);
    store.insert(head.h.bias_name(), Tensor::zeros(&[d]), true);
    (tau, head, store)
}

#[test]
fn eeg_embedding_examples() {
    let (tau, head, store) = identity_head(3, Pooling::Mean);
    let y = Tensor::from_f64(&[1, 3], &[3.0, 0.0, 4.0]).unwrap();
    let e = eeg_clip_embedding(&store, &tau, &head, &y).unwrap();
    assert_eq!(e.shape(), &[3]);
    for (got, want) in e.data().iter().zip([0.6, 0.0, 0.8]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(eeg_clip_embedding(&store, &tau, &head, &Tensor::zeros(&[2, 3])).is_err());

    let mut store = ParamStore::new();
    let tau = ConditionProjector::new(4, 5);
    let head = AlignmentHead::new(5, 3, Pooling::Mean);
    tau.init(&mut store, &mut rng(2));
    head.init(&mut store, &mut rng(3));
    let y: Tensor<f64> = Tensor::randn(&[3, 4], 1.0, &mut rng(4));
    let e = eeg_clip_embedding(&store, &tau, &head, &y).unwrap();
    assert!((e.data().iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    let doubled = Tensor::new(&[6, 4], [y.data(), y.data()].concat()).unwrap();
    let e2 = eeg_clip_embedding(&store, &tau, &head, &doubled).unwrap();
    assert!(e.max_abs_diff(&e2) < 1e-12);
}

#[test]
fn first_token_pooling_ignores_later_rows() {
    let (tau, head, store) = identity_head(2, Pooling::First);
    let a = Tensor::from_f64(&[2, 2], &[1.0, 1.0, 5.0, -3.0]).unwrap();
    let b = Tensor::from_f64(&[2, 2], &[1.0, 1.0, -2.0, 9.0]).unwrap();
    let ea = eeg_clip_embedding(&store, &tau, &head, &a).unwrap();
    assert_eq!(ea, eeg_clip_embedding(&store, &tau, &head, &b).unwrap());
    assert!((ea.data()[0] - 0.5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn groups_by_name() {
    assert_eq!(ParamGroup::of("eeg.block0.attn.q.weight"), Some(ParamGroup::Encoder));
    assert_eq!(ParamGroup::of("unet.mid.xattn.wk.weight"), Some(ParamGroup::Attention));
    assert_eq!(ParamGroup::of("unet.mid.res.conv1.weight"), None);
    assert_eq!(ParamGroup::of("tau.proj.bias"), Some(ParamGroup::Projector));
    assert_eq!(ParamGroup::of("align.h.weight"), Some(ParamGroup::Head));
    assert_eq!(ParamGroup::of("align.hx.weight"), None);
    assert_eq!(ParamGroup::of("ae.enc0.weight"), None);
    assert_eq!(ParamGroup::of("imgenc.fc.weight"), None);
}

#[test]
fn classifier_embeddings_are_unit_norm() {
    let m = ImageClassifier::new("imgenc.", ClassifierConfig { width: 4, embed_dim: 6, ..Default::default() }, 3).unwrap();
    let mut store = ParamStore::<f64>::new();
    m.init(&mut store, &mut rng(5));
    let x = Tensor::uniform(&[5, 3, 8, 8], 0.0, 1.0, &mut rng(6));
    let e = m.embed(&store, &x).unwrap();
    assert_eq!(e.len(), 5);
    for v in e {
        assert!((v.data().iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }
    assert!(m.predict(&store, &x).unwrap().iter().all(|&k| k < 3));
}

#[test]
fn classifier_learns_separable_colours() {
    let mut r = rng(7);
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..24 {
        let k = i % 2;
        let noise: Tensor<f32> = Tensor::uniform(&[3, 8, 8], 0.0, 0.2, &mut r);
        imgs.push(noise.map(|v| if k == 0 { v } else { v + 0.7 }));
        labels.push(k);
    }
    let images = Tensor::stack(&imgs).unwrap();
    let cfg = ClassifierConfig { width: 4, embed_dim: 8, steps: 60, batch_size: 8, lr: 1e-2, augment_noise: 0.05 };
    let m = ImageClassifier::new("probe.", cfg, 2).unwrap();
    let out = train_classifier(&m, &images, &labels, 3).unwrap();
    assert_eq!(out.train_accuracy, 1.0);
    assert!(out.params.iter().all(|(n, p)| n.starts_with("probe.") && !p.trainable));
    let again = train_classifier(&m, &images, &labels, 3).unwrap();
    assert_eq!(again.losses, out.losses);
    assert!(train_classifier(&m, &images, &labels[1..], 3).is_err());
}

struct Tiny {
    enc: EegEncoder,
    den: ConditionalDenoiser,
    params: ParamStore<f32>,
    data: FinetuneData,
}

fn tiny_setup() -> Tiny {
    let ecfg = EncoderConfig { channels: 2, length: 16, token_size: 4, d_model: 8, depth: 1, heads: 2, mlp_ratio: 2 };
    let enc = EegEncoder::new(ecfg).unwrap();
    let dcfg = DenoiserConfig { c1: 4, c2: 4, time_dim: 8, d_tau: 6, attn_dim: 4, heads: 1 };
    let den = ConditionalDenoiser::new(dcfg, 2).unwrap();
    let mut params = enc.init_store(&mut rng(8));
    den.init(&mut params, &mut rng(9));
    params.insert("ae.latent_scale", Tensor::ones(&[1]), false);
    let mut r = rng(10);
    let data = FinetuneData {
        tokens: (0..6).map(|_| Tensor::randn(&[4, 8], 1.0, &mut r)).collect(),
        latents: Tensor::randn(&[6, 2, 4, 4], 1.0, &mut r),
        image_embeddings: Tensor::randn(&[6, 5], 1.0, &mut r),
    };
    Tiny { enc, den, params, data }
}

fn run(t: &Tiny, policy: &FinetunePolicy, steps: usize) -> FinetuneOutcome {
    run_lr(t, policy, steps, 1e-2)
}

fn run_lr(t: &Tiny, policy: &FinetunePolicy, steps: usize, lr: f64) -> FinetuneOutcome {
    let sched = make_schedule(10, 1e-3, 0.1).unwrap();
    let cfg = FinetuneConfig { steps, batch_size: 3, lr, ..Default::default() };
    finetune(&t.enc, &t.den, &sched, t.params.clone(), &t.data, policy, &cfg, 11).unwrap()
}

#[test]
fn finetune_touches_exactly_the_policy_groups() {
    let t = tiny_setup();
    let policies = [
        FinetunePolicy::default(),
        FinetunePolicy { attention: false, ..Default::default() },
        FinetunePolicy { encoder: false, ..Default::default() }.without_alignment(),
        FinetunePolicy::default().without_alignment(),
    ];
    for policy in &policies {
        let out = run(&t, policy, 1);
        let fresh = run_lr(&t, policy, 1, 0.0);
        for (name, p) in out.params.iter() {
            assert_eq!(p.trainable, policy.trains(name), "{name}");
            let before = match t.params.get(name) {
                Some(b) => &b.value,
                None => &fresh.params.get(name).unwrap().value,
            };
            let moved = p.value != *before;
            assert_eq!(moved, policy.trains(name) && (policy.aligned() || ParamGroup::of(name) != Some(ParamGroup::Head)), "{name} under {policy:?}");
        }
        assert_eq!(out.params.len(), t.params.len() + 4);
    }
}

#[test]
fn finetune_without_alignment_still_logs_it() {
    let t = tiny_setup();
    let out = run(&t, &FinetunePolicy::default().without_alignment(), 4);
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().all(|r| r.l_clip > 0.0 && r.l_clip < 2.0));
    assert_eq!(out.log[3].epoch, 1);
    let csv = FinetuneLogRow::csv(&out.log);
    assert!(csv.starts_with("epoch,step,l_sd,l_clip\n0,1,"));
    assert_eq!(run(&t, &FinetunePolicy::default(), 3).log, run(&t, &FinetunePolicy::default(), 3).log);
}

#[test]
fn finetune_rejects_policies_over_missing_groups() {
    let mut t = tiny_setup();
    t.params.remove_prefix("eeg.");
    let sched = make_schedule(10, 1e-3, 0.1).unwrap();
    let err = finetune(&t.enc, &t.den, &sched, t.params.clone(), &t.data, &FinetunePolicy::default(), &FinetuneConfig::default(), 1);
    assert!(matches!(err, Err(crate::Error::Config(_))));
    let bad = FinetunePolicy { lambda_clip: -1.0, ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn dropped_samples_see_only_the_null_row() {
    let cfg = DenoiserConfig { c1: 2, c2: 2, time_dim: 4, d_tau: 3, attn_dim: 2, heads: 1 };
    let den = ConditionalDenoiser::new(cfg, 2).unwrap();
    let mut store = ParamStore::<f32>::new();
    den.init(&mut store, &mut rng(40));
    let ctx = Tensor::randn(&[3, 4, 3], 1.0, &mut rng(41));
    let mut s = Session::new(&store, false);
    let c = s.input(ctx.clone()).unwrap();
    let out = finetune::with_null_rows(&mut s, &den, c, &[false, true, false]).unwrap();
    let out = s.value(out).clone();
    let null = store.value(ConditionalDenoiser::NULL_CONTEXT).unwrap().data().to_vec();
    assert_eq!(out.row(0), ctx.row(0));
    assert_eq!(out.row(2), ctx.row(2));
    assert!(out.row(1).chunks(3).all(|r| r == null.as_slice()));
    let kept = finetune::with_null_rows(&mut s, &den, c, &[false; 3]).unwrap();
    assert_eq!(kept, c);
}
