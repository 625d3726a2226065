use std::path::Path;
use std::process::Command;

use dream_cli::dispatch;
use dream_core::checkpoint::Checkpoint;

const TINY: &str = r#"{
  "corpus.classes": 3, "corpus.subjects": 2, "corpus.pretrain_count": 12, "corpus.train_pairs": 12,
  "corpus.test_pairs": 6, "corpus.channels": 4, "corpus.pretrain_channels": [3, 4], "corpus.raw_length": 128,
  "corpus.image_size": 8,
  "preprocess.channels": 4, "preprocess.length": 64,
  "encoder.channels": 4, "encoder.length": 64, "encoder.token_size": 16, "encoder.d_model": 8,
  "encoder.depth": 1, "encoder.heads": 2,
  "msm.steps": 3, "msm.batch_size": 4, "msm.eval_size": 4, "msm.decoder.d_dec": 8, "msm.decoder.depth": 1,
  "msm.decoder.heads": 2,
  "ae.channels": 4, "ae.steps": 3, "ae.batch_size": 4,
  "image_encoder.width": 4, "image_encoder.embed_dim": 8, "image_encoder.steps": 3, "image_encoder.batch_size": 4,
  "probe.width": 4, "probe.embed_dim": 8, "probe.steps": 3, "probe.batch_size": 4,
  "schedule.steps": 4,
  "denoiser.c1": 4, "denoiser.c2": 4, "denoiser.time_dim": 8, "denoiser.d_tau": 8, "denoiser.attn_dim": 4,
  "ldm.steps": 3, "ldm.batch_size": 4,
  "finetune.steps": 3, "finetune.batch_size": 4,
  "eval.unconditional_samples": 4
}"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["dreamdiff".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    dispatch(&argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["pretrain", "--out", "x.ddck"]), 2);
    assert_eq!(run(&["finetune", "--out", "x.ddck"]), 2);
    assert_eq!(run(&["no-such-stage"]), 2);
    assert_eq!(run(&["gen-data", "--out", "x", "--bogus"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn bad_config_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"msm.mask_ration": 0.5}"#).unwrap();
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("c"))]), 1);
    assert_eq!(run(&["gen-data", "--set", "nope=1", "--out", p(&dir.path().join("c"))]), 1);
    assert_eq!(run(&["pretrain", "--corpus", p(&dir.path().join("missing")), "--out", p(&dir.path().join("e.ddck"))]), 1);
}

#[test]
fn stages_chain_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    let corpus = d.join("corpus");
    assert_eq!(run(&["gen-data", "--config", c, "--seed", "7", "--out", p(&corpus)]), 0);
    for f in ["pretrain.eegc", "train.eegc", "test.eegc"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    let k = p(&corpus);

    let enc1 = d.join("enc1.ddck");
    let enc2 = d.join("enc2.ddck");
    assert_eq!(run(&["pretrain", "--config", c, "--seed", "7", "--corpus", k, "--out", p(&enc1)]), 0);
    assert_eq!(run(&["pretrain", "--config", c, "--seed", "7", "--corpus", k, "--out", p(&enc2)]), 0);
    assert_eq!(std::fs::read(&enc1).unwrap(), std::fs::read(&enc2).unwrap());
    let log1 = std::fs::read_to_string(enc1.with_extension("csv")).unwrap();
    assert_eq!(log1, std::fs::read_to_string(enc2.with_extension("csv")).unwrap());
    assert!(log1.starts_with("epoch,step,masked_mse\n"));
    let ck = Checkpoint::<f32>::load(&enc1).unwrap();
    assert_eq!(ck.meta.stage, "pretrain");
    assert_eq!(ck.meta.seed, 7);
    assert_eq!(ck.meta.config["encoder.d_model"], 8);
    assert!(ck.params.iter().all(|(n, p)| n.starts_with("eeg.") && p.trainable));

    let ae = d.join("ae.ddck");
    let img = d.join("img.ddck");
    let ldm = d.join("ldm.ddck");
    let model = d.join("model.ddck");
    assert_eq!(run(&["train-ae", "--config", c, "--corpus", k, "--out", p(&ae)]), 0);
    assert_eq!(run(&["train-image-encoder", "--config", c, "--corpus", k, "--out", p(&img)]), 0);
    assert_eq!(run(&["train-ldm", "--config", c, "--corpus", k, "--ae", p(&ae), "--out", p(&ldm)]), 0);
    // Wrong stage in the encoder slot.
    assert_eq!(
        run(&["finetune", "--config", c, "--corpus", k, "--ae", p(&ae), "--image-encoder", p(&img), "--encoder", p(&ae), "--out", p(&model)]),
        1
    );
    assert_eq!(
        run(&[
            "finetune", "--config", c, "--corpus", k, "--ae", p(&ae), "--image-encoder", p(&img), "--encoder", p(&enc1),
            "--ldm", p(&ldm), "--out", p(&model),
        ]),
        0
    );
    let ft = std::fs::read_to_string(model.with_extension("csv")).unwrap();
    assert!(ft.starts_with("epoch,step,l_sd,l_clip\n"));
    assert_eq!(ft.lines().count(), 4);
    let tuned = Checkpoint::<f32>::load(&model).unwrap();
    let enc_in = Checkpoint::<f32>::load(&enc1).unwrap();
    assert!(tuned.params.get("ae.latent_scale").is_some_and(|p| !p.trainable));
    assert!(tuned.params.get("eeg.embed.weight").unwrap().trainable);
    assert_ne!(tuned.params.get("eeg.embed.weight").unwrap().value, enc_in.params.get("eeg.embed.weight").unwrap().value);

    let samples = d.join("samples");
    assert_eq!(run(&["generate", "--config", c, "--corpus", k, "--model", p(&model), "--out", p(&samples)]), 0);
    let index = std::fs::read_to_string(samples.join("index.csv")).unwrap();
    assert!(index.starts_with("sample_id,class,context_source\n0000,"));
    assert_eq!(index.lines().count(), 7);
    assert!(samples.join("0005.ppm").exists());
    assert_eq!(run(&["evaluate", "--config", c, "--corpus", k, "--samples", p(&samples)]), 0);
    let null = d.join("null");
    assert_eq!(
        run(&["generate", "--config", c, "--corpus", k, "--model", p(&model), "--out", p(&null), "--unconditional", "3"]),
        0
    );
    assert!(std::fs::read_to_string(null.join("index.csv")).unwrap().contains("0002,2,null"));

    let grid = d.join("grid.json");
    std::fs::write(
        &grid,
        r#"[{"row_id": "Full", "msm": true, "clip": true, "mask_ratio": 0.75, "groups": "E+A"},
            {"row_id": "1", "msm": false, "clip": false, "groups": "E+A"}]"#,
    )
    .unwrap();
    let abl = d.join("ablation");
    assert_eq!(run(&["ablate", "--config", c, "--corpus", k, "--grid", p(&grid), "--out", p(&abl)]), 0);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row_id,msm,clip,mask_ratio,groups,params,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Full,true,true,0.75,E+A,"));
    assert!(lines[2].starts_with("1,false,false,-,E+A,"));
    assert!(abl.join("Full/grid.ppm").exists() && abl.join("1/grid.ppm").exists());
}

#[test]
fn seed_comes_from_the_environment_unless_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let bin = env!("CARGO_BIN_EXE_dreamdiff");
    let gen = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(bin);
        cmd.args(["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join(out))]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match env {
            Some(e) => cmd.env("DREAM_SEED", e),
            None => cmd.env_remove("DREAM_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        std::fs::read(dir.path().join(out).join("train.eegc")).unwrap()
    };
    let env5 = gen("a", Some("5"), None);
    let flag5 = gen("b", None, Some("5"));
    let env5_flag9 = gen("c", Some("5"), Some("9"));
    let flag9 = gen("d", None, Some("9"));
    assert_eq!(env5, flag5);
    assert_eq!(env5_flag9, flag9);
    assert_ne!(env5, flag9);
    let status = Command::new(bin).args(["pretrain", "--out", "x.ddck"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
