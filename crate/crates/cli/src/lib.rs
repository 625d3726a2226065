//! `dreamdiff`: one pipeline stage per invocation. Stages exchange corpus
//! directories, checkpoints, PPM sample folders and CSV logs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use dream_core::align::FinetuneLogRow;
use dream_core::checkpoint::{validate_against, Checkpoint};
use dream_core::config::RunConfig;
use dream_core::diffusion::ppm::{decode_ppm, write_samples, IndexRow};
use dream_core::eval::{
    binomial_se, null_labels, nway_accuracy, run_ablation, table1_grid, AblationRow, EncoderCache, Foundation,
};
use dream_core::msm::MsmLogRow;
use dream_core::numerics::{ParamStore, Tensor};
use dream_core::pipeline::{self, Models};
use dream_core::rng::stream;
use dream_core::signal::io::{load_paired, load_recordings, save_paired, save_recordings};
use dream_core::signal::synth::generate_synthetic_corpus;
use dream_core::signal::{PairedDataset, Split};
use dream_core::{Error, Result};

pub const SEED_ENV: &str = "DREAM_SEED";

#[derive(Parser, Debug)]
#[command(name = "dreamdiff", version, about = "EEG-conditioned latent diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file and DREAM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Single config override, `key=json-value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct CorpusArg {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus (pretrain.eegc, train.eegc, test.eegc).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked signal modeling of the encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        /// CSV log; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Image autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frozen image encoder for alignment.
    TrainImageEncoder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unconditional warm-up of the latent denoiser.
    TrainLdm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint fine-tuning of encoder, projector and attention.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        image_encoder: PathBuf,
        /// Pretrained encoder; omitted means a fresh one.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Warm denoiser; omitted means a fresh one.
        #[arg(long)]
        ldm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Images for every pair of a split, or unconditional samples.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Draw this many null-context samples instead.
        #[arg(long)]
        unconditional: Option<usize>,
    },
    /// N-way top-1 accuracy of a sample folder.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Ablation grid; writes ablation.csv and per-row sample grids.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        /// JSON list of rows; defaults to the built-in grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one invocation and returns the process exit status: 0 on success,
/// 2 for usage errors, 1 for failures.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

/// Merges defaults < DREAM_SEED < config file < flags.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not a u64")))?;
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        cfg = cfg.with_json(&text)?;
    }
    let mut flags = Map::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set {kv}: expected key=value")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        flags.insert(k.to_string(), v);
    }
    if let Some(seed) = common.seed {
        flags.insert("seed".into(), Value::from(seed));
    }
    cfg.with_overrides(&flags)
}

fn snapshot(cfg: &RunConfig) -> Value {
    Value::Object(cfg.to_flat())
}

fn load_split(dir: &Path, split: Split) -> Result<PairedDataset> {
    let name = match split {
        Split::Train => "train.eegc",
        Split::Test => "test.eegc",
    };
    Ok(load_paired(&dir.join(name), split)?)
}

fn save(path: &Path, stage: &str, cfg: &RunConfig, params: ParamStore<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Checkpoint::new(stage, cfg.seed, snapshot(cfg), params).save(path)?;
    Ok(())
}

/// Loads a checkpoint from `stage` and checks it against `model`'s shapes.
fn load(path: &Path, stages: &[&str], model: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    ck.expect_stage(stages)?;
    validate_against(&ck.params, model)?;
    Ok(ck.params)
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("csv"))
}

fn fresh<F: FnOnce(&mut ParamStore<f32>)>(f: F) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    f(&mut s);
    s
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = resolve_config(&common)?;
            let corpus = generate_synthetic_corpus(&cfg.corpus, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            save_recordings(&out.join("pretrain.eegc"), &corpus.pretrain)?;
            save_paired(&out.join("train.eegc"), &corpus.train)?;
            save_paired(&out.join("test.eegc"), &corpus.test)?;
            std::fs::write(out.join("config.json"), cfg.to_flat_json())?;
        }
        Command::Pretrain { common, corpus, out, log } => {
            let cfg = resolve_config(&common)?;
            let recs = load_recordings(&corpus.corpus.join("pretrain.eegc"))?;
            let res = pipeline::run_pretrain(&cfg, &recs)?;
            save(&out, "pretrain", &cfg, res.encoder)?;
            std::fs::write(log_path(&out, log), MsmLogRow::csv(&res.log))?;
            println!("masked_mse initial={} final={}", res.initial_mse, res.final_mse);
        }
        Command::TrainAe { common, corpus, out } => {
            let cfg = resolve_config(&common)?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let res = pipeline::run_train_ae(&cfg, &train)?;
            save(&out, "train-ae", &cfg, res.params)?;
            println!("recon_mse={}", res.recon_mse);
        }
        Command::TrainImageEncoder { common, corpus, out } => {
            let cfg = resolve_config(&common)?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let models = Models::for_dataset(&cfg, &train)?;
            let res = pipeline::run_train_image_encoder(&cfg, &models, &train)?;
            save(&out, "train-image-encoder", &cfg, res.params)?;
            println!("train_accuracy={}", res.train_accuracy);
        }
        Command::TrainLdm { common, corpus, ae, out } => {
            let cfg = resolve_config(&common)?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let models = Models::for_dataset(&cfg, &train)?;
            let ae = load(&ae, &["train-ae"], &fresh(|s| models.ae.init(s, &mut stream(0, "shape", 0))))?;
            let res = pipeline::run_train_ldm(&cfg, &models, &ae, &train)?;
            save(&out, "train-ldm", &cfg, res.params)?;
            println!("final_loss={}", res.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Finetune { common, corpus, ae, image_encoder, encoder, ldm, out, log } => {
            let cfg = resolve_config(&common)?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let models = Models::for_dataset(&cfg, &train)?;
            let mut shape_rng = stream(0, "shape", 0);
            let ae = load(&ae, &["train-ae"], &fresh(|s| models.ae.init(s, &mut shape_rng)))?;
            let img = load(&image_encoder, &["train-image-encoder"], &fresh(|s| models.image_encoder.init(s, &mut shape_rng)))?;
            let encoder = match encoder {
                Some(p) => Some(load(&p, &["pretrain"], &models.encoder.init_store(&mut shape_rng))?),
                None => None,
            };
            let ldm = match ldm {
                Some(p) => Some(load(&p, &["train-ldm"], &fresh(|s| models.denoiser.init(s, &mut shape_rng)))?),
                None => None,
            };
            let data = pipeline::finetune_data(&cfg, &models, &train, &ae, &img)?;
            let res = pipeline::run_finetune(&cfg, &models, &data, encoder.as_ref(), &ae, &img, ldm.as_ref(), &cfg.policy)?;
            save(&out, "finetune", &cfg, res.params)?;
            std::fs::write(log_path(&out, log), FinetuneLogRow::csv(&res.log))?;
        }
        Command::Generate { common, corpus, model, out, split, unconditional } => {
            let cfg = resolve_config(&common)?;
            let split = match split.as_str() {
                "test" => Split::Test,
                "train" => Split::Train,
                s => return Err(Error::Config(format!("unknown split `{s}`, expected test or train"))),
            };
            let ds = load_split(&corpus.corpus, split)?;
            let models = Models::for_dataset(&cfg, &ds)?;
            let params = load_model(&model, &models)?;
            let (images, rows) = match unconditional {
                Some(n) => {
                    let imgs = pipeline::generate_unconditional(&cfg, &models, &params, n)?;
                    let rows = null_labels(n, ds.classes)
                        .into_iter()
                        .enumerate()
                        .map(|(i, class)| IndexRow { sample_id: format!("{i:04}"), class, context_source: "null".into() })
                        .collect::<Vec<_>>();
                    (imgs, rows)
                }
                None => {
                    let recs: Vec<_> = ds.items.iter().map(|p| p.recording.clone()).collect();
                    let imgs = pipeline::generate(&cfg, &models, &params, &recs, cfg.eval.repeats)?;
                    let tag = if split == Split::Test { "test" } else { "train" };
                    let rows = (0..imgs.len())
                        .map(|k| {
                            let i = k / cfg.eval.repeats;
                            IndexRow { sample_id: format!("{k:04}"), class: ds.items[i].class, context_source: format!("{tag}:{i}") }
                        })
                        .collect::<Vec<_>>();
                    (imgs, rows)
                }
            };
            write_samples(&out, &images, &rows)?;
            println!("wrote {} samples to {}", images.len(), out.display());
        }
        Command::Evaluate { common, corpus, samples } => {
            let cfg = resolve_config(&common)?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let (images, labels) = read_samples(&samples)?;
            let probe = pipeline::run_train_probe(&cfg, &train)?;
            let acc = nway_accuracy(&probe, &Tensor::stack(&images)?, &labels)?;
            println!(
                "accuracy={acc} n={} se={} chance={}",
                labels.len(),
                binomial_se(acc, labels.len()),
                1.0 / train.classes as f64
            );
        }
        Command::Ablate { common, corpus, grid, out } => {
            let cfg = resolve_config(&common)?;
            let rows: Vec<AblationRow> = match grid {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .map_err(|e| Error::Config(format!("grid {}: {e}", p.display())))?,
                None => table1_grid(),
            };
            let pre = load_recordings(&corpus.corpus.join("pretrain.eegc"))?;
            let train = load_split(&corpus.corpus, Split::Train)?;
            let test = load_split(&corpus.corpus, Split::Test)?;
            let base = Foundation::build(&cfg, &train)?;
            let mut cache = EncoderCache::default();
            let results = run_ablation(&rows, &cfg, &base, &mut cache, &pre, &test, Some(&out))?;
            for r in &results {
                match &r.accuracy {
                    Ok(a) => println!("{} accuracy={a}", r.row.row_id),
                    Err(e) => eprintln!("row {} failed: {e}", r.row.row_id),
                }
            }
        }
    }
    Ok(())
}

/// The fine-tuned checkpoint, checked against every generating network.
fn load_model(path: &Path, models: &Models) -> Result<ParamStore<f32>> {
    let mut r = stream(0, "shape", 0);
    let mut shape = models.encoder.init_store(&mut r);
    models.tau.init(&mut shape, &mut r);
    models.denoiser.init(&mut shape, &mut r);
    models.ae.init(&mut shape, &mut r);
    load(path, &["finetune"], &shape)
}

/// Images and classes listed in a sample folder's index.
fn read_samples(dir: &Path) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let index = std::fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = index.lines();
    if lines.next() != Some("sample_id,class,context_source") {
        return Err(Error::Invalid(format!("{}: unexpected index header", dir.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut f = line.split(',');
        let (Some(id), Some(class)) = (f.next(), f.next()) else {
            return Err(Error::Invalid(format!("index line `{line}`")));
        };
        let class: usize = class.parse().map_err(|_| Error::Invalid(format!("index line `{line}`")))?;
        images.push(decode_ppm(&std::fs::read(dir.join(format!("{id}.ppm")))?)?);
        labels.push(class);
    }
    if images.is_empty() {
        return Err(Error::Invalid(format!("{}: no samples", dir.display())));
    }
    Ok((images, labels))
}
