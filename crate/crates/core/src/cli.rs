//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 for usage or configuration errors, 1 for anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{bench_both, BenchInputs};
use crate::config::RunConfig;
use crate::data::{build_corpus, generate_corpus, Corpus, Split};
use crate::encoders::CookieModel;
use crate::error::{Error, Result};
use crate::eval::{analyze_attention, attention_csv, eval_retrieval};
use crate::train::{load_checkpoint, run_finetune, run_pretrain, save_checkpoint, Checkpoint, CheckpointMeta, TrainOutcome};

pub const THREADS_ENV: &str = "COOKIE_KIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cookie-kit", version, about = "Dual-stream image-text pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData(Common),
    /// Two-stage contrastive pre-training.
    Pretrain(Common),
    /// Triplet fine-tuning, optionally from a pre-trained checkpoint.
    Finetune(Common),
    /// Retrieval and STS evaluation of a checkpoint.
    Eval(Common),
    /// Dump per-token rankings against the pooled embedding.
    Attn(Common),
    /// Time double-stream retrieval against the one-stream simulation.
    Bench(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Corpus size (gen-data, or on-the-fly corpora) or sample count (attn).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Last pre-training stage to run (1 = cross-modal only).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    /// Comma-separated gallery sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Corpus directory written by gen-data; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Record written next to every output so a run can be repeated exactly.
#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    args: Vec<String>,
    config: &'a RunConfig,
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let printable: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &printable) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Caps the global worker pool from the environment.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.split {
        cfg.eval.split = s;
    }
    if let Some(s) = &c.sizes {
        cfg.bench.sizes = s.clone();
    }
    if let Some(r) = c.repeats {
        cfg.bench.repeats = r;
    }
    if c.stage == Some(1) {
        cfg.train.stage2_epochs = 0;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn prepare_out(out: &Path, command: &str, cfg: &RunConfig, args: &[String]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("run_config.json"), &cfg.to_json())?;
    write_json(
        &out.join(format!("provenance_{command}.json")),
        &Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            args: args.to_vec(),
            config: cfg,
        },
    )
}

fn corpus_for(c: &Common, cfg: &RunConfig) -> Result<Corpus> {
    match &c.data {
        Some(dir) => Corpus::read(dir),
        None => generate_corpus(c.n.unwrap_or(cfg.data.samples), cfg.seed, &cfg.data.generator),
    }
}

/// Loads weights and adopts the checkpoint's encoder shape.
fn model_from(path: &Path, cfg: &mut RunConfig) -> Result<CookieModel<f32>> {
    let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
    if ckpt.meta.encoder != cfg.encoder {
        log::info!("using the encoder shape stored in {}", path.display());
        cfg.encoder = ckpt.meta.encoder.clone();
        cfg.augment.text.vocab_size = cfg.encoder.vocab_size;
        cfg.augment.visual.output_size = cfg.encoder.image_size;
    }
    CookieModel::from_store(ckpt.meta.encoder, &ckpt.params)
}

fn save_model(path: &Path, model: &CookieModel<f32>, cfg: &RunConfig, phase: &str, outcome: &TrainOutcome) -> Result<()> {
    let last = outcome.log.last();
    save_checkpoint(
        path,
        &Checkpoint {
            meta: CheckpointMeta {
                encoder: model.config.clone(),
                phase: phase.into(),
                stage: last.map_or(0, |r| r.stage),
                epoch: last.map_or(0, |r| r.epoch),
                global_step: outcome.optim.step,
                val_rsum: outcome.best.as_ref().map(|b| b.0),
                seed: cfg.seed,
                optimizer: None,
                optimizer_step: 0,
            },
            params: model.store.clone(),
            optim: None,
        },
    )
}

fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let mut cfg = resolve(&c)?;
            if let Some(n) = c.n {
                cfg.data.samples = n;
            }
            cfg.validate()?;
            prepare_out(&c.out, "gen-data", &cfg, args)?;
            let m = build_corpus(cfg.data.samples, cfg.seed, &cfg.data.generator, &c.out)?;
            println!("wrote {} samples to {}", m.records.len(), c.out.display());
        }
        Command::Pretrain(c) => {
            let cfg = resolve(&c)?;
            cfg.validate()?;
            prepare_out(&c.out, "pretrain", &cfg, args)?;
            let corpus = corpus_for(&c, &cfg)?;
            let outcome = run_pretrain(&cfg, &corpus, Some(&c.out))?;
            let path = c.out.join("pretrain.ckpt");
            save_model(&path, &outcome.model, &cfg, "pretrain", &outcome)?;
            println!("pre-trained weights: {}", path.display());
        }
        Command::Finetune(c) => {
            let mut cfg = resolve(&c)?;
            let init = c.ckpt.as_deref().map(|p| model_from(p, &mut cfg)).transpose()?;
            cfg.validate()?;
            prepare_out(&c.out, "finetune", &cfg, args)?;
            let corpus = corpus_for(&c, &cfg)?;
            let outcome = run_finetune(&cfg, &corpus, init.as_ref(), Some(&c.out))?;
            let path = c.out.join("model.ckpt");
            save_model(&path, outcome.selected(), &cfg, "finetune", &outcome)?;
            println!("fine-tuned weights: {}", path.display());
        }
        Command::Eval(c) => {
            let mut cfg = resolve(&c)?;
            let path = c.ckpt.as_deref().ok_or_else(|| Error::Config("eval needs --ckpt".into()))?;
            let model = model_from(path, &mut cfg)?;
            cfg.validate()?;
            prepare_out(&c.out, "eval", &cfg, args)?;
            let corpus = corpus_for(&c, &cfg)?;
            let (report, ranks, dump) = eval_retrieval(&model, &corpus, &cfg.eval, cfg.objective.match_pool, cfg.seed)?;
            write_json(&c.out.join("report.json"), &report)?;
            write_json(&c.out.join("ranks.json"), &ranks)?;
            write(&c.out.join("embeddings.json"), &serde_json::to_string(&dump)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Attn(c) => {
            let mut cfg = resolve(&c)?;
            let path = c.ckpt.as_deref().ok_or_else(|| Error::Config("attn needs --ckpt".into()))?;
            let model = model_from(path, &mut cfg)?;
            cfg.validate()?;
            prepare_out(&c.out, "attn", &cfg, args)?;
            let corpus = match &c.data {
                Some(dir) => Corpus::read(dir)?,
                None => generate_corpus(cfg.data.samples, cfg.seed, &cfg.data.generator)?,
            };
            let samples: Vec<usize> = corpus.split(cfg.eval.split).into_iter().take(c.n.unwrap_or(16)).collect();
            let analysis = analyze_attention(&model, &corpus, &samples, cfg.objective.match_pool)?;
            write(&c.out.join("attention_image.csv"), &attention_csv(&analysis, true))?;
            write(&c.out.join("attention_text.csv"), &attention_csv(&analysis, false))?;
            write_json(&c.out.join("attention.json"), &analysis)?;
            println!(
                "{} samples, objects outrank background in {:.1}%",
                analysis.samples.len(),
                100.0 * analysis.object_rate
            );
        }
        Command::Bench(c) => {
            let mut cfg = resolve(&c)?;
            let model = match c.ckpt.as_deref() {
                Some(p) => model_from(p, &mut cfg)?,
                None => CookieModel::new(cfg.encoder.clone(), cfg.seed)?,
            };
            cfg.validate()?;
            prepare_out(&c.out, "bench", &cfg, args)?;
            let largest = *cfg.bench.sizes.last().unwrap();
            let corpus = match &c.data {
                Some(dir) => Corpus::read(dir)?,
                None => generate_corpus(largest, cfg.seed, &cfg.data.generator)?,
            };
            let inputs = BenchInputs {
                images: corpus.images.iter().collect(),
                captions: corpus.manifest.records.iter().map(|r| &r.captions[0]).collect(),
            };
            let summary = bench_both(&model, &inputs, &cfg.bench, cfg.seed)?;
            write(&c.out.join("bench.csv"), &summary.csv())?;
            write_json(&c.out.join("bench_summary.json"), &summary)?;
            print!("{}", summary.csv());
        }
    }
    Ok(())
}
