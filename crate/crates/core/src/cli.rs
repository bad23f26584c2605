//! Command-line front end. Exit codes: 0 success, 1 validation or usage
//! error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::Recipe;
use crate::encoder::{encode, Checkpoint, EncoderParams};
use crate::error::{LabError, Result};
use crate::harness::{
    case_study, collate, linear_probe, metrics_jsonl, run_one, train, Branch, Design, Executor,
    ProbeOptions, Side, StudyOptions, TrainConfig,
};
use crate::numerics::{RngStream, Tensor};
use crate::theory::{sigma_prime_sweep, sweep_csv, uniform_alpha, McOptions, NoiseModel};
use crate::variance::{
    cross_image_variance, image_row, intra_image_variance, FrozenEncoder, VarianceOptions,
};

#[derive(Parser, Debug)]
#[command(name = "asym-lab", version, about = "Source/target variance asymmetry lab")]
pub struct Cli {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a source/target pair; writes checkpoint.bin and metrics.jsonl.
    Train {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Linear probe on frozen backbone features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Intra-image variance reference of a checkpoint under a recipe.
    VarianceRef {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Recipe preset (baseline, weaker, stronger, multicrop, scalemix, noise, identity).
        #[arg(long, default_value = "baseline")]
        recipe: String,
        #[arg(long, default_value_t = 32)]
        r: usize,
        #[arg(long, default_value_t = 256)]
        images: usize,
        /// Average this many views per encoding.
        #[arg(long, default_value_t = 1)]
        mean_enc: usize,
        /// Projector BN groups per batch (defaults to the config's bn_groups).
        #[arg(long)]
        bn_groups: Option<usize>,
        /// Where the per-image CSV and the CDF CSV go.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Cross-image variance of a checkpoint's encodings of evaluation images.
    CrossVar {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Monte-Carlo check of the tr R variance prediction over Σ′ scales.
    TheoryCheck {
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        sigma_target_scale: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train and probe one model per (placement, seed) for a design.
    CaseStudy {
        #[arg(long)]
        design: String,
        #[arg(long, value_delimiter = ',', default_value = "neither,source,target,both")]
        sides: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Collate CSV/JSON outputs in a directory into a markdown summary.
    Report {
        #[arg(long, default_value = ".")]
        inputs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    StudyRun {
        #[arg(long)]
        cell: String,
        #[command(flatten)]
        probe: ProbeArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 30)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub probe_lr: f64,
}

impl ProbeArgs {
    fn options(&self, seed: u64) -> ProbeOptions {
        ProbeOptions {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed,
            ..ProbeOptions::default()
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// A checkpoint that fails to decode is a runtime failure, not a usage error.
fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        LabError::Parse { offset, msg } => {
            LabError::Integrity(format!("{}: byte {offset}: {msg}", path.display()))
        }
        other => other,
    })
}

fn threads() -> usize {
    std::env::var("ASYM_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs one parsed command, writing its primary output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Cmd::Train { out_dir, epochs } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let split = cfg.data.build()?;
            let run = train(&cfg, &split.train)?;
            fs::create_dir_all(out_dir)?;
            run.checkpoint.save(&out_dir.join("checkpoint.bin"))?;
            write(&out_dir.join("metrics.jsonl"), &metrics_jsonl(&run.metrics))?;
            let summary = serde_json::json!({
                "steps": run.metrics.len(),
                "final_loss": run.metrics.last().map(|m| m.loss),
                "final_cross_var": run.metrics.last().map(|m| m.cross_var),
                "checkpoint_sha256": run.checkpoint.hash(),
            });
            writeln!(out, "{summary}")?;
            if let Some(e) = run.divergence {
                return Err(e);
            }
        }
        Cmd::Probe { checkpoint, probe } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let split = cfg.data.build()?;
            let r = linear_probe(&ckpt, &split, &probe.options(cfg.seed))?;
            writeln!(out, "{}", serde_json::to_string(&r).expect("plain data"))?;
        }
        Cmd::VarianceRef {
            checkpoint,
            recipe,
            r,
            images,
            mean_enc,
            bn_groups,
            out_dir,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let split = cfg.data.build()?;
            let imgs: Vec<_> = split.eval.images.iter().take(*images).cloned().collect();
            let mut enc = FrozenEncoder::new(&ckpt.source, format!("checkpoint:{}", &ckpt.hash()[..12]))?;
            enc.bn_groups = bn_groups.unwrap_or(cfg.designs.bn_groups);
            let opts = VarianceOptions {
                r: *r,
                batch_size: cfg.batch_size,
                mean_enc_n: Some(*mean_enc),
            };
            let recipe = Recipe::preset(recipe)?;
            let rng = RngStream::new(cfg.seed).substream("variance");
            let rep = intra_image_variance(&enc, &imgs, &recipe, &rng, &opts)?;
            write(&out_dir.join("variance.csv"), &rep.to_csv())?;
            write(&out_dir.join("variance_cdf.csv"), &rep.cdf_csv())?;
            write(&out_dir.join("variance.json"), &rep.summary_json())?;
            writeln!(out, "{}", rep.summary_json())?;
        }
        Cmd::CrossVar { checkpoint } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let split = cfg.data.build()?;
            let v = eval_cross_var(&ckpt.source, &split.eval.images, &cfg)?;
            let d = ckpt.source.dims.out as f64;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "cross_var": v, "d": d, "cross_var_times_d": v * d })
            )?;
        }
        Cmd::TheoryCheck {
            trials,
            sigma_target_scale,
            workers,
        } => {
            let opts = McOptions {
                trials: *trials,
                workers: *workers,
            };
            opts.validate()?;
            let rows = sigma_prime_sweep(
                &NoiseModel::scalar_fixture(),
                &uniform_alpha(1, 4),
                sigma_target_scale,
                &opts,
                &RngStream::new(cfg.seed).substream("theory-check"),
            )?;
            write!(out, "{}", sweep_csv(&rows))?;
        }
        Cmd::CaseStudy {
            design,
            sides,
            seeds,
            out_dir,
            probe,
        } => {
            let design: Design = design.parse()?;
            let sides = sides.iter().map(|s| s.parse()).collect::<Result<Vec<Side>>>()?;
            let split = cfg.data.build()?;
            let procs = threads();
            let executor = if procs > 1 {
                Executor::Subprocess {
                    exe: std::env::current_exe()?,
                    max_procs: procs,
                    scratch: out_dir.join("runs"),
                }
            } else {
                Executor::InProcess
            };
            let opts = StudyOptions {
                probe: probe.options(cfg.seed),
                executor,
                ..StudyOptions::default()
            };
            let report = case_study(design, &sides, &cfg, *seeds, &split, &opts)?;
            write(&out_dir.join(format!("study_{design}.json")), &report.to_json())?;
            write(&out_dir.join(format!("study_{design}.csv")), &report.matrix_csv())?;
            write!(out, "{}", report.to_markdown())?;
        }
        Cmd::Report { inputs, out: dest } => {
            let mut entries = Vec::new();
            for e in fs::read_dir(inputs)? {
                let path = e?.path();
                if path.is_file() {
                    let name = path.file_name().expect("file").to_string_lossy().into_owned();
                    if let Ok(text) = fs::read_to_string(&path) {
                        entries.push((name, text));
                    }
                }
            }
            let md = collate(&entries);
            match dest {
                Some(p) => write(p, &md)?,
                None => write!(out, "{md}")?,
            }
        }
        Cmd::StudyRun { cell, probe } => {
            let split = cfg.data.build()?;
            let rec = run_one(&cfg, &split, cell, &probe.options(cfg.seed))?;
            writeln!(out, "{}", serde_json::to_string(&rec).expect("plain data"))?;
        }
    }
    Ok(())
}

/// Cross-image variance over evaluation images in training-sized batches.
pub fn eval_cross_var(params: &EncoderParams, images: &[crate::augment::Image], cfg: &TrainConfig) -> Result<f64> {
    let b = cfg.batch_size;
    if images.len() < b {
        return Err(LabError::Config(format!("need at least {b} images, got {}", images.len())));
    }
    let groups = cfg.bn_groups(Branch::Source);
    let mut acc = 0.0;
    let chunks: Vec<_> = images.chunks_exact(b).collect();
    for chunk in &chunks {
        let data: Vec<f64> = chunk
            .iter()
            .flat_map(|i| image_row(i, cfg.data.image_size, crate::augment::Resample::Bilinear))
            .collect();
        let x = Tensor::new(vec![b, cfg.dims.input], data)?;
        let (z, _) = encode(params, &x, groups, None)?;
        acc += cross_image_variance(&z)?;
    }
    Ok(acc / chunks.len() as f64)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
