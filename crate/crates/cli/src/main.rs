use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tryon_core::checkpoint::{self, Checkpoint};
use tryon_core::codec;
use tryon_core::config::ExperimentConfig;
use tryon_core::dataset::write_dataset;
use tryon_core::diffusion::{sample, RepaintInputs, StepKind};
use tryon_core::dump::dump_attention;
use tryon_core::eval::{eval_correspondence, evaluation_set};
use tryon_core::gradcheck::{grad_check, GradCheckOptions};
use tryon_core::model::ConditionBundle;
use tryon_core::pnm::write_ppm;
use tryon_core::synthetic::generate_indexed;
use tryon_core::train::{finetune_atv, train_base};
use tryon_core::Device;

#[derive(Parser)]
#[command(name = "tryon", version, about = "Train and evaluate the zero cross-attention try-on model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sample set (PPM/PGM images, annotations, index.csv).
    GenData {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Pre-train the base denoiser, then train the conditioning branch.
    Train,
    /// Finetune a trained checkpoint with the attention total-variation term.
    FinetuneAtv {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Inpaint the garment region of one sample and write the result.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Correspondence, entropy, TV and reconstruction metrics on the eval set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Dump attention blobs and renderings for one eval sample.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Finite-difference gradient check on the miniature config.
    GradCheck,
}

fn overrides_text(overrides: &[String]) -> Result<String> {
    let mut text = String::new();
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        text.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    Ok(text)
}

impl Common {
    /// Apply the file, overrides and flags on top of `base`.
    fn config_over(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_text(&overrides_text(&self.overrides)?)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.out_dir = self.out.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        self.config_over(ExperimentConfig::default())
    }

    /// A checkpoint plus the config it was trained with, updated by the flags.
    fn checkpoint(&self, dir: &Path) -> Result<(Checkpoint, ExperimentConfig)> {
        let ck = checkpoint::load(dir, &Device::Cpu).with_context(|| format!("loading {}", dir.display()))?;
        let cfg = self.config_over(ck.config.clone())?;
        if cfg.model != ck.config.model {
            bail!("model settings cannot be overridden for an existing checkpoint");
        }
        Ok((ck, cfg))
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    match &cli.cmd {
        Command::GenData { count } => {
            let cfg = c.config()?;
            let index = write_dataset(&c.out, cfg.seed, *count, &cfg.dataset)?;
            println!("wrote {count} samples, index {}", index.display());
        }
        Command::Train => {
            let cfg = c.config()?;
            let start = Instant::now();
            let (model, sched, reports) = train_base(&cfg, Some(&c.out))?;
            for r in &reports {
                println!(
                    "{}: {} iters, held-out loss {:.5} -> {:.5}, frozen max change {}",
                    r.kind.name(),
                    r.records.len(),
                    r.heldout_initial,
                    r.heldout_final,
                    r.frozen_max_change
                );
            }
            let dir = c.out.join("checkpoint");
            checkpoint::save(&dir, &model, &sched, &cfg, "phase1")?;
            println!("checkpoint {} ({:.1}s)", dir.display(), start.elapsed().as_secs_f64());
        }
        Command::FinetuneAtv { ckpt } => {
            let (ck, cfg) = c.checkpoint(ckpt)?;
            let r = finetune_atv(&ck.model, &ck.schedule, &cfg, Some(&c.out))?;
            println!(
                "phase2: {} iters, held-out loss {:.5} -> {:.5}, frozen max change {}",
                r.records.len(),
                r.heldout_initial,
                r.heldout_final,
                r.frozen_max_change
            );
            let dir = c.out.join("checkpoint");
            checkpoint::save(&dir, &ck.model, &ck.schedule, &cfg, "phase2")?;
            println!("checkpoint {}", dir.display());
        }
        Command::Sample { ckpt, index } => {
            let (ck, cfg) = c.checkpoint(ckpt)?;
            let s = generate_indexed(cfg.eval.seed, *index, &cfg.dataset)?;
            let patch = cfg.model.patch;
            let bundle = ConditionBundle::from_sample(&s, patch)?;
            let known = bundle.known_mask();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let z = sample(
                &ck.model,
                &bundle,
                &ck.schedule,
                cfg.eval.sample_steps,
                StepKind::Ancestral,
                Some(RepaintInputs { z0_known: &bundle.agnostic_lat, known_mask: &known }),
                &mut rng,
            )?;
            let out = c.out.join(format!("sample_{index:05}.ppm"));
            write_ppm(&out, &codec::decode(&z, patch)?)?;
            write_ppm(&c.out.join(format!("sample_{index:05}_person.ppm")), &s.person)?;
            write_ppm(&c.out.join(format!("sample_{index:05}_clothing.ppm")), &s.clothing)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt } => {
            let (ck, cfg) = c.checkpoint(ckpt)?;
            let samples = evaluation_set(&cfg)?;
            let report = eval_correspondence(&ck.model, &ck.schedule, &cfg, &samples, cfg.t_eval())?;
            let out = c.out.join("metrics.csv");
            fs::write(&out, report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::DumpAttn { ckpt, index } => {
            let (ck, cfg) = c.checkpoint(ckpt)?;
            let s = generate_indexed(cfg.eval.seed, *index, &cfg.dataset)?;
            let files = dump_attention(&ck.model, &ck.schedule, &s, cfg.t_eval(), cfg.eval.seed, &c.out)?;
            println!("wrote {} files, manifest {}", files.files.len(), files.manifest.display());
        }
        Command::GradCheck => {
            let cfg = c.config()?;
            let opts = GradCheckOptions { seed: cfg.seed, lambda_atv: cfg.lambda_atv, ..Default::default() };
            let report = grad_check(&opts)?;
            let text = report.to_text();
            fs::write(c.out.join("grad_check.txt"), &text)?;
            print!("{text}");
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
