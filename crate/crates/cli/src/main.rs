//! `layerseg` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use layerseg::datamodel::{synth_generate, Image};
use layerseg::error::{Error, Result};
use layerseg::eval::{evaluate_dir, read_polygons, write_inference, write_report, Averaging, Segmenter};
use layerseg::trainer::{self, Ablation, Config};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "layerseg", version, about = "Self-supervised text segmentation from region polygons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Rqn,
    Sqn,
    Rep,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        /// Dataset manifest (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// `key = value` configuration applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        /// Switch off a component; may be repeated.
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment the text regions of one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON array of polygons, each an array of `[x, y]` points.
        #[arg(long)]
        polygons: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = layerseg::eval::TAU)]
        tau: f64,
        /// Postprocess hook applied to each crop mask.
        #[arg(long, default_value = "identity")]
        hook: String,
    },
    /// Score predicted masks against a manifest's ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Headline metrics as the mean over images instead of pooled pixel counts.
        #[arg(long)]
        per_image: bool,
    },
}

fn build_config(preset: Preset, file: Option<&Path>, ablate: &[AblateArg], overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::preset(match preset {
        Preset::Desk => "desk",
        Preset::Paper => "paper",
    })?;
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    for kv in overrides {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Error::validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for a in ablate {
        cfg.ablate(match a {
            AblateArg::Rqn => Ablation::Rqn,
            AblateArg::Sqn => Ablation::Sqn,
            AblateArg::Rep => Ablation::Rep,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, out } => {
            let manifest = synth_generate(n, seed, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, config, out, preset, ablate, overrides, resume } => {
            let cfg = build_config(preset, config.as_deref(), &ablate, &overrides)?;
            info!("config hash {} ({})", cfg.hash(), cfg.ablation_summary());
            let ckpt = trainer::train::<f32>(cfg, &data, &out, resume.as_deref())?;
            println!("{}", ckpt.display());
        }
        Command::Infer { ckpt, image, polygons, out, tau, hook } => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::validation(format!("--tau must lie in [0, 1], got {tau}")));
            }
            let mut seg = Segmenter::<f32>::load(&ckpt)?;
            seg.tau = tau;
            seg.hooks.get(&hook)?;
            seg.hook = hook;
            let p = &seg.provenance;
            println!("checkpoint {} step {} config {} ({})", p.checkpoint, p.step, p.config_hash, p.ablation);
            let img = Image::<f32>::load(&image)?;
            let polys = read_polygons(&polygons)?;
            let inf = seg.infer(&img, &polys, &image.display().to_string())?;
            let mask = write_inference(&out, &image, &inf, &seg.provenance)?;
            println!("{} ({} regions, {} text pixels)", mask.display(), inf.regions.len(), inf.mask.count());
        }
        Command::Eval { pred, gt, report, per_image } => {
            let r = evaluate_dir(&pred, &gt)?;
            write_report(&r, &report)?;
            let how = if per_image { Averaging::PerItem } else { Averaging::Pooled };
            println!("fgIoU {:.4} F1 {:.4} over {} images", r.summary.iou(how), r.summary.f1(how), r.names.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
