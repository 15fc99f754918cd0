use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use symnet::checkpoint::{self, Checkpoint};
use symnet::config::Precision;
use symnet::data::{write_pgm, Dataset, Episode, SplitConfig};
use symnet::eval::{evaluate, EvalOptions, EvalReport};
use symnet::train::{model_from_checkpoint, train_to_dir, Trainer};
use symnet::{Config, Real};

#[derive(Parser)]
#[command(name = "symnet", version, about = "Few-shot segmentation on synthetic episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset as PPM images, PGM masks and a manifest.
    GenData {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 12)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the configured fold's training classes.
    Train {
        /// JSON config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; defaults to the config's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Episodic mIoU on the held-out fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the fold the checkpoint was trained for.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write predicted masks and prior masks as PGM under this directory.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Write the prior mask of one episode directory, and each window's map, as PGM.
    PriorMask {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with support0.ppm, support0.pgm, ..., query.ppm and episode.json.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate with one component switched off.
    Ablate {
        #[arg(long, value_enum)]
        disable: Component,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; defaults to the config's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Spm,
    Apa,
    Tdc,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Config::from_json(&text)?)
        }
    }
}

fn data_dir(cfg: &Config, flag: Option<PathBuf>) -> Result<PathBuf> {
    match (flag, &cfg.data_dir) {
        (Some(p), _) => Ok(p),
        (None, Some(d)) => Ok(PathBuf::from(d)),
        (None, None) => bail!("no dataset given: pass --data or set data_dir in the config"),
    }
}

fn check_data(cfg: &Config, data: &Dataset) -> Result<()> {
    if data.resolution != cfg.image_size || data.n_classes() != cfg.n_classes {
        bail!(
            "dataset has {} classes at {}px, config expects {} at {}px",
            data.n_classes(),
            data.resolution,
            cfg.n_classes,
            cfg.image_size
        );
    }
    Ok(())
}

fn train<T: Real>(cfg: &Config, data: &Dataset, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::from_checkpoint(&Checkpoint::load(p)?)?,
        None => Trainer::<T>::new(cfg)?,
    };
    let paths = train_to_dir(&mut trainer, data, out)?;
    println!("metrics: {}", paths.metrics.display());
    println!("checkpoint: {}", paths.final_checkpoint.display());
    Ok(())
}

fn eval<T: Real>(path: &Path, data: &Dataset, fold: Option<usize>, opts: &EvalOptions) -> Result<EvalReport> {
    let model = model_from_checkpoint(&Checkpoint::<T>::load(path)?)?;
    let cfg = &model.cfg;
    check_data(cfg, data)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, fold.unwrap_or(cfg.fold), cfg.seed)?;
    Ok(evaluate(&model, data, &split, opts)?)
}

fn prior_mask<T: Real>(path: &Path, episode: &Path, out: &Path) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::<T>::load(path)?)?;
    let ep: Episode<T> = Episode::load(episode)?.cast();
    let pred = model.predict(&ep)?;
    write_pgm(out, &pred.prior.map)?;
    let (h, w) = pred.prior.size();
    println!("wrote {h}x{w} prior mask to {}", out.display());
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prior");
    for (map, [dh, dw]) in pred.prior.per_window.iter().zip(&model.cfg.windows) {
        let path = out.with_file_name(format!("{stem}_win{dh}x{dw}.pgm"));
        write_pgm(&path, map)?;
        println!("wrote window {dh}x{dw} map to {}", path.display());
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    for r in &report.rounds {
        println!("seed {:>4}  mIoU {:.4}", r.seed, r.miou);
    }
    println!("mean mIoU {:.4} (skipped {})", report.mean_miou, report.skipped);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            classes,
            per_class,
            resolution,
            seed,
            out,
        } => {
            let stride = Config::default().downsample;
            let data = Dataset::synthetic(classes, per_class, resolution, stride, seed)?;
            data.save(&out, seed)?;
            println!("wrote {classes} classes x {per_class} images to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = match &resume {
                Some(p) => checkpoint::read_config(p)?,
                None => load_config(config.as_deref())?,
            };
            let data = Dataset::load(&data_dir(&cfg, data)?)?;
            check_data(&cfg, &data)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &data, &out, resume.as_deref())?,
                Precision::F64 => train::<f64>(&cfg, &data, &out, resume.as_deref())?,
            }
        }
        Command::Eval {
            checkpoint,
            data,
            fold,
            k,
            rounds,
            episodes,
            seed,
            dump_masks,
        } => {
            let data = Dataset::load(&data)?;
            let opts = EvalOptions {
                k,
                rounds,
                episodes,
                seed,
                dump_dir: dump_masks,
            };
            let report = match checkpoint::read_config(&checkpoint)?.precision {
                Precision::F32 => eval::<f32>(&checkpoint, &data, fold, &opts)?,
                Precision::F64 => eval::<f64>(&checkpoint, &data, fold, &opts)?,
            };
            print_report(&report);
        }
        Command::PriorMask {
            checkpoint,
            episode,
            out,
        } => match checkpoint::read_config(&checkpoint)?.precision {
            Precision::F32 => prior_mask::<f32>(&checkpoint, &episode, &out)?,
            Precision::F64 => prior_mask::<f64>(&checkpoint, &episode, &out)?,
        },
        Command::Ablate {
            disable,
            config,
            data,
            out,
            rounds,
            episodes,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            match disable {
                Component::Spm => cfg.disable_spm = true,
                Component::Apa => cfg.disable_apa = true,
                Component::Tdc => cfg.disable_tdc = true,
            }
            let data = Dataset::load(&data_dir(&cfg, data)?)?;
            check_data(&cfg, &data)?;
            let opts = EvalOptions {
                k: cfg.k,
                rounds,
                episodes,
                seed,
                dump_dir: None,
            };
            let ck = out.join("final.symn");
            let report = match cfg.precision {
                Precision::F32 => {
                    train::<f32>(&cfg, &data, &out, None)?;
                    eval::<f32>(&ck, &data, None, &opts)?
                }
                Precision::F64 => {
                    train::<f64>(&cfg, &data, &out, None)?;
                    eval::<f64>(&ck, &data, None, &opts)?
                }
            };
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            print_report(&report);
        }
    }
    Ok(())
}
