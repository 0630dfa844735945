use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mgnet::config::TrainConfig;
use mgnet::data::{load_dataset, synth_generate, DatasetLayout, Split};
use mgnet::model::load_checkpoint;
use mgnet::train::{evaluate, infer, train};

#[derive(Parser)]
#[command(name = "mgnet", version, about = "Glass-like object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; checkpoints go to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root containing `<split>/images` and `<split>/masks`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Score a checkpoint on a labelled split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write per-image metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict masks for every image matching a glob pattern.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate refinement map.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Generate a synthetic dataset split.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, data, out, split } => run_train(&config, &data, &out, split),
        Command::Eval { ckpt, data, report, split, csv } => run_eval(&ckpt, &data, &report, split, csv.as_deref()),
        Command::Infer { ckpt, images, out, dump_trace } => run_infer(&ckpt, &images, &out, dump_trace),
        Command::Synth { n, size, seed, out, split } => {
            let layout = synth_generate(n, size, seed, &out, split)?;
            println!("wrote {n} samples to {}", layout.images().parent().unwrap_or(&out).display());
            Ok(())
        }
    }
}

fn run_train(config: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let samples = load_dataset(&DatasetLayout::new(data, split), cfg.input_size)?;
    if samples.is_empty() {
        bail!("no training samples under {}", data.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("training {} on {} samples, seed {}", cfg.label(), samples.len(), cfg.seed);
    let outcome = train::<f32>(&cfg, &samples, Some(out))?;
    if let Some(last) = outcome.history.last() {
        println!("finished at step {} with loss {:.4}", last.step, last.loss);
    }
    for ckpt in &outcome.checkpoints {
        println!("{}", ckpt.display());
    }
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, report_path: &Path, split: Split, csv: Option<&Path>) -> Result<()> {
    let loaded = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = load_dataset(&DatasetLayout::new(data, split), loaded.cfg.input_size)?;
    let report = evaluate(&loaded.net, &loaded.store, &samples, loaded.cfg.batch_size)?;
    report.write_json(report_path)?;
    if let Some(csv) = csv {
        report.write_csv(csv)?;
    }
    println!("images {}  mIoU {:.2}  MAE {:.4}  mBER {:.2}", report.n_images, report.miou, report.mae, report.mber);
    Ok(())
}

fn run_infer(ckpt: &Path, pattern: &str, out: &Path, dump_trace: bool) -> Result<()> {
    let loaded = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut images = glob::glob(pattern)
        .with_context(|| format!("bad pattern `{pattern}`"))?
        .collect::<Result<Vec<_>, _>>()?;
    images.sort();
    if images.is_empty() {
        bail!("no images match `{pattern}`");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let written = infer(&loaded.net, &loaded.store, loaded.cfg.input_size, &images, out, dump_trace)?;
    println!("wrote {} files for {} images to {}", written.len(), images.len(), out.display());
    Ok(())
}
