use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hypervision::checkpoint;
use hypervision::config::RunConfig;
use hypervision::conformance;
use hypervision::data::{self, netpbm, PhantomSpec, Split};
use hypervision::trainer;
use hypervision::{Error, Result};

const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "hypervision", version, about = "Kidney and tumor segmentation with Hyper Vision Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dice of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Resize to this side length (default: native).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Segment one PGM image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compare analytic and numeric gradients.
    Gradcheck {
        /// Restrict to one op.
        #[arg(long)]
        op: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { out, count, size, seed } => {
            let spec = PhantomSpec { size, seed, ..Default::default() };
            data::write_dataset(&out, &spec, count)?;
            println!("wrote {count} phantoms ({size}x{size}) to {}", out.display());
        }
        Command::Train { config } => train(&config)?,
        Command::Eval { checkpoint, data: dir, split, size } => {
            let (model, _) = checkpoint::load(&checkpoint)?;
            let size = match size {
                Some(s) => s,
                None => trainer::native_size(&dir)?,
            };
            let ds = data::load_dataset(&dir, size)?;
            let samples = ds.split(split);
            let eval = trainer::evaluate(&model, samples, 4, hypervision::losses::DEFAULT_DICE_EPS)?;
            let label = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            print!("{}", trainer::format_table(&[(label, split, samples.len(), eval.dice)]));
            println!("loss {:.6}", eval.loss);
        }
        Command::Predict { checkpoint, image, out, size } => {
            let (model, _) = checkpoint::load(&checkpoint)?;
            let raw = netpbm::read_pgm(&image)?;
            let size = size.unwrap_or(raw.width.max(raw.height));
            let (mask, rgb) = trainer::predict(&model, &raw, size)?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let mask_path = out.join(format!("{stem}_mask.pgm"));
            let overlay_path = out.join(format!("{stem}_overlay.ppm"));
            netpbm::write_pgm(&mask_path, &data::GrayImage::new(mask.width, mask.height, mask.labels.clone())?)?;
            netpbm::write_ppm(&overlay_path, &rgb)?;
            println!(
                "kidney {} px, tumor {} px -> {}, {}",
                mask.count(1),
                mask.count(2),
                mask_path.display(),
                overlay_path.display()
            );
        }
        Command::Gradcheck { op } => {
            if let Some(op) = &op {
                if !conformance::OPS.contains(&op.as_str()) {
                    eprintln!("unknown op {op:?}; expected one of: {}", conformance::OPS.join(", "));
                    return Ok(ExitCode::from(EXIT_USAGE));
                }
            }
            let rows = conformance::run(op.as_deref())?;
            print!("{}", conformance::format_rows(&rows));
            if rows.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let ds = data::load_dataset(&cfg.data_dir, cfg.image_size)?;
    println!(
        "training on {} / {} samples, {}x{}, base {}, out {}",
        ds.train.len(),
        ds.val.len(),
        cfg.image_size,
        cfg.image_size,
        cfg.model.base_channels,
        cfg.out_dir.display()
    );
    let print = |tag: &str, m: &trainer::EpochMetrics| {
        println!(
            "{tag}epoch {:>4}  train {:.5}  val {:.5}  dice kidney {:.4} tumor {:.4}  lr {:.1e}",
            m.epoch, m.train_loss, m.val_loss, m.dice_kidney, m.dice_tumor, m.lr
        );
        ControlFlow::Continue(())
    };
    if cfg.eval_both_configs {
        let outcome = trainer::ablation(&cfg, &ds, &mut |attn, m| print(if attn { "[attn] " } else { "[base] " }, m))?;
        print!("{}", outcome.report);
    } else {
        let outcome = trainer::train(&cfg, &ds, &mut |m| print("", m))?;
        if let Some(best) = outcome.best_epoch {
            println!("best epoch {best} -> {}", outcome.best_path().display());
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}
