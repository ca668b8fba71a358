use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atd_sr::cli::{self, RunConfig};
use atd_sr::{AtdError, Result};

#[derive(Parser)]
#[command(name = "atd", version, about = "Adaptive token dictionary super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of HR PNGs (or a synthetic set).
    Train(Common),
    /// Upscale one PNG.
    Infer(Common),
    /// PSNR/SSIM against HR PNGs and the bicubic baseline.
    Eval(Common),
    /// Print the parameter count of a preset.
    Params(Common),
    /// Write one binary mask per dictionary token for a layer's categories.
    VizCategories(Common),
    /// Write procedural training images.
    Synth(Common),
}

#[derive(Args, Default)]
struct Common {
    /// key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory of HR training PNGs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of HR evaluation PNGs.
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    layer: Option<usize>,
    /// Number of synthetic images to generate or train on.
    #[arg(long)]
    synth_count: Option<usize>,
    /// Extra key=value settings, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| AtdError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            rc.set(k.trim(), v.trim())?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        rc.override_with("preset", self.preset.clone())?;
        rc.override_with("scale", self.scale)?;
        rc.override_with("seed", self.seed)?;
        rc.override_with("iters", self.iters)?;
        rc.override_with("out", path(&self.out))?;
        rc.override_with("checkpoint", path(&self.checkpoint))?;
        rc.override_with("input", path(&self.input))?;
        rc.override_with("data", path(&self.data))?;
        rc.override_with("hr_dir", path(&self.hr_dir))?;
        rc.override_with("block", self.block)?;
        rc.override_with("layer", self.layer)?;
        rc.override_with("synth_count", self.synth_count)?;
        Ok(rc)
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => {
            let r = cli::cmd_train(&c.resolve()?)?;
            if let (Some(first), Some(last)) = (r.curve.first(), r.curve.last()) {
                println!("loss {:.5} -> {:.5} over {} iterations", first.loss, last.loss, r.curve.len());
            }
            println!("checkpoint: {}", r.final_checkpoint.display());
            println!("loss curve: {}", r.loss_csv.display());
        }
        Command::Infer(c) => {
            let sr = cli::cmd_infer(&c.resolve()?)?;
            println!("wrote {}×{} image", sr.shape()[2], sr.shape()[1]);
        }
        Command::Eval(c) => {
            let rc = c.resolve()?;
            let rows = cli::cmd_eval(&rc)?;
            if rc.raw("out").is_none() {
                println!("{}", atd_sr::metrics::EvalRecord::CSV_HEADER);
                for r in &rows {
                    println!("{}", r.csv_row());
                }
            }
            if !rows.is_empty() {
                let n = rows.len() as f64;
                let sr: f64 = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
                let base: f64 = rows.iter().map(|r| r.baseline_psnr).sum::<f64>() / n;
                eprintln!("mean PSNR {sr:.3} dB (bicubic {base:.3} dB, {:+.3} dB)", sr - base);
            }
        }
        Command::Params(c) => println!("{}", cli::cmd_params(&c.resolve()?)?),
        Command::VizCategories(c) => {
            let masks = cli::cmd_viz_categories(&c.resolve()?)?;
            let used = masks.iter().filter(|m| m.iter().any(|&b| b)).count();
            println!("wrote {} masks ({used} non-empty)", masks.len());
        }
        Command::Synth(c) => {
            let files = cli::cmd_synth(&c.resolve()?)?;
            println!("wrote {} images", files.len());
        }
    }
    Ok(())
}

fn exit_code(e: &AtdError) -> u8 {
    match e {
        AtdError::Config(_) => 2,
        AtdError::Data(_) => 3,
        AtdError::Io(_) | AtdError::Image(_) | AtdError::Format(_) => 4,
        AtdError::NonFinite(_) => 5,
        AtdError::Dimension { .. } | AtdError::Contract(_) => 6,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
