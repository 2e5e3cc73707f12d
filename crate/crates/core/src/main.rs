use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saldiff::app;
use saldiff::config::{RunConfig, Split};
use saldiff::{Error, Result};

/// Saliency-map diffusion on synthetic text/audio/visual scenes.
#[derive(Parser, Debug)]
#[command(name = "saldiff", version)]
struct Cli {
    /// Run configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `[paths] output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train/val/test splits.
    Generate,
    /// Train and keep the best-validation checkpoint.
    Train,
    /// Write predicted maps as PGM plus f32 sidecars.
    Sample {
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions against a split.
    Eval {
        #[arg(long)]
        split: Option<Split>,
        /// Prediction directory; defaults to `<predictions>/<split>`.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Reproduce an ablation: steps, conditioning or fusion.
    Ablate { study: String },
}

fn configure(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SALDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("SALDIFF_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = configure(&cli)?;
    match cli.command {
        Command::Generate => {
            for (split, n) in app::generate(&cfg)? {
                println!("{}: {n}", split.as_str());
            }
            println!("dataset: {}", cfg.paths.dataset_dir().display());
        }
        Command::Train => {
            let out = app::train(&cfg)?;
            println!(
                "best epoch {} of {}, val loss {:.6}",
                out.report.best_epoch,
                out.report.epochs.len(),
                out.report.best_val_loss
            );
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Sample {
            split,
            steps,
            checkpoint,
        } => {
            if let Some(s) = split {
                cfg.sample_split = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = c;
            }
            let out = app::sample(&cfg)?;
            println!("wrote {} maps to {}", out.count, out.dir.display());
        }
        Command::Eval { split, pred } => {
            let split = split.unwrap_or(cfg.sample_split);
            let out = app::eval(&cfg, pred.as_deref(), split)?;
            let m = out.mean;
            println!(
                "mean over {}: SIM {} CC {} NSS {} AUC-J {}",
                out.rows.len(),
                fmt_opt(m.sim),
                fmt_opt(m.cc),
                fmt_opt(m.nss),
                fmt_opt(m.auc_j)
            );
            if !out.degenerate.is_empty() {
                println!("degenerate: {}", out.degenerate.join(", "));
            }
            println!("metrics: {}", out.csv.display());
        }
        Command::Ablate { study } => {
            let table = app::ablate(&cfg, study.parse()?)?;
            print!("{}", table.markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
