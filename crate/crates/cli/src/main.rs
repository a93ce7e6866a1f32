use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mome_cli::{
    cmd_ablate_topk, cmd_eval, cmd_gen_data, cmd_infer, cmd_report, cmd_train, exit_code, resolve_workers,
    split_overrides, RunConfig,
};
use mome_core::{MomeError, Result};

/// Text-guided mixture of multi-scale experts: data, training and evaluation.
///
/// Any config field can be overridden with `--section.field value`.
#[derive(Parser, Debug)]
#[command(name = "mome", version)]
struct Cli {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to MOME_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthesize the phantom corpus.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated corpus.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.mckpt` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a checkpoint for every top-K width.
    AblateTopk {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one volume file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gather run artifacts into one markdown report.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration and its hash.
    ShowConfig,
}

fn fail(kind: &str, code: i32, msg: &str) -> ExitCode {
    eprintln!("error[{kind}]: {}", msg.replace('\n', " "));
    ExitCode::from(code as u8)
}

fn kind(code: i32) -> &'static str {
    match code {
        1 => "usage",
        2 => "config",
        3 => "io",
        4 => "numeric",
        _ => "internal",
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let env = std::env::var("MOME_WORKERS").ok();
    if let Some(n) = resolve_workers(cli.workers, env.as_deref())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MomeError::InvalidArgument(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(overrides)?;
    match cli.cmd {
        Cmd::GenData { seed, out } => {
            cfg.data.seed = seed;
            let s = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} train and {} eval volumes to {} (config {})", s.train, s.eval, out.display(), cfg.hash());
        }
        Cmd::Train { seed, corpus, out, resume } => {
            cfg.train.seed = seed;
            let s = cmd_train(&cfg, &corpus, &out, resume)?;
            println!(
                "trained {} epochs, {} steps, final loss {} (config {})",
                s.epochs,
                s.steps,
                s.final_loss.map_or_else(|| "n/a".into(), |l| format!("{l:.4}")),
                cfg.hash()
            );
        }
        Cmd::Eval { checkpoint, corpus, out } => {
            let r = cmd_eval(&cfg, &checkpoint, &corpus, &out)?;
            println!(
                "mean Dice {:.4} organ {:.4} tumor {:.4}",
                r.mean_dice, r.organ_dice, r.tumor_dice
            );
        }
        Cmd::AblateTopk { checkpoint, out } => {
            for r in cmd_ablate_topk(&cfg, &checkpoint, &out)? {
                println!("K={} mean Dice {:.4}", r.k, r.mean_dice);
            }
        }
        Cmd::Infer { checkpoint, volume, out } => {
            println!("{}", cmd_infer(&cfg, &checkpoint, &volume, &out)?.display());
        }
        Cmd::Report { runs, out } => {
            println!("{}", cmd_report(&runs, &out)?.display());
        }
        Cmd::ShowConfig => {
            cfg.validate()?;
            print!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => return fail("usage", 1, &e.to_string()),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let reason: Vec<&str> = msg.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            return fail("usage", 1, reason.join(" ").trim_start_matches("error: "));
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            fail(kind(code), code, &e.to_string())
        }
    }
}
