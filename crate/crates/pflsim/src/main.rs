use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflsim::commands::{self, CHECKPOINT_DIR};
use pflsim::config::{load, Overrides};
use pflsim::executor::Threaded;
use pflsim::history;

#[derive(Parser)]
#[command(name = "pflsim", version, about = "Prompt-based personalized federated learning simulator")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the run and the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<String>,
    /// none | as1 | as2 | as3 | as4, or no_prompt | no_communication | no_image_prompt | no_text_prompt.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Worker threads for client-parallel phases.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic client datasets as JSONL plus a manifest.
    GenData,
    /// Run federated training and write history, manifest and checkpoints.
    Train,
    /// Per-client test accuracy of a checkpoint.
    Eval {
        /// Checkpoint directory; defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Copy checkpointed prompts and the parameter accounting to a directory.
    ExportPrompts { checkpoint: PathBuf, out_dir: PathBuf },
    /// Mean and std of final test accuracy across history files, per mode.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PFLSIM_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> pflsim::Result<()> {
    if cli.threads == 0 {
        return Err(pflsim::Error::Usage("--threads must be >= 1".into()));
    }
    let overrides = Overrides { seed: cli.seed, out: cli.out, ablation: cli.ablation };
    let config = load(cli.config.as_deref(), &overrides)?;
    let out = PathBuf::from(&config.output_dir);
    match cli.command {
        Command::GenData => {
            commands::gen_data(&config, &out)?;
        }
        Command::Train => {
            commands::train(&config, &Threaded::new(cli.threads), &out)?;
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_DIR));
            let rows = commands::eval(&config, &ckpt, &out)?;
            println!("client test_acc");
            for r in rows {
                println!("{:>6} {:.4}", r.client, r.test_acc);
            }
        }
        Command::ExportPrompts { checkpoint, out_dir } => {
            let files = commands::export_prompts(&checkpoint, &out_dir)?;
            log::info!("exported {} prompt files to {}", files.len(), out_dir.display());
        }
        Command::Report { histories } => {
            let rows = history::report(&histories)?;
            std::fs::create_dir_all(&out).map_err(|source| pflsim::Error::Io { path: out.clone(), source })?;
            history::write_report(&out.join("report.csv"), &rows)?;
            print!("{}", history::format_report(&rows));
        }
    }
    Ok(())
}
