use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shadowdef::config::ExperimentConfig;
use shadowdef::experiment::{attack_file, pretrain_to, run_experiment};
use shadowdef::report::{compare, report_dir};
use shadowdef::exit_code;
use shadowdef_core::{Error, Result};

#[derive(Parser)]
#[command(name = "shadowdef", version, about = "Gradient-inversion attack and defense benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the defender's shadow generator on the public split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Execute an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sets every seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack a persisted update snapshot with the config's attacks.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Snapshot written under a run's `updates/` directory.
        #[arg(long)]
        update: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate tables and plots of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Aggregate several runs into one table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let c = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => c.with_seed(s),
        None => c,
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, out, seed } => {
            pretrain_to(&load(&config, seed)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Run { config, out, seed } => {
            let mut c = load(&config, seed)?;
            if let Some(o) = out {
                c.output = o;
            }
            let art = run_experiment(&c)?;
            println!(
                "{}: final macro-F1 {:.4}, {} attack results in {}",
                art.manifest.method,
                art.final_f1().unwrap_or(f64::NAN),
                art.attacks.len(),
                art.dir.display()
            );
        }
        Command::Attack { config, update, out, seed } => {
            let recs = attack_file(&load(&config, seed)?, &update, &out)?;
            println!("{} attack results in {}", recs.len(), out.display());
        }
        Command::Report { run } => {
            if !run.join("manifest.json").exists() {
                return Err(Error::Config(format!("{} is not a run directory", run.display())));
            }
            let files = report_dir(&run)?;
            println!("wrote {} files", files.len());
        }
        Command::Compare { runs, out } => {
            let dirs: Vec<&std::path::Path> = runs.iter().map(|p| p.as_path()).collect();
            let rows = compare(&dirs, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
