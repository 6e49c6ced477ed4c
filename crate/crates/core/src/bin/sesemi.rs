use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sesemi::config::DatasetKind;
use sesemi::datasets::Mode;
use sesemi::gradcheck::{resolve_spec, run_gradcheck, GradcheckOptions};
use sesemi::runner::{demo_config, run_eval, run_train, run_train_file, RunOutput};
use sesemi::Error;

#[derive(Parser)]
#[command(name = "sesemi", version, about = "Supervised + self-supervised training with geometric proxy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config file.
    Train { config: PathBuf },
    /// Print the error rate of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// cifar10, two_moons, three_spirals or points
        dataset: String,
        /// CIFAR batch directory or x,y,label CSV
        path: PathBuf,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        /// mlp, convnet-tiny or an architecture file
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a synthetic 2-D dataset and export a decision grid.
    Demo {
        /// two_moons or three_spirals
        dataset: DatasetKind,
        #[arg(long, default_value_t = Mode::Ssl)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn summarize(out: &RunOutput) {
    println!(
        "{} steps in {:.1}s, final test error {:.4}, artifacts in {}",
        out.metrics.steps.len(),
        out.wall_seconds,
        out.final_test_error(),
        out.output_dir.display()
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config } => summarize(&run_train_file(&config)?),
        Command::Eval {
            checkpoint,
            dataset,
            path,
        } => println!("{:.4}", run_eval(&checkpoint, &dataset, &path)?),
        Command::Gradcheck { spec, seed } => {
            let opts = GradcheckOptions {
                seed,
                ..Default::default()
            };
            let report = run_gradcheck(&resolve_spec(&spec)?, &opts)?;
            print!("{}", report.to_text());
            report.into_result()?;
        }
        Command::Demo {
            dataset,
            mode,
            seed,
            out,
        } => summarize(&run_train(&demo_config(dataset, mode, seed, out)?)?),
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SESEMI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SESEMI_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
