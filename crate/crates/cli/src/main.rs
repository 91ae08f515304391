use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use interdomain::bench::emit_csv;
use interdomain::suites::{self, SuiteReport};
use interdomain::{validate, ModelConfig};

/// Correctness suites and op-count benchmarks for the interdomain token mixer.
#[derive(Parser, Debug)]
#[command(name = "interdomain", version, arg_required_else_help = true)]
struct Cli {
    /// JSON model config; the built-in tiny config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for JSON reports and CSV output; JSON goes to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan backend agreement, complete-basis equality, prefill/decode consistency.
    Equiv,
    /// Finite-difference and checkpoint-interval gradient checks.
    Gradcheck,
    /// State degrees of freedom and parameter counts.
    Budget,
    /// Decode and prefill op counts for softmax and interdomain paths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        prefix_lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Prefill chunk; the config's prefill_chunk when omitted.
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Complete-basis equality demo.
    Basis,
}

fn load_config(path: Option<&Path>, seed: u64) -> interdomain::Result<ModelConfig> {
    let cfg = match path {
        Some(p) => ModelConfig::from_file(p)?,
        None => ModelConfig::default(),
    };
    let mut cfg = validate(cfg)?.into_inner();
    cfg.seed = seed;
    Ok(cfg)
}

fn emit(report: &SuiteReport, out: Option<&Path>) -> interdomain::Result<()> {
    print!("{}", report.to_table());
    match out {
        Some(dir) => std::fs::write(dir.join(format!("{}.json", report.suite)), report.to_json() + "\n")?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn run(cli: &Cli) -> interdomain::Result<bool> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let report = match &cli.command {
        Command::Equiv => suites::equiv(cli.seed)?,
        Command::Gradcheck => suites::gradcheck(cli.seed)?,
        Command::Budget => suites::budget(&cfg)?,
        Command::Basis => suites::basis(cli.seed)?,
        Command::Bench {
            batch,
            prefix_lens,
            steps,
            chunk,
        } => {
            let chunk = chunk.unwrap_or(cfg.prefill_chunk);
            let (report, rows) = suites::bench(&cfg, batch, prefix_lens, *steps, chunk)?;
            if let Some(dir) = out {
                emit_csv(&rows, dir.join("bench.csv"))?;
            }
            report
        }
    };
    emit(&report, out)?;
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
