use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2d_bench::{
    parse_list, run_agreement_study, run_speedup_experiment, run_sweep, write_agreement_csv, write_sweep_csv,
    BenchError, Result, Setup,
};
use sparse_to_dense::{default_k, CostModelInput, ModelConfig, VisualStructure, WorkloadSpec, DEFAULT_GAMMA};

#[derive(Parser)]
#[command(
    name = "s2d-bench",
    version,
    about = "Sparse-to-dense speculative decoding experiments on a toy model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-token agreement of the sparse draft with the dense model, by K.
    Agreement {
        #[command(flatten)]
        setup: SetupArgs,
        #[arg(long, value_parser = parse_list_arg, default_value = "0,128,256,512")]
        k_list: List,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// One lossless speculative decoding run.
    Run {
        #[command(flatten)]
        setup: SetupArgs,
        /// Retained visual rows per head [default: 1024 - m_t, or m_v / 2]
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: usize,
        /// Write the per-round trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Include wall time in the report (makes output run-dependent).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Cross product of gamma and K.
    Sweep {
        #[command(flatten)]
        setup: SetupArgs,
        #[arg(long, value_parser = parse_list_arg, default_value = "1-13")]
        gamma_list: List,
        /// [default: the `run` default K]
        #[arg(long, value_parser = parse_list_arg)]
        k_list: Option<List>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate the I/O cost model.
    Cost {
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: usize,
        #[arg(long, default_value_t = 924)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        mv: usize,
        #[arg(long, default_value_t = 100)]
        mt: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

/// Comma-separated values and `a-b` ranges.
#[derive(Clone)]
struct List(Vec<usize>);

fn parse_list_arg(s: &str) -> std::result::Result<List, String> {
    parse_list(s).map(List)
}

#[derive(Args)]
struct SetupArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    q_heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 1024)]
    max_seq_len: usize,
    /// Model weight seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    mv: usize,
    #[arg(long, default_value_t = 32)]
    mt: usize,
    #[arg(long, default_value_t = 0)]
    workload_seed: u64,
    #[arg(long, value_enum, default_value_t = Workload::Block)]
    workload: Workload,
    /// Tokens to generate (also the agreement horizon).
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    Uniform,
    Block,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl SetupArgs {
    fn build(&self) -> Result<Setup> {
        let config = ModelConfig::new(
            self.layers,
            self.d_model,
            self.q_heads,
            self.kv_heads,
            self.vocab,
            self.max_seq_len,
            self.seed,
        )?;
        let structure = match self.workload {
            Workload::Uniform => VisualStructure::UniformRandom,
            Workload::Block => VisualStructure::BlockCorrelated,
        };
        Setup::new(
            config,
            WorkloadSpec::new(self.mv, self.mt, self.vocab, self.workload_seed, structure),
        )
    }
}

fn open(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    let mut w = open(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, stats: &sparse_to_dense::DecodeStats) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    stats.write_trace(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Agreement { setup, k_list, output } => {
            let s = setup.build()?;
            let study = run_agreement_study(&s, &k_list.0, setup.max_new_tokens)?;
            for w in &study.warnings {
                eprintln!("warning: {w}");
            }
            match output.format.unwrap_or(Format::Csv) {
                Format::Csv => write_agreement_csv(&study.rows, open(&output.out)?)?,
                Format::Json => write_json(&study, &output.out)?,
            }
        }
        Command::Run {
            setup,
            k,
            gamma,
            trace,
            timing,
            output,
        } => {
            if output.format == Some(Format::Csv) {
                return Err(BenchError::Usage("run reports JSON only".into()));
            }
            let s = setup.build()?;
            let k = k.unwrap_or_else(|| default_k(setup.mv, setup.mt));
            let (mut result, stats) = run_speedup_experiment(&s, k, gamma, setup.max_new_tokens, timing)?;
            if let Some(path) = &trace {
                write_trace(path, &stats)?;
                result.trace = Some(path.display().to_string());
            }
            write_json(&result, &output.out)?;
        }
        Command::Sweep {
            setup,
            gamma_list,
            k_list,
            output,
        } => {
            let s = setup.build()?;
            let k_list = k_list.map_or_else(|| vec![default_k(setup.mv, setup.mt)], |l| l.0);
            let rows = run_sweep(&s, &gamma_list.0, &k_list, setup.max_new_tokens)?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "cell gamma={} k={} failed: {}",
                    r.gamma,
                    r.k,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            match output.format.unwrap_or(Format::Csv) {
                Format::Csv => write_sweep_csv(&rows, open(&output.out)?)?,
                Format::Json => write_json(&rows, &output.out)?,
            }
            let violations = rows.iter().filter(|r| r.lossless_violation).count();
            if violations > 0 {
                return Err(BenchError::LosslessCells(violations));
            }
        }
        Command::Cost {
            gamma,
            k,
            mv,
            mt,
            alpha,
            output,
        } => {
            let input = CostModelInput::new(gamma as u64, k as u64, mv as u64, mt as u64, alpha)?;
            if output.format == Some(Format::Csv) {
                return Err(BenchError::Usage("cost reports JSON only".into()));
            }
            write_json(&input.report()?, &output.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
