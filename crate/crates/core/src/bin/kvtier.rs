use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use kvtier::simulator::{self, csv_row, run_with_events, RunConfig, SweepAxis, CSV_HEADER};
use kvtier::workload::{self, SyntheticParams};

#[derive(Parser)]
#[command(name = "kvtier", version, about = "Two-tier KV-cache serving simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one configuration and print the metrics report as JSON.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a one-row metrics summary.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Run once per value of one config axis.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// request_rate, think_time_mean, policy, mode or stateful.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print conversation, turn and length statistics of a trace file.
    Stats {
        trace: PathBuf,
        #[arg(long, default_value_t = workload::DEFAULT_MAX_CONTEXT_TOKENS)]
        max_context: u64,
    },
    /// Write a synthetic trace file.
    GenTrace {
        #[arg(long, default_value_t = 200)]
        conversations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, trace: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if trace.is_some() {
        cfg.trace = trace;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_out(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            trace,
            seed,
            csv,
            event_log,
        } => {
            let mut cfg = load_config(config.as_ref(), trace, seed)?;
            cfg.record_events |= event_log.is_some();
            let out = run_with_events(&cfg)?;
            emit(&format!("{}\n", out.report.to_json()))?;
            if let Some(p) = csv {
                write_out(&p, &format!("{CSV_HEADER}\n{}\n", csv_row("run", "-", &out.report)))?;
            }
            if let Some(p) = event_log {
                write_out(&p, &out.event_log())?;
            }
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            trace,
            seed,
            csv,
        } => {
            let cfg = load_config(config.as_ref(), trace, seed)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = simulator::sweep(&cfg, axis, &values)?;
            let text = simulator::sweep_csv(axis, &rows);
            match csv {
                Some(p) => write_out(&p, &text)?,
                None => emit(&text)?,
            }
        }
        Cmd::Stats { trace, max_context } => {
            let t = workload::load_trace(&trace, max_context)?;
            let s = workload::trace_stats(&t.traces);
            emit(&format!(
                "conversations      {}\ndropped_over_limit {}\nmean_turns         {:.3}\n\
                 mean_prompt_len    {:.2}\nmean_output_len    {:.2}\n",
                s.n_conversations, t.dropped, s.mean_turns, s.mean_prompt_len, s.mean_output_len
            ))?;
        }
        Cmd::GenTrace {
            conversations,
            seed,
            out,
        } => {
            let traces = workload::synthetic_traces(&SyntheticParams {
                n_conversations: conversations,
                seed,
                ..Default::default()
            })?;
            write_out(&out, &workload::write_trace(&traces))?;
        }
    }
    Ok(())
}
