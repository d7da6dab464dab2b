//! `filtree`: generate synthetic workloads, build indexes, compute ground
//! truth, run query sweeps and update benchmarks.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigFlags;

#[derive(Parser)]
#[command(name = "filtree", version = output::VERSION, about = "Filtered ANN index benchmark harness")]
struct Cli {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Log filter, e.g. "info" or "filtree=debug".
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled dataset, queries and query predicates.
    Gen {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an index snapshot from vectors and labels.
    Build {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact filtered k-NN by brute force.
    Gt {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every query once at the first configured ef.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        /// Ground truth for the recall column.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Per-query CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall, latency and distance counts per predicate and ef.
    Sweep {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random mix of vector and label inserts and deletes, timed per op.
    UpdateBench {
        #[arg(long)]
        index: PathBuf,
        /// Per-op CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the updated index.
        #[arg(long)]
        save: Option<PathBuf>,
        /// Run the full invariant check afterwards.
        #[arg(long)]
        check: bool,
    },
    /// Pre-index a predicate under a new virtual label.
    Integrate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        predicate: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drain the rebuild queue (local) or rebuild the whole tree (global).
    Rebuild {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "local")]
        mode: filtree::RebuildMode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Vectors (.fvecs, .bvecs or raw little-endian f32).
    #[arg(long)]
    pub data: PathBuf,
    /// One line of space-separated labels per vector.
    #[arg(long)]
    pub labels: PathBuf,
    /// fvecs, bvecs or raw-f32-le; guessed from the extension when absent.
    #[arg(long)]
    pub format: Option<filtree::dataset::VectorFormat>,
    /// Dimension of raw-f32-le input.
    #[arg(long)]
    pub raw_dim: Option<usize>,
}

/// Where each query's filter comes from. Exactly one must be given.
#[derive(Args, Clone, Default)]
#[group(required = true, multiple = false)]
pub struct FilterArgs {
    /// File with one predicate per query.
    #[arg(long)]
    pub predicates: Option<PathBuf>,
    /// One predicate for every query.
    #[arg(long)]
    pub predicate: Option<String>,
    /// One label for every query.
    #[arg(long)]
    pub label: Option<u32>,
    /// Sorted vector ids, little-endian u64, shared by every query.
    #[arg(long)]
    pub id_list: Option<PathBuf>,
    /// External keys, little-endian u64, shared by every query.
    #[arg(long)]
    pub key_list: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cfg = match cli.flags.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let res = match cli.cmd {
        Cmd::Gen { out } => commands::gen(&cfg, &out),
        Cmd::Build { data, out } => commands::build(&cfg, &data, &out),
        Cmd::Gt {
            data,
            queries,
            filter,
            out,
        } => commands::gt(&cfg, &data, &queries, &filter, &out),
        Cmd::Query {
            index,
            queries,
            filter,
            gt,
            out,
        } => commands::query(&cfg, &index, &queries, &filter, gt.as_deref(), &out),
        Cmd::Sweep {
            index,
            queries,
            filter,
            gt,
            out,
        } => commands::sweep(&cfg, &index, &queries, &filter, &gt, &out),
        Cmd::UpdateBench {
            index,
            out,
            save,
            check,
        } => commands::update_bench(&cfg, &index, &out, save.as_deref(), check),
        Cmd::Integrate { index, predicate, out } => commands::integrate(&cfg, &index, &predicate, &out),
        Cmd::Rebuild { index, mode, out } => commands::rebuild(&cfg, &index, mode, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
