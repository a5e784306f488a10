mod commands;
mod config;
mod failure;
mod ksweep;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{parse_slice, EvalSettings, RunArgs};
use crate::failure::{config_error, Failure};
use crate::ksweep::{parse_k, parse_window_max, WindowMax};

#[derive(Parser, Debug)]
#[command(
    name = "metaikg",
    version,
    about = "Few-shot inductive link prediction on knowledge graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print dataset statistics as JSON.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Few-shot factor used for the threshold K_T.
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        /// Hop radius used when training triplets are derived from the train graph.
        #[arg(long = "h", default_value_t = 3)]
        hops: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed, evaluate each and write a summary.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Also write per-query ranks as queries.tsv.
        #[arg(long)]
        dump_queries: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated slice thresholds; `kt` is the few-shot threshold.
        #[arg(long, value_delimiter = ',', value_parser = parse_slice)]
        slices: Option<Vec<Option<usize>>>,
        /// Negatives per side of each test triplet.
        #[arg(long)]
        negatives: Option<usize>,
        /// Seed for negative sampling (defaults to the training seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        unfiltered_negatives: bool,
        #[arg(long)]
        dump_queries: bool,
    },
    /// Retrain with selected relations cut down to K training triplets.
    Ksweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated K values; `inf` keeps the data unchanged.
        #[arg(long = "k", value_delimiter = ',', value_parser = parse_k,
              default_value = "2,3,4,5,6,7,8,9,10,inf")]
        ks: Vec<Option<usize>>,
        /// Smallest training count of a swept relation.
        #[arg(long, default_value_t = 10)]
        min_train_count: usize,
        /// Largest training count of a swept relation: a count, `kt` or `none`.
        #[arg(long, value_parser = parse_window_max, default_value = "none")]
        max_train_count: WindowMax,
    },
    /// Generate a synthetic rule-governed dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator specification; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("METAIKG_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        config_error(format!(
            "METAIKG_THREADS must be a positive integer, got `{value}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Stats {
            dataset,
            gamma,
            hops,
            out,
        } => commands::stats(&dataset, gamma, hops, out.as_deref()),
        Command::Train {
            run,
            resume,
            dump_queries,
        } => commands::train(&run, resume, dump_queries),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            slices,
            negatives,
            seed,
            unfiltered_negatives,
            dump_queries,
        } => {
            let defaults = EvalSettings::default();
            let settings = EvalSettings {
                negatives_per_side: negatives.unwrap_or(defaults.negatives_per_side),
                filtered: !unfiltered_negatives,
                slices: slices.unwrap_or(defaults.slices),
                ..defaults
            };
            if settings.negatives_per_side == 0 {
                return Err(config_error("--negatives must be positive"));
            }
            commands::eval(&commands::EvalRequest {
                checkpoint,
                dataset,
                out,
                settings,
                seed,
                dump_queries,
            })
        }
        Command::Ksweep {
            run,
            ks,
            min_train_count,
            max_train_count,
        } => ksweep::ksweep(&ksweep::SweepRequest {
            run: &run,
            ks,
            min_train_count,
            max_train_count,
        }),
        Command::Synth { out, spec, seed } => commands::synth(&out, spec.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.kind.exit_code()
        }
    }
}
