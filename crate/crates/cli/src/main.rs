use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mier_cli::{
    cmd_bench, cmd_eval, cmd_filter, cmd_replay, cmd_rerank, cmd_retrieve, cmd_score, out_path,
    EngineConfig, Overrides, Summary, HITS_FILE, RANKINGS_FILE, SCORED_FILE, TRAJECTORIES_FILE,
};

#[derive(Parser)]
#[command(name = "mier", version, about = "Agentic multimodal reranking")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Candidate pool manifest.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    /// Query manifest (with ground-truth ids for scoring and evaluation).
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    #[arg(long, global = true)]
    k_top: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// scripted:<path>, replay:<path> or http.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of queries processed concurrently.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Exit 0 even if some items failed.
    #[arg(long, global = true)]
    allow_partial: bool,
    /// Log filter, e.g. `info` or `mier_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Coarse cosine top-K for every query.
    Retrieve,
    /// Sliding-window agentic reranking of a hits file.
    Rerank {
        #[arg(long)]
        hits: Option<PathBuf>,
    },
    /// Rewards and group advantages for a trajectory log.
    Score {
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Rejection-sampling filter over scored trajectories.
    Filter {
        #[arg(long)]
        scored: Option<PathBuf>,
    },
    /// Recall@K / MAP@K of a rankings file.
    Eval {
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Retrieve, rerank and evaluate.
    Bench,
    /// Verify that logged episodes replay identically.
    Replay {
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Print the effective configuration and its hash.
    Config,
}

fn run(cli: Cli) -> anyhow::Result<Summary> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    cfg.apply(&Overrides {
        pool: cli.pool,
        queries: cli.queries,
        k_top: cli.k_top,
        window: cli.window,
        stride: cli.stride,
        policy: cli.policy,
        out: cli.out,
        seed: cli.seed,
        parallel: cli.parallel,
        allow_partial: cli.allow_partial,
    });
    let or_out = |p: Option<PathBuf>, name| p.unwrap_or_else(|| out_path(&cfg, name));
    let summary = match cli.command {
        Command::Retrieve => cmd_retrieve(&cfg)?,
        Command::Rerank { hits } => cmd_rerank(&cfg, &or_out(hits, HITS_FILE))?,
        Command::Score { trajectories } => cmd_score(&cfg, &or_out(trajectories, TRAJECTORIES_FILE))?,
        Command::Filter { scored } => {
            let (s, report) = cmd_filter(&cfg, &or_out(scored, SCORED_FILE))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            s
        }
        Command::Eval { rankings } => {
            let (s, report) = cmd_eval(&cfg, &or_out(rankings, RANKINGS_FILE))?;
            print!("{}", report.table());
            s
        }
        Command::Bench => {
            let (s, report) = cmd_bench(&cfg)?;
            print!("{}", report.table());
            s
        }
        Command::Replay { trajectories } => {
            let s = cmd_replay(&cfg, &or_out(trajectories, TRAJECTORIES_FILE))?;
            println!("replayed {} episodes, {} diverged", s.items, s.failures);
            s
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            println!("# hash = {}", cfg.hash());
            Summary::default()
        }
    };
    if !summary.ok() && !cfg.run.allow_partial {
        anyhow::bail!(
            "{} of {} items failed (use --allow-partial to accept)",
            summary.failures,
            summary.items
        );
    }
    if !summary.ok() {
        log::warn!("{} of {} items failed", summary.failures, summary.items);
    }
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
