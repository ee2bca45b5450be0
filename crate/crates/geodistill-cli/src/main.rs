mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use geodistill::eval::HeadSelector;

use config::{BoundsArg, LabelRef, RunConfig};

#[derive(Parser)]
#[command(
    name = "geodistill",
    about = "Distribution-parameter prediction from overhead features: \
             data generation, training, and the retrieval/search/localization applications",
    version
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split manifest.
    Generate,
    /// Pretrain the backbone, freeze it, train the heads, write the
    /// checkpoint and loss history.
    Train,
    /// Report NLLs over the splits and write per-head accuracy curves.
    Eval,
    /// Top-k overhead locations for one record's ground signal.
    Retrieve {
        #[arg(long)]
        query_id: u64,
        #[arg(long)]
        head: HeadSelector,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
    },
    /// Rank locations by one label, re-ordered by a second label.
    Search {
        /// head:index, e.g. image:12
        #[arg(long)]
        primary: LabelRef,
        /// head:index, e.g. scene:3
        #[arg(long)]
        secondary: LabelRef,
        #[arg(long, default_value_t = 20)]
        top_n: usize,
    },
    /// Score grid for one query over a geographic bounding box.
    Heatmap {
        #[arg(long)]
        query_id: u64,
        #[arg(long)]
        head: HeadSelector,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        cols: usize,
        /// lat_min,lat_max,lon_min,lon_max; defaults to the world extent.
        #[arg(long)]
        bounds: Option<BoundsArg>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config <file.json> is required");
    };
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.apply_seed();
    }
    if let Some(out_dir) = &cli.out_dir {
        config.out_dir = out_dir.clone();
    }
    Ok(config)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&config).context("stage: generate"),
        Command::Train => commands::cmd_train(&config).context("stage: train"),
        Command::Eval => commands::cmd_eval(&config).context("stage: eval"),
        Command::Retrieve { query_id, head, k } => {
            commands::cmd_retrieve(&config, query_id, head, k).context("stage: retrieve")
        }
        Command::Search {
            primary,
            secondary,
            top_n,
        } => commands::cmd_search(&config, primary, secondary, top_n).context("stage: search"),
        Command::Heatmap {
            query_id,
            head,
            rows,
            cols,
            bounds,
        } => commands::cmd_heatmap(&config, query_id, head, rows, cols, bounds)
            .context("stage: heatmap"),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
