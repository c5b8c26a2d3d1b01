//! Pipeline runner: synthesize a corpus, tile it, pre-train the encoder,
//! extract features, train and evaluate MIL heads, and run the clustering
//! interpretability analysis — all from one config file and one seed.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use tessella_core::config::ExperimentConfig;
use tessella_core::error::Error;
use tessella_core::mil::HeadKind;
use tessella_core::pipeline::{self, Workspace};

#[derive(Parser)]
#[command(name = "tessella", version, about = "Weakly-supervised whole-slide classification with self-supervised features")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "tessella.toml")]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for all parallel pools (0 = logical CPUs). The
    /// TESSELLA_THREADS environment variable sets the default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide corpus and manifest.
    Synth {
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Detect tissue and extract the capped tile grid for every slide.
    Tile,
    /// Pre-train the contrastive encoder (resumes from pretrain/moco.ckpt).
    Pretrain,
    /// Write a randomly initialized encoder checkpoint (no training).
    InitEncoder {
        /// Output path for the checkpoint, relative to the output dir.
        #[arg(long, default_value = "pretrain/random.tnsr")]
        path: PathBuf,
    },
    /// Extract frozen features for every slide with a given encoder.
    Extract {
        /// Encoder checkpoint path.
        #[arg(long)]
        encoder: PathBuf,
        /// Feature corpus tag (subdirectory under features/).
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// Train one MIL head on the full feature corpus.
    Train {
        #[arg(long, value_parser = parse_head)]
        head: HeadKind,
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// Repeated k-fold cross-validation of one head.
    Eval {
        #[arg(long, value_parser = parse_head)]
        head: HeadKind,
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// K-means clustering, per-cluster detection AUC, and representatives.
    Cluster {
        #[arg(long, default_value = "main")]
        tag: String,
    },
    /// Per-cluster similarity heatmaps for the first configured slides.
    Heatmap {
        #[arg(long, default_value = "main")]
        tag: String,
    },
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    HeadKind::parse(s).map_err(|e| e.to_string())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Format { .. } | Error::Shape { .. } => 3,
        Error::Numeric(_) | Error::Graph(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    let workers = cli
        .workers
        .or_else(|| std::env::var("TESSELLA_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(cfg.workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }

    let t0 = Instant::now();
    match cli.command {
        Command::Synth { force } => {
            let man = pipeline::cmd_synth(&cfg, force)?;
            let positives = man.slides.iter().filter(|s| s.label == 1).count();
            println!(
                "synth: {} slides ({positives} positive) in {:.1}s -> {}",
                man.slides.len(),
                t0.elapsed().as_secs_f64(),
                cfg.out_dir
            );
        }
        Command::Tile => {
            let tiles = pipeline::cmd_tile(&cfg)?;
            println!("tile: {tiles} tiles retained in {:.1}s", t0.elapsed().as_secs_f64());
        }
        Command::Pretrain => {
            let state = pipeline::cmd_pretrain(&cfg)?;
            let last = state.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "pretrain: {} steps, last loss {last:.4}, {:.1}s",
                state.step,
                t0.elapsed().as_secs_f64()
            );
        }
        Command::InitEncoder { path } => {
            let ws = Workspace::new(&cfg);
            let full = ws.root.join(&path);
            pipeline::write_random_encoder(&cfg, &full)?;
            println!("init-encoder: wrote {}", full.display());
        }
        Command::Extract { encoder, tag } => {
            let index = pipeline::cmd_extract(&cfg, &encoder, &tag)?;
            println!(
                "extract[{tag}]: {} slides, {} tiles, fingerprint {} in {:.1}s",
                index.entries.len(),
                index.entries.iter().map(|e| e.tile_count).sum::<usize>(),
                hex8(&index.fingerprint),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Train { head, tag } => {
            let model = pipeline::cmd_train(&cfg, head, &tag)?;
            println!(
                "train[{}/{tag}]: {} parameters in {:.1}s",
                head.as_str(),
                model.params.numel(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Eval { head, tag } => {
            let (report, records) = pipeline::cmd_eval(&cfg, head, &tag)?;
            println!(
                "eval[{}/{tag}]: {} runs, auc {} in {:.1}s",
                head.as_str(),
                records.len(),
                report.formatted(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Cluster { tag } => {
            let outcome = pipeline::cmd_cluster(&cfg, &tag)?;
            println!(
                "cluster[{tag}]: k={}, best cluster {} auc {:.4} in {:.1}s",
                outcome.model.k,
                outcome.best,
                outcome.aucs[outcome.best],
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Heatmap { tag } => {
            let written = pipeline::cmd_heatmap(&cfg, &tag)?;
            println!("heatmap[{tag}]: {written} heatmaps in {:.1}s", t0.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn hex8(bytes: &[u8; 32]) -> String {
    bytes[..4].iter().map(|b| format!("{b:02x}")).collect()
}
