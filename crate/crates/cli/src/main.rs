use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use terraexpr::corpus::{ingest, AnnotationStore, IngestOptions, Origin, Partition};
use terraexpr_cli::commands::{self, CliError, CliResult, Selection};
use terraexpr_cli::service::{self, AppState};

/// Expression recognition pipeline for terracotta warrior faces.
///
/// Every command except `toy` reads a run configuration (`key = value`
/// lines). TERRAEXPR_SEED overrides its `seed`.
#[derive(Parser)]
#[command(name = "terraexpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum OriginArg {
    Collected,
    Generated,
}

#[derive(Args)]
struct SelectArgs {
    /// Split file; defaults to <output>/split.tsv.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Restrict to one partition of the split.
    #[arg(long, value_enum)]
    partition: Option<PartArg>,
    /// Restrict to collected or generated images.
    #[arg(long, value_enum)]
    origin: Option<OriginArg>,
}

impl SelectArgs {
    fn selection(&self) -> Selection {
        Selection {
            split: self.split.clone(),
            partition: self.partition.map(|p| match p {
                PartArg::Train => Partition::Train,
                PartArg::Val => Partition::Val,
                PartArg::Test => Partition::Test,
            }),
            origin: self.origin.map(|o| match o {
                OriginArg::Collected => Origin::Collected,
                OriginArg::Generated => Origin::Generated,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic 7-class corpus, reference AUs and a config.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Validate the manifest and tabulate class counts per posture.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Also decode every image header.
        #[arg(long)]
        verify_images: bool,
    },
    /// Partition the corpus into train/val/test.
    Split {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Train the classifier on the train partition.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
        /// Report file stem under the output directory.
        #[arg(long, default_value = "metrics")]
        name: String,
    },
    /// Train the AU-conditioned expression generator.
    GanTrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Train only on the train partition of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render every collected image under all 7 expressions.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory written by gan-train.
        #[arg(long)]
        gan: PathBuf,
        /// Reference AU table: `<Expression> <17 values>` per line.
        #[arg(long)]
        refs: PathBuf,
        /// Image directory under the corpus root.
        #[arg(long, default_value = "generated")]
        subdir: String,
        /// Manifest written under the corpus root.
        #[arg(long, default_value = "combined.jsonl")]
        combined: String,
    },
    /// Emit a report table.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Serve the annotation API (and console assets, if given).
    Serve {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Annotation store; defaults to <output>/annotations.jsonl.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Directory of console assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportKind {
    /// Re-render a metrics CSV as a table.
    Metrics {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-class accuracy gap between real and generated test sets.
    Effectiveness {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Expression percentages per posture group.
    Distribution {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Use predictions of this checkpoint instead of stored labels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Pairwise cosine similarity of penultimate features.
    Similarity {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let load = |c: &ConfigArg| commands::load_config(&c.config);
    match cli.command {
        Command::Toy { out, per_class, seed } => commands::toy(&out, per_class, seed),
        Command::Ingest { cfg, verify_images } => commands::ingest_cmd(&load(&cfg)?, verify_images),
        Command::Split { cfg } => commands::split_cmd(&load(&cfg)?),
        Command::Train { cfg, split, quiet } => commands::train_cmd(&load(&cfg)?, split.as_deref(), quiet),
        Command::Eval {
            cfg,
            checkpoint,
            select,
            name,
        } => commands::eval_cmd(&load(&cfg)?, &checkpoint, &select.selection(), &name),
        Command::GanTrain {
            cfg,
            steps,
            split,
            quiet,
        } => commands::gan_train_cmd(&load(&cfg)?, steps, split.as_deref(), quiet),
        Command::Generate {
            cfg,
            gan,
            refs,
            subdir,
            combined,
        } => commands::generate_cmd(&load(&cfg)?, &gan, &refs, &subdir, &combined),
        Command::Report { kind } => match kind {
            ReportKind::Metrics { cfg, input } => commands::report_metrics(&load(&cfg)?, &input),
            ReportKind::Effectiveness { cfg, real, generated } => {
                commands::report_effectiveness(&load(&cfg)?, &real, &generated)
            }
            ReportKind::Distribution {
                cfg,
                checkpoint,
                select,
            } => commands::report_distribution(&load(&cfg)?, checkpoint.as_deref(), &select.selection()),
            ReportKind::Similarity {
                cfg,
                checkpoint,
                select,
                limit,
            } => commands::report_similarity(&load(&cfg)?, &checkpoint, &select.selection(), limit),
        },
        Command::Serve {
            cfg,
            host,
            port,
            store,
            static_dir,
        } => {
            let cfg = load(&cfg)?;
            let corpus = ingest(cfg.manifest_path(), IngestOptions::default())?;
            let store_path = store.unwrap_or_else(|| cfg.output.join("annotations.jsonl"));
            let store = AnnotationStore::open(&store_path)?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::usage(format!("bad address {host}:{port}: {e}")))?;
            let state = Arc::new(AppState {
                corpus,
                store,
                policy: cfg.tie_policy,
                static_dir,
            });
            eprintln!("serving {} images on http://{addr}, store {}", state.corpus.len(), store_path.display());
            tokio::runtime::Runtime::new()?.block_on(service::serve(state, addr))?;
            Ok(format!("serve: stopped, store {}", store_path.display()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
