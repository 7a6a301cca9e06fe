use std::path::PathBuf;
use std::process::ExitCode;

use archivist_cli::{
    cmd_export_annotation, cmd_index, cmd_run, cmd_score, cmd_serve, cmd_validate, cmd_verify, cmd_wire_peer, exit, load_config,
    CliError, Overrides,
};
use archivist_core::metrics::LabelSource;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "archivist", version, about = "Citation-fidelity experiments over a legal corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long, default_value = "archivist.toml")]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config, the task suite and the corpus.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Build the retrieval indexes.
    Index {
        #[command(flatten)]
        common: Common,
    },
    /// Run or resume the experiment grid.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after attempting this many cells.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Machine-verify every generated response.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Compute metrics and write reports.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "machine")]
        label_source: LabelSource,
        /// Study export from the annotation service (human labels).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Blinding map for the exported batch (human labels).
        #[arg(long)]
        blinding_map: Option<PathBuf>,
    },
    /// Write a blinded annotation batch and its private blinding map.
    ExportAnnotation {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the annotation API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        addr: Option<String>,
    },
    #[command(hide = true)]
    WirePeer {
        #[arg(long, default_value_t = archivist_core::corpus::DEFAULT_DIM)]
        dim: usize,
    },
}

fn overrides(c: &Common, workers: Option<usize>) -> Overrides {
    Overrides { seed: c.seed, workers }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::WirePeer { dim } => {
            cmd_wire_peer(dim)?;
            Ok(exit::OK)
        }
        Command::Validate { common } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            let s = cmd_validate(&cx)?;
            println!("ok: {} tasks, {} documents, {} backends", s.tasks, s.documents, s.backends);
            for (cat, n) in &s.categories {
                println!("  {cat}: {n}");
            }
            Ok(exit::OK)
        }
        Command::Index { common } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            let m = cmd_index(&cx)?;
            println!("indexed {} documents into {} chunks ({} dims, checksum {})", m.doc_count, m.chunk_count, m.dim, m.checksum);
            Ok(exit::OK)
        }
        Command::Run { common, workers, stop_after } => {
            let cx = load_config(&common.config, &overrides(&common, workers))?;
            println!("seed: {}", cx.seed);
            let s = cmd_run(&cx, stop_after)?;
            println!("cells: {} total, {} new, {} skipped, {} failed", s.total, s.new, s.skipped, s.failed);
            for (cell, err) in &s.failures {
                eprintln!("failed {cell}: {err}");
            }
            Ok(if s.is_complete() { exit::OK } else { exit::PARTIAL })
        }
        Command::Verify { common } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            let r = cmd_verify(&cx)?;
            let clean = r.iter().filter(|r| r.is_clean()).count();
            println!("verified {} responses, {} clean", r.len(), clean);
            Ok(exit::OK)
        }
        Command::Score { common, label_source, annotations, blinding_map } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            let out = cmd_score(&cx, label_source, annotations.as_deref(), blinding_map.as_deref())?;
            print!("{}", out.text);
            println!("wrote {}", out.json_path.display());
            Ok(exit::OK)
        }
        Command::ExportAnnotation { common } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            let out = cmd_export_annotation(&cx)?;
            println!("{} items, {} assignments", out.items, out.assignments);
            println!("batch: {}", out.batch_path.display());
            println!("blinding map (keep private): {}", out.map_path.display());
            Ok(exit::OK)
        }
        Command::Serve { common, addr } => {
            let cx = load_config(&common.config, &overrides(&common, None))?;
            println!("seed: {}", cx.seed);
            cmd_serve(&cx, addr.as_deref())?;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("ARCHIVIST_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
