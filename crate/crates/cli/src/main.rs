use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use layerminer::confmine::parse_compose;
use layerminer::dockerfile::{self, lint_reproducibility};
use layerminer::kb::KnowledgeBase;
use layerminer::pipeline::{compose_one, describe, run_pipeline, MiningJobConfig, Pass, PipelineError};
use layerminer::store::{LayerStore, StoreError};
use layerminer::ImageRef;

/// Static mining of container image repositories.
#[derive(Parser)]
#[command(name = "layerminer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a mining job.
    Mine {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build or query the knowledge base of known files.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Lint Dockerfiles for reproducibility.
    #[command(subcommand)]
    Dockerfile(DockerfileCommand),
    /// Inspect compose files.
    #[command(subcommand)]
    Compose(ComposeCommand),
    /// Print a report for a job.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Maintain a layer store.
    #[command(subcommand)]
    Store(StoreCommand),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Add the images listed in a file (one reference per line) to the knowledge base.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Knowledge base file; defaults to the job's kb_path.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Coverage of one image by the knowledge base.
    Coverage {
        image: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum DockerfileCommand {
    /// Lint a Dockerfile (`-` reads stdin).
    Lint {
        path: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum ComposeCommand {
    /// Print the service graph of a compose file.
    Graph {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Repository sizes from manifests.
    Sizes {
        #[arg(long)]
        config: PathBuf,
    },
    /// Unique layer and file fractions per repository.
    Layers {
        #[arg(long)]
        config: PathBuf,
    },
    /// Knowledge base coverage per image.
    Coverage {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Re-hash every blob and report corrupt or missing ones.
    Verify {
        #[arg(long)]
        store: PathBuf,
    },
    /// Evict unpinned blobs, processed ones first, until the target is freed.
    Gc {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        target_free: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

/// Exit status for fatal configuration problems.
const EXIT_FATAL: u8 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

fn load(config: &Path) -> Result<MiningJobConfig> {
    Ok(MiningJobConfig::load(config)?)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Mine { config } => {
            let summary = run_pipeline(&load(&config)?)?;
            print!("{}", describe(&summary));
            Ok(ExitCode::from(summary.exit_code() as u8))
        }
        Command::Kb(KbCommand::Build { config, corpus, kb }) => kb_build(&config, &corpus, kb),
        Command::Kb(KbCommand::Coverage {
            image,
            config,
            kb,
            format,
        }) => kb_coverage(&image, &config, kb, format),
        Command::Dockerfile(DockerfileCommand::Lint { path, format }) => lint(&path, format),
        Command::Compose(ComposeCommand::Graph { path, format }) => compose_graph(&path, format),
        Command::Report(r) => report(r),
        Command::Store(StoreCommand::Verify { store }) => {
            let report = LayerStore::open(&store)?.verify()?;
            serde_json::to_writer_pretty(io::stdout().lock(), &report)?;
            println!();
            let clean = report.corrupt.is_empty() && report.missing.is_empty();
            Ok(ExitCode::from(if clean { 0 } else { 2 }))
        }
        Command::Store(StoreCommand::Gc { store, target_free }) => {
            let store = LayerStore::open(&store)?;
            let (evicted, code) = match store.evict(target_free) {
                Ok(evicted) => (evicted, 0),
                Err(StoreError::InsufficientEvictable { evicted, freed, target }) => {
                    eprintln!("only {freed} of {target} bytes could be freed");
                    (evicted, 2)
                }
                Err(e) => return Err(e.into()),
            };
            for d in &evicted {
                println!("{d}");
            }
            eprintln!(
                "evicted {} blobs, {} bytes remain",
                evicted.len(),
                store.present_bytes()
            );
            Ok(ExitCode::from(code))
        }
    }
}

fn kb_build(config: &Path, corpus: &Path, kb: Option<PathBuf>) -> Result<ExitCode> {
    let mut job = load(config)?;
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    job.images = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    job.repositories.clear();
    job.dictionary = None;
    job.passes = vec![Pass::Sizes];
    job.kb_update = true;
    let scratch = tempfile::tempdir()?;
    job.store_dir = Some(job.store_dir());
    job.output_dir = scratch.path().to_path_buf();
    if kb.is_some() {
        job.kb_path = kb;
    }
    let Some(path) = job.kb_path.clone() else {
        bail!("no knowledge base path: pass --kb or set kb_path");
    };
    let summary = run_pipeline(&job)?;
    print!("{}", describe(&summary));
    let kb = KnowledgeBase::load(&path)?;
    println!(
        "knowledge base {}: {} images, {} files",
        path.display(),
        kb.images().len(),
        kb.len()
    );
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn kb_coverage(image: &str, config: &Path, kb: Option<PathBuf>, format: Format) -> Result<ExitCode> {
    let job = load(config)?;
    let image: ImageRef = image.parse().with_context(|| format!("image reference {image:?}"))?;
    let Some(path) = kb.or_else(|| job.kb_path.clone()) else {
        bail!("no knowledge base path: pass --kb or set kb_path");
    };
    let kb = KnowledgeBase::load(&path)?;
    let fs = match compose_one(&job, &image) {
        Ok(fs) => fs,
        Err(PipelineError::Image(f)) => {
            eprintln!("{} failed at {}: {}", f.subject, f.stage, f.message);
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    let report = kb.coverage(&fs);
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(io::stdout().lock(), &report)?;
            println!();
        }
        Format::Text => println!(
            "{image}: files {}/{} ({:.4}), layers {}/{} ({:.4})",
            report.known_files,
            report.total_files,
            report.file_hit_ratio,
            report.known_layers,
            report.total_layers,
            report.layer_hit_ratio
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn lint(path: &str, format: Format) -> Result<ExitCode> {
    let bytes = if path == "-" {
        let mut b = Vec::new();
        io::stdin().read_to_end(&mut b)?;
        b
    } else {
        fs::read(path).with_context(|| format!("reading {path}"))?
    };
    let findings = lint_reproducibility(&dockerfile::parse_bytes(&bytes));
    let mut out = io::stdout().lock();
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &findings)?;
            writeln!(out)?;
        }
        Format::Text => {
            for f in &findings {
                writeln!(out, "{path}:{}: {} {:?}: {}", f.line, f.rule_id, f.severity, f.message)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn compose_graph(path: &Path, format: Format) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = parse_compose(&text)?;
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(io::stdout().lock(), &graph)?;
            println!();
        }
        Format::Text => {
            for s in graph.services.keys() {
                println!("service {s}");
            }
            for e in &graph.edges {
                println!("{} -> {} ({:?})", e.from, e.to, e.kind);
            }
            for e in &graph.dangling {
                println!("{} -> {} ({:?}, undeclared)", e.from, e.to, e.kind);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reruns the job with only the passes a report needs, in a scratch output
/// directory sharing the job's store, and prints the report.
fn report(command: ReportCommand) -> Result<ExitCode> {
    let (config, file, passes) = match command {
        ReportCommand::Sizes { config } => (config, "repo-sizes.csv", None),
        ReportCommand::Layers { config } => (config, "layer-sharing.csv", None),
        ReportCommand::Coverage { config } => (config, "kb-coverage.csv", Some(vec![Pass::KbCoverage])),
    };
    let mut job = load(&config)?;
    let scratch = tempfile::tempdir()?;
    job.store_dir = Some(job.store_dir());
    job.output_dir = scratch.path().to_path_buf();
    job.kb_update = false;
    match passes {
        Some(p) => job.passes = p,
        None => job.passes.retain(|p| *p != Pass::DockerfileLint),
    }
    if !job.passes.contains(&Pass::Sizes) {
        job.passes.push(Pass::Sizes);
    }
    let summary = run_pipeline(&job)?;
    let path = scratch.path().join("reports").join(file);
    if !path.exists() {
        bail!("{file} was not produced; the job selected no images with the needed data");
    }
    io::stdout().write_all(&fs::read(&path)?)?;
    for f in &summary.failures {
        eprintln!("{} failed at {}: {}", f.subject, f.stage, f.message);
    }
    Ok(ExitCode::from(summary.exit_code() as u8))
}
