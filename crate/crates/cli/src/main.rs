use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use partaog::qa::{QaConfig, SelectionStrategy};
use partaog::records::write_jsonl;
use partaog::synth::SynthSpec;
use partaog_cli::commands::{self, LearnArgs, QaRunArgs};
use partaog_cli::server;

#[derive(Parser)]
#[command(name = "partaog", version, about = "Mine, parse and grow And-Or part models on CNN feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a model from a batch of annotated boxes.
    Learn {
        #[arg(long)]
        fmaps: PathBuf,
        /// JSON-lines annotation records.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of deepest layers to mine patterns from.
        #[arg(long, default_value_t = 9)]
        layers: usize,
        /// Suppression radius in cells.
        #[arg(long, default_value_t = 2)]
        epsilon: usize,
        #[arg(long, default_value = "part")]
        part: String,
    },
    /// Parse every image with a model and write one record per image.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fmaps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Active question answering.
    Qa {
        #[command(subcommand)]
        command: QaCommand,
    },
    /// Localization metrics of a parse file against ground truth.
    Eval {
        #[arg(long)]
        parses: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        /// Also write the per-image records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Generate a planted-motif corpus with its oracle file.
    Synth {
        /// Spec file; without it a standard spec is built from the flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        absent_rate: f64,
    },
    /// Per-layer activation statistics of every parse, as CSV on stdout.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fmaps: PathBuf,
    },
}

#[derive(Subcommand)]
enum QaCommand {
    /// Run a session against a scripted oracle file.
    Run {
        #[arg(long)]
        fmaps: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Serve a session to the annotation UI.
    Serve {
        #[arg(long)]
        fmaps: PathBuf,
        /// Directory holding the image files, named by image id.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[command(flatten)]
        session: SessionArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Kl,
    Random,
}

#[derive(Args)]
struct SessionArgs {
    #[arg(long, default_value = "part")]
    part: String,
    #[arg(long, value_enum, default_value_t = Strategy::Kl)]
    strategy: Strategy,
    /// Seed of the random strategy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decay of score transfer with appearance distance.
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 9)]
    layers: usize,
}

impl SessionArgs {
    fn config(&self) -> QaConfig {
        let mut cfg = QaConfig {
            alpha: self.alpha,
            beta: self.beta,
            selection: match self.strategy {
                Strategy::Kl => SelectionStrategy::KlGain,
                Strategy::Random => SelectionStrategy::Random { seed: self.seed },
            },
            ..QaConfig::default()
        };
        cfg.miner.valid_layers = self.layers;
        cfg
    }
}

async fn serve(session: partaog::qa::QaSession, images: Option<PathBuf>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, server::router(session, images))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Learn {
            fmaps,
            annotations,
            out,
            layers,
            epsilon,
            part,
        } => commands::learn(&LearnArgs {
            fmaps: &fmaps,
            annotations: &annotations,
            out: &out,
            layers,
            epsilon,
            part: &part,
        }),
        Command::Parse { model, fmaps, out } => commands::parse(&model, &fmaps, &out),
        Command::Qa { command } => match command {
            QaCommand::Run {
                fmaps,
                oracle,
                budget,
                out,
                log,
                session,
            } => commands::qa_run(QaRunArgs {
                fmaps: &fmaps,
                oracle: &oracle,
                budget,
                out: &out,
                log: &log,
                config: session.config(),
                part: &session.part,
            }),
            QaCommand::Serve {
                fmaps,
                images,
                port,
                budget,
                host,
                session,
            } => {
                let s = commands::new_session(&fmaps, budget, &session.part, session.config())?;
                let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host or port")?;
                tokio::runtime::Runtime::new()?.block_on(serve(s, images, addr))
            }
        },
        Command::Eval {
            parses,
            oracle,
            records,
        } => {
            let (rows, summary) = commands::eval(&parses, &oracle)?;
            if let Some(path) = records {
                write_jsonl(&path, &rows)?;
            }
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Command::Synth {
            spec,
            out,
            seed,
            images,
            templates,
            noise,
            absent_rate,
        } => {
            let spec = match spec {
                Some(path) => commands::read_synth_spec(&path)?,
                None => SynthSpec {
                    absent_rate,
                    ..SynthSpec::standard(seed, images, templates, noise)
                },
            };
            commands::synth(&spec, &out)
        }
        Command::Stats { model, fmaps } => commands::stats(&model, &fmaps, io::stdout().lock()),
    }
}
