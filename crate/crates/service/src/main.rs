use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing::info;
use tracing_subscriber::EnvFilter;

use mindstream::extraction::{read_fixtures, write_fixtures, ExtractionTransport, ReplayTransport};
use mindstream::learners::ModelKind;
use mindstream::pipeline::run_stream;
use mindstream::selection::SelectorMode;
use mindstream::synthdata::{self, CorpusSpec};

use mindstream_service::config::{ModelConfig, ServiceConfig};
use mindstream_service::engine::{self, Engine, EngineOptions};
use mindstream_service::events::read_events;
use mindstream_service::http::{router, AppState};
use mindstream_service::transport::build_transport;

#[derive(Parser)]
#[command(name = "mindstream", version, about = "Streaming cognitive-decline screening over dialogue sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a labelled corpus through the pipeline and print metrics.
    Run {
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long, default_value = "arfc")]
        model: ModelKind,
        #[arg(long, default_value = "variance")]
        selector: SelectorMode,
        /// Fixed selector threshold (skips calibration).
        #[arg(long)]
        threshold: Option<f64>,
        /// Corpus in JSONL as written by `synth`.
        #[arg(long)]
        input: PathBuf,
        /// Recorded extraction replies; defaults to the corpus' own scores.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every prediction record here as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the REST API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write extraction fixtures for the corpus.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Rebuild state from the event log and print the metrics.
    Replay {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            model,
            selector,
            threshold,
            input,
            fixtures,
            seed,
            out,
        } => run(ModelConfig {
            scenario,
            model,
            selector,
            threshold,
            seed,
            ..ModelConfig::default()
        }, &input, fixtures.as_deref(), out.as_deref()),
        Command::Serve { config } => serve(ServiceConfig::load(config.as_deref())?),
        Command::Synth { seed, out, fixtures } => {
            let corpus = synthdata::generate_corpus(&CorpusSpec::with_seed(seed))?;
            synthdata::write_corpus(&out, &corpus)?;
            if let Some(path) = fixtures {
                write_fixtures(&path, &synthdata::fixtures(&corpus))?;
            }
            println!("{}", serde_json::to_string_pretty(&synthdata::corpus_stats(&corpus)?)?);
            Ok(())
        }
        Command::Replay { config, data_dir } => {
            let mut config = ServiceConfig::load(config.as_deref())?;
            if let Some(dir) = data_dir {
                config.data_dir = dir;
            }
            replay(&config)
        }
    }
}

fn run(model: ModelConfig, input: &Path, fixtures: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let corpus = synthdata::read_corpus(input)?;
    let mut run = model.run_config()?;
    run.selector.horizon = corpus.len();
    let transport: Box<dyn ExtractionTransport> = match fixtures {
        Some(path) => Box::new(ReplayTransport::from_records(read_fixtures(path)?)),
        None => Box::new(synthdata::replay_transport(&corpus)),
    };
    let output = run_stream(&synthdata::sessions(&corpus), &run, transport.as_ref());
    if let Some(path) = out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &output.records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if !output.skipped.is_empty() {
        eprintln!("{} sessions skipped", output.skipped.len());
    }
    println!("{}", serde_json::to_string_pretty(&output.metrics)?);
    Ok(())
}

fn serve(config: ServiceConfig) -> Result<()> {
    let addr: SocketAddr = config.listen.parse().with_context(|| format!("listen address {}", config.listen))?;
    let engine = Arc::new(Engine::open(
        config.run.run_config()?,
        EngineOptions {
            data_dir: config.data_dir.clone(),
            policy: config.closure_policy(),
            snapshot_every: config.snapshot_every,
        },
        build_transport(&config.transport)?,
    )?);
    let state = AppState {
        engine: Arc::clone(&engine),
        token: config.bearer_token.as_deref().map(Arc::from),
    };
    let sweep_every = Duration::from_secs(config.sweep_interval_secs.max(1));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let sweeper = Arc::clone(&engine);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + sweep_every, sweep_every);
            loop {
                tick.tick().await;
                let engine = Arc::clone(&sweeper);
                match tokio::task::spawn_blocking(move || engine.sweep(chrono::Utc::now())).await {
                    Ok(Ok(closed)) if !closed.is_empty() => info!(?closed, "idle sessions closed"),
                    Ok(Err(e)) => tracing::warn!(error = %e, "sweep failed"),
                    _ => {}
                }
            }
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!(%addr, "listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        engine.flush().await?;
        Ok::<_, anyhow::Error>(())
    })
}

fn replay(config: &ServiceConfig) -> Result<()> {
    let log = config.data_dir.join(engine::EVENT_LOG);
    if !log.exists() {
        bail!("no event log at {}", log.display());
    }
    let events = read_events(&log)?;
    let state = engine::replay_log(config.run.run_config()?, &events)?;
    if let Some(snapshot) = engine::read_snapshot(&config.data_dir.join(engine::SNAPSHOT))? {
        let mut from_snapshot = snapshot;
        for e in &events {
            from_snapshot.apply(e)?;
        }
        if from_snapshot != state {
            bail!("snapshot plus log disagrees with a full replay");
        }
    }
    eprintln!("{} events replayed, {} predictions verified", events.len(), state.records.len());
    println!("{}", serde_json::to_string_pretty(&state.pipeline.metrics())?);
    Ok(())
}
