use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use edgellm_core::accuracy::{evaluate, load_items, AccuracyError};
use edgellm_core::backends::Backend;
use edgellm_core::bench::{
    build_report, dataset_stats, emit, load_dataset, read_records, replay, BenchError, OutputFormat,
    ReplayOutcome, RunConfig,
};
use edgellm_core::gateway::client::GatewayClient;
use edgellm_core::gateway::Gateway;
use edgellm_core::registry::{BackendEndpoint, Registry, RegistryError};

#[derive(Parser)]
#[command(name = "edgellm", version, about = "Edge LLM gateway and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
    #[command(subcommand)]
    Bench(BenchCommand),
    #[command(subcommand)]
    Dataset(DatasetCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Replay a dataset against one or more models.
    Run(RunArgs),
    /// Rebuild the report from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated model names. Defaults to every model in the config.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, default_value_t = 3)]
    reps: u32,
    #[arg(long, default_value_t = 500)]
    max_new_tokens: u32,
    #[arg(long)]
    out: PathBuf,
    /// Only simulated backends may be selected.
    #[arg(long)]
    sim_only: bool,
    /// Send requests to a running gateway instead of an in-process one.
    #[arg(long)]
    gateway: Option<String>,
    /// Overrides the seed of every simulated backend.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    warmup: u32,
    /// Sample CPU and memory while each model runs.
    #[arg(long)]
    monitor: bool,
    /// Process to sample; defaults to this one.
    #[arg(long)]
    monitor_pid: Option<u32>,
    #[arg(long, default_value_t = 500)]
    monitor_interval_ms: u64,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print prompt length statistics as JSON.
    Stats { file: PathBuf },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Two-option multiple-choice accuracy.
    Accuracy {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "configs/models.sim.json")]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    RunThreshold(String),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::RunThreshold(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::RunThreshold(m) => write!(f, "run failed: {m}"),
            Failure::Io(e) => write!(f, "io error: {e:#}"),
        }
    }
}

impl From<RegistryError> for Failure {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Io(_) => Failure::Io(anyhow!(e.to_string())),
            other => Failure::Config(other.into()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) => Failure::Io(anyhow!(e.to_string())),
            other => Failure::Config(other.into()),
        }
    }
}

impl From<AccuracyError> for Failure {
    fn from(e: AccuracyError) -> Self {
        match e {
            AccuracyError::Io(_) => Failure::Io(anyhow!(e.to_string())),
            AccuracyError::MalformedItem { .. } | AccuracyError::ItemSyntax { .. } => Failure::Config(e.into()),
            AccuracyError::CapabilityMissing(_) | AccuracyError::NothingScored => {
                Failure::RunThreshold(e.to_string())
            }
        }
    }
}

fn io_err(e: impl Into<anyhow::Error>, what: &str) -> Failure {
    Failure::Io(e.into().context(what.to_string()))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("EDGELLM_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("edgellm: cannot start runtime: {e}");
            return ExitCode::from(4);
        }
    };
    match rt.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("edgellm: {f}");
            ExitCode::from(f.code())
        }
    }
}

async fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Serve { config, listen } => serve(&config, &listen).await,
        Command::Bench(BenchCommand::Run(args)) => bench_run(args).await,
        Command::Bench(BenchCommand::Report { records, out }) => bench_report(&records, &out),
        Command::Dataset(DatasetCommand::Stats { file }) => {
            let stats = dataset_stats(&load_dataset(&file)?)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            Ok(())
        }
        Command::Eval(EvalCommand::Accuracy { items, model, config, out }) => {
            eval_accuracy(&items, &model, &config, out.as_deref()).await
        }
    }
}

async fn serve(config: &Path, listen: &str) -> Result<(), Failure> {
    let registry = Registry::load(config)?;
    let addr: std::net::SocketAddr = listen
        .parse()
        .map_err(|e| Failure::Config(anyhow!("listen address {listen:?}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| io_err(e, &format!("binding {addr}")))?;
    let bound = listener.local_addr().map_err(|e| io_err(e, "reading bound address"))?;
    tracing::info!(models = registry.models().len(), "gateway listening on {bound}");
    let gateway = Arc::new(Gateway::new(registry));
    tokio::select! {
        r = edgellm_core::gateway::server::serve(listener, gateway) => r.map_err(|e| io_err(e, "serving"))?,
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    Ok(())
}

fn select_models(registry: &Registry, requested: &[String], sim_only: bool) -> Result<Vec<String>, Failure> {
    let is_sim = |name: &str| matches!(registry.resolve_backend(name), Ok(BackendEndpoint::Simulated(_)));
    if requested.is_empty() {
        let all: Vec<String> = registry
            .models()
            .iter()
            .map(|m| m.name.clone())
            .filter(|n| !sim_only || is_sim(n))
            .collect();
        if all.is_empty() {
            return Err(Failure::Config(anyhow!("no eligible models in the config")));
        }
        return Ok(all);
    }
    for name in requested {
        registry.get(name)?;
        if sim_only && !is_sim(name) {
            return Err(Failure::Config(anyhow!("model {name:?} is not simulated but --sim-only was given")));
        }
    }
    Ok(requested.to_vec())
}

async fn bench_run(args: RunArgs) -> Result<(), Failure> {
    let registry = Registry::load(&args.config)?;
    let models = select_models(&registry, &args.models, args.sim_only)?;
    let conversations = load_dataset(&args.dataset)?;
    let stats = dataset_stats(&conversations)?;

    let mut cfg = RunConfig::new(models, &args.dataset);
    cfg.repetitions = args.reps;
    cfg.max_new_tokens = args.max_new_tokens;
    cfg.warmup_requests = args.warmup;
    cfg.seed = args.seed;
    cfg.monitor_resources = args.monitor;
    cfg.monitor_pid = args.monitor_pid;
    cfg.monitor_interval_ms = args.monitor_interval_ms;
    cfg.validate()?;

    let outcome: ReplayOutcome = match &args.gateway {
        Some(url) => {
            let client = GatewayClient::new(url);
            if !client.health().await {
                return Err(Failure::Io(anyhow!("gateway at {url} is not reachable")));
            }
            replay(&cfg, &conversations, &client).await?
        }
        None => {
            let registry = match cfg.seed {
                Some(seed) => registry.with_sim_seed(seed),
                None => registry,
            };
            replay(&cfg, &conversations, &Gateway::new(registry)).await?
        }
    };
    tracing::info!(
        records = outcome.records.len(),
        unrecorded = outcome.unrecorded_total(),
        "replay finished"
    );

    let report = build_report(&outcome.records, &outcome.resources, &BTreeMap::new(), Some(stats), Some(&cfg))?;
    let written = emit(&report, &outcome.records, &args.out, &[OutputFormat::Json, OutputFormat::Csv])?;
    for p in written {
        println!("{}", p.display());
    }
    if !outcome.failed_models.is_empty() {
        let msg: Vec<String> = outcome.failed_models.iter().map(|f| f.to_string()).collect();
        return Err(Failure::RunThreshold(msg.join("; ")));
    }
    Ok(())
}

fn bench_report(records: &Path, out: &Path) -> Result<(), Failure> {
    let records = read_records(records)?;
    let report = build_report(&records, &BTreeMap::new(), &BTreeMap::new(), None, None)?;
    for p in emit(&report, &records, out, &[OutputFormat::Json, OutputFormat::Csv])? {
        println!("{}", p.display());
    }
    Ok(())
}

async fn eval_accuracy(items: &Path, model: &str, config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let registry = Registry::load(config)?;
    let backend = Backend::from_endpoint(registry.resolve_backend(model)?);
    let items = load_items(items)?;
    let result = evaluate(&items, &backend).await?;
    println!(
        "{model}: {} of {} correct, accuracy {:.4} ({} unscored)",
        result.correct,
        result.total,
        result.accuracy,
        result.unscored.len()
    );
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&result).expect("result serialize");
        std::fs::write(path, json + "\n").map_err(|e| io_err(e, &format!("writing {}", path.display())))?;
    }
    Ok(())
}
