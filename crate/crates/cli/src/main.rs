use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use chunkrelay::codec::SenderId;
use chunkrelay::nodes::{NodeConfig, NodeRole, OutgoingItem, ProtocolNode, RecoveryPolicy};
use chunkrelay::nodes::ImageSource;
use chunkrelay::testbed::{
    compare_runs, dataset_files, generate_dataset, parse_size, run_scenario_in, write_report,
    MetricsReport, ScenarioConfig, TestbedError,
};
use chunkrelay::transport::mqtt::{MqttNode, MqttSettings};
use chunkrelay::transport::SessionMode;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "chunkrelay", version, about = "Chunked image transfer over publish/subscribe")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic image dataset and its MANIFEST.
    GenDataset {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        count: u32,
        /// Bytes per image, e.g. `1MB` or `524288`.
        #[arg(long, value_parser = parse_size)]
        size: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario on the simulated testbed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Directory for summary.csv, transfers.csv and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep node working directories here instead of a scratch dir.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Compare two run reports (directories or report.json files).
    ReportDiff { a: PathBuf, b: PathBuf },
    /// Run one node against a live MQTT broker.
    Node {
        #[arg(long)]
        role: NodeRole,
        #[arg(long)]
        id: String,
        /// `host:port`.
        #[arg(long, default_value = "localhost:1883")]
        broker: String,
        #[arg(long, default_value = "orchestrator")]
        orchestrator: String,
        #[arg(long, default_value = ".")]
        work_dir: PathBuf,
        #[arg(long, default_value = "clean")]
        session: String,
        #[arg(long)]
        resilient: bool,
        /// Send every file in this directory to the orchestrator.
        #[arg(long)]
        send: Option<PathBuf>,
        /// Package name for `--send`; defaults to the directory name.
        #[arg(long)]
        package: Option<String>,
        /// Request a stored package (hybrid role).
        #[arg(long)]
        request: Option<String>,
        /// Exit once all queued work is done.
        #[arg(long)]
        exit_when_idle: bool,
        /// Give up after this many seconds.
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHUNKRELAY_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<TestbedError>() {
                Some(TestbedError::VerificationFailure { .. }) => EXIT_VERIFY,
                Some(TestbedError::Config(_) | TestbedError::ShapeMismatch(_)) => EXIT_CONFIG,
                _ if e.is::<ConfigError>() => EXIT_CONFIG,
                _ => EXIT_VERIFY,
            };
            ExitCode::from(code)
        }
    }
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenDataset { seed, count, size, out } => {
            let manifest = generate_dataset(seed, count, size, &out)?;
            println!("wrote {count} images to {} ({})", out.display(), manifest.display());
            Ok(0)
        }
        Command::Run { scenario, out, seed, work_dir } => run(scenario, out, seed, work_dir),
        Command::ReportDiff { a, b } => {
            let ra = MetricsReport::load(&a)?;
            let rb = MetricsReport::load(&b)?;
            print!("{}", compare_runs(&ra, &rb)?.render());
            Ok(0)
        }
        Command::Node {
            role,
            id,
            broker,
            orchestrator,
            work_dir,
            session,
            resilient,
            send,
            package,
            request,
            exit_when_idle,
            timeout,
            seed,
        } => {
            let session = match session.as_str() {
                "clean" => SessionMode::Clean,
                "persistent" => SessionMode::Persistent,
                other => return Err(ConfigError(format!("unknown session mode {other:?}")).into()),
            };
            let id = SenderId::new(id).map_err(|e| ConfigError(e.to_string()))?;
            let orch = SenderId::new(orchestrator).map_err(|e| ConfigError(e.to_string()))?;
            let mut cfg = NodeConfig::new(id.clone(), role, orch, work_dir);
            if resilient {
                cfg.policy = RecoveryPolicy::Resilient;
            }
            let mut settings = MqttSettings::new(&broker, id).map_err(|e| ConfigError(e.to_string()))?;
            settings.session_mode = session;
            settings.seed = seed;
            let items = match &send {
                Some(dir) => package_from_dir(dir, package)?,
                None => Vec::new(),
            };
            if request.is_some() && role != NodeRole::Hybrid {
                return Err(ConfigError("--request needs --role hybrid".into()).into());
            }
            run_node(cfg, settings, items, request, exit_when_idle, timeout)
        }
    }
}

fn run(scenario: PathBuf, out: Option<PathBuf>, seed: Option<u64>, work_dir: Option<PathBuf>) -> Result<u8> {
    let mut cfg = ScenarioConfig::load(&scenario)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scratch;
    let work = match work_dir {
        Some(w) => w,
        None => {
            scratch = tempfile::tempdir().context("scratch directory")?;
            scratch.path().to_path_buf()
        }
    };
    let (report, failures) = match run_scenario_in(&cfg, &work) {
        Ok(r) => (r, Vec::new()),
        Err(TestbedError::VerificationFailure { failures, report }) => (*report, failures),
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = &out {
        write_report(&report, dir)?;
    }
    eprintln!(
        "{}: sent={} received={} duplicates={} restored={} makespan_s={:.3}",
        report.exp_id, report.sent, report.received, report.duplicates, report.restored, report.makespan_s
    );
    for r in &report.requests {
        eprintln!(
            "  {} <- {:?}: {}/{} restored",
            r.requester,
            r.selector,
            r.restored,
            r.matches.map_or("?".into(), |m| m.to_string())
        );
    }
    if failures.is_empty() {
        Ok(0)
    } else {
        for f in &failures {
            eprintln!("verification: {f}");
        }
        Ok(EXIT_VERIFY)
    }
}

fn package_from_dir(dir: &std::path::Path, package: Option<String>) -> Result<Vec<OutgoingItem>> {
    let package_name = match package {
        Some(p) => p,
        None => dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| ConfigError(format!("cannot name a package after {}", dir.display())))?,
    };
    let files = dataset_files(dir).map_err(|e| ConfigError(e.to_string()))?;
    Ok(files
        .into_iter()
        .map(|p| OutgoingItem {
            package_name: package_name.clone(),
            file_name: p.file_name().expect("file").to_string_lossy().into_owned(),
            source: ImageSource::File(p),
            annotations: Default::default(),
        })
        .collect())
}

fn run_node(
    cfg: NodeConfig,
    settings: MqttSettings,
    items: Vec<OutgoingItem>,
    request: Option<String>,
    exit_when_idle: bool,
    timeout: Option<f64>,
) -> Result<u8> {
    let node = ProtocolNode::new(cfg)?;
    let mut live = MqttNode::connect(settings, node);
    let limit = timeout.map(Duration::from_secs_f64);
    let started = std::time::Instant::now();
    let remaining = || limit.map(|l| l.saturating_sub(started.elapsed()));

    if !live.run(remaining(), |_, connected| connected) {
        bail!("could not reach the broker");
    }
    if !items.is_empty() {
        info!("queueing {} images", items.len());
        live.invoke(|n, ctx| n.send_package(ctx, items));
    }
    if let Some(sel) = &request {
        live.invoke(|n, ctx| n.request(ctx, sel))?;
    }
    let finished = live.run(remaining(), |n, _| exit_when_idle && n.is_idle());
    let node = live.disconnect();
    println!("{}", serde_json::to_string(node.metrics())?);
    if exit_when_idle && !finished {
        return Err(anyhow!("timed out before the node went idle"));
    }
    let failed = node.metrics().transfers_failed > 0
        || node.requests().iter().any(|r| r.timed_out || !r.is_done());
    Ok(if failed { EXIT_VERIFY } else { 0 })
}
