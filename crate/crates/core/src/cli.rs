//! The `gatekit` multi-call binary.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;

use crate::admission::DEFAULT_CONNECTION_LIMIT;
use crate::auth::{parse_policy_document, AuthPolicy};
use crate::autoscaler;
use crate::backend::{spawn_backend, AdminClient, BackendConfig, BackendState};
use crate::bench::{self, BenchConfig, ClientCertPaths, HttpClient, TokioClock};
use crate::demo::{self, Stack, StackOptions};
use crate::frontend::{spawn_frontend, FrontendConfig, FrontendState, ReloadSources};
use crate::metrics::Registry;
use crate::origin::{parse_peer_list, OriginConfig, OriginSecret, DEFAULT_SKEW_TOLERANCE_SECS};
use crate::supervisor::{run_supervisor, Launcher, ReplicaPool, SharedPool};
use crate::topology::{load_topology_file, WorkloadKind};
use crate::workload::{spawn_workload, WorkloadConfig};

pub const LOG_ENV: &str = "GATEKIT_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "gatekit",
    version,
    about = "Authenticated two-tier web gateway toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// mTLS-terminating, certificate-authenticating gateway
    Frontend(FrontendArgs),
    /// Origin-restricted ingress in front of a supervised replica pool
    Backend(BackendArgs),
    /// One workload replica (echo, burn or stateful)
    Workload(WorkloadArgs),
    /// Metric-driven replica autoscaler
    Autoscale(AutoscaleArgs),
    /// Load benchmark: n requests, c workers, k repetitions
    Bench(BenchArgs),
    /// Full stack on loopback; `--sweep` runs the replica sweep and exits
    Demo(DemoArgs),
    /// Check configuration files without starting anything
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct FrontendArgs {
    #[arg(long, default_value = "127.0.0.1:8443")]
    pub listen: SocketAddr,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub auth_policy: PathBuf,
    #[arg(long)]
    pub origin_secret_file: Option<PathBuf>,
    /// Server certificate chain (PEM)
    #[arg(long)]
    pub cert: PathBuf,
    /// Server private key (PEM)
    #[arg(long)]
    pub key: PathBuf,
    /// Abort handshakes without a client certificate instead of answering 401
    #[arg(long)]
    pub require_client_cert: bool,
    #[arg(long, default_value_t = 30.0)]
    pub upstream_timeout: f64,
    /// Seed for weighted track selection
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reload topology and auth policy when the files change
    #[arg(long)]
    pub watch: bool,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONNECTION_LIMIT)]
    pub connection_limit: usize,
    #[arg(long)]
    pub origin_secret_file: Option<PathBuf>,
    /// Comma-separated address prefixes allowed to connect
    #[arg(long, default_value = "127.0.0.0/8,::1/128")]
    pub allowed_peers: String,
    #[arg(long, default_value_t = DEFAULT_SKEW_TOLERANCE_SECS)]
    pub skew_tolerance: u64,
    #[arg(long, default_value_t = 1000)]
    pub probe_interval_ms: u64,
    #[arg(long, default_value_t = 1000)]
    pub probe_timeout_ms: u64,
    #[arg(long, default_value_t = 30.0)]
    pub upstream_timeout: f64,
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: WorkloadKind,
    #[arg(long)]
    pub port: u16,
    #[arg(long, default_value_t = 0)]
    pub burn_ms: u64,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

fn parse_kind(s: &str) -> Result<WorkloadKind, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct AutoscaleArgs {
    /// JSON list of scale policies
    #[arg(long)]
    pub policies: PathBuf,
    /// Metrics endpoint to scrape
    #[arg(long)]
    pub scrape_url: String,
    /// Backend ingress whose pool is resized; without it decisions are only logged
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub origin_secret_file: Option<PathBuf>,
    /// Stop after this many seconds
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Target URL; with --scenario, the base URL cell paths are appended to
    #[arg(long)]
    pub url: String,
    #[arg(short = 'n', default_value_t = 10)]
    pub n: usize,
    #[arg(short = 'c', default_value_t = 5)]
    pub c: usize,
    #[arg(short = 'k', default_value_t = bench::DEFAULT_REPETITIONS)]
    pub k: usize,
    #[arg(long, requires = "key")]
    pub cert: Option<PathBuf>,
    #[arg(long, requires = "cert")]
    pub key: Option<PathBuf>,
    /// Extra CA certificate for HTTPS targets
    #[arg(long)]
    pub ca: Option<PathBuf>,
    /// Per-request timeout in seconds
    #[arg(long, default_value_t = 10.0)]
    pub timeout: f64,
    #[arg(long, default_value = "bench")]
    pub label: String,
    /// JSON list of cells; runs each against --url without reconfiguring anything
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Run the replica sweep, write results and exit
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value = "demo-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    #[arg(short = 'n', default_value_t = 10)]
    pub n: usize,
    #[arg(short = 'c', default_value_t = 5)]
    pub c: usize,
    #[arg(long, default_value_t = demo::DEMO_BURN_MS)]
    pub burn_ms: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub frontend_listen: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub backend_listen: SocketAddr,
    /// Stop after this many seconds instead of waiting for a signal
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub topology: PathBuf,
    /// Autoscaler policies
    #[arg(long)]
    pub policies: Option<PathBuf>,
    /// Frontend auth policy; root certificate files are checked too
    #[arg(long)]
    pub auth_policy: Option<PathBuf>,
    /// Bench scenario
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

/// Parse `args` and run; usage errors exit 2, runtime errors 1.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "fatal");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging() {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    let filter = tracing_subscriber::EnvFilter::try_new(&level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .try_init();
}

async fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Frontend(a) => frontend(a).await,
        Command::Backend(a) => backend(a).await,
        Command::Workload(a) => workload(a).await,
        Command::Autoscale(a) => autoscale(a).await,
        Command::Bench(a) => bench_cmd(a).await,
        Command::Demo(a) => demo_cmd(a).await,
        Command::Validate(a) => Ok(validate(&a)),
    }
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("installing SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}

async fn frontend(a: FrontendArgs) -> anyhow::Result<ExitCode> {
    let topology = load_topology_file(&a.topology)?;
    let secret = OriginSecret::load(a.origin_secret_file.as_deref())?;
    let policy = AuthPolicy::from_file(&a.auth_policy, secret)?;
    let tls_config = crate::tls::server_config(
        crate::tls::load_certs(&a.cert)?,
        crate::tls::load_private_key(&a.key)?,
        policy.trusted_roots(),
        a.require_client_cert,
    )?;
    anyhow::ensure!(
        a.upstream_timeout > 0.0,
        "--upstream-timeout must be positive"
    );
    let state = FrontendState::new(
        topology,
        policy,
        FrontendConfig {
            upstream_timeout: Duration::from_secs_f64(a.upstream_timeout),
            seed: a.seed,
        },
        Arc::new(Registry::new()),
    );
    let listener = TcpListener::bind(a.listen)
        .await
        .with_context(|| format!("binding {}", a.listen))?;
    let server = spawn_frontend(listener, Arc::new(tls_config), Arc::clone(&state))?;
    tracing::info!(addr = %server.addr, "frontend listening");
    println!("frontend listening on {}", server.addr);

    let sources = ReloadSources {
        topology: a.topology.clone(),
        auth_policy: a.auth_policy.clone(),
        secret_file: a.origin_secret_file.clone(),
    };
    let _watcher = a.watch.then(|| {
        tokio::spawn(
            sources
                .clone()
                .watch(Arc::clone(&state), Duration::from_secs(1)),
        )
    });
    let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
    let stop = shutdown_signal();
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => break,
            _ = hup.recv() => match sources.reload(&state) {
                Ok(generation) => tracing::info!(generation, "configuration reloaded"),
                Err(e) => tracing::warn!(error = format!("{e:#}"), "reload rejected; keeping current configuration"),
            },
        }
    }
    tracing::info!("frontend stopping");
    Ok(ExitCode::SUCCESS)
}

async fn backend(a: BackendArgs) -> anyhow::Result<ExitCode> {
    let topology = load_topology_file(&a.topology)?;
    let secret = OriginSecret::load(a.origin_secret_file.as_deref())?;
    let peers = parse_peer_list(&a.allowed_peers)?;
    let origin = OriginConfig::new(secret, peers, a.skew_tolerance)?;
    anyhow::ensure!(
        a.connection_limit > 0,
        "--connection-limit must be positive"
    );
    anyhow::ensure!(
        a.upstream_timeout > 0.0,
        "--upstream-timeout must be positive"
    );
    let metrics = Arc::new(Registry::new());
    let mut pool = ReplicaPool::new(Launcher::current_exe()?, &topology, Arc::clone(&metrics))
        .with_probe_timeout(Duration::from_millis(a.probe_timeout_ms));
    let listener = TcpListener::bind(a.listen)
        .await
        .with_context(|| format!("binding {}", a.listen))?;
    if let Err(e) = pool.reconcile().await {
        tracing::warn!(error = %e, "initial reconcile incomplete; supervisor will retry");
    }
    let snapshot = pool.snapshot_cell();
    let pool: SharedPool = Arc::new(tokio::sync::Mutex::new(pool));
    let state = BackendState::new(
        BackendConfig {
            connection_limit: a.connection_limit,
            origin,
            upstream_timeout: Duration::from_secs_f64(a.upstream_timeout),
        },
        topology,
        snapshot,
        Some(Arc::clone(&pool)),
        metrics,
    );
    let server = spawn_backend(listener, state)?;
    tracing::info!(addr = %server.addr, "backend listening");
    println!("backend listening on {}", server.addr);
    run_supervisor(
        pool,
        Duration::from_millis(a.probe_interval_ms.max(1)),
        shutdown_signal(),
    )
    .await;
    tracing::info!("backend stopped");
    Ok(ExitCode::SUCCESS)
}

async fn workload(a: WorkloadArgs) -> anyhow::Result<ExitCode> {
    let addr = SocketAddr::new(a.host, a.port);
    let listener = TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let server = spawn_workload(
        listener,
        WorkloadConfig {
            kind: a.kind,
            burn_ms: a.burn_ms,
        },
    )?;
    tracing::debug!(addr = %server.addr, kind = a.kind.as_str(), "workload listening");
    shutdown_signal().await;
    Ok(ExitCode::SUCCESS)
}

async fn autoscale(a: AutoscaleArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&a.policies)
        .with_context(|| format!("reading {}", a.policies.display()))?;
    let policies = autoscaler::load_policies(&text)?;
    let actuator = match &a.backend_url {
        Some(url) => Some(AdminClient::new(
            url.clone(),
            OriginSecret::load(a.origin_secret_file.as_deref())?,
        )),
        None => None,
    };
    let duration = a.duration;
    let stop = async move {
        match duration {
            Some(secs) => tokio::select! {
                _ = tokio::time::sleep(Duration::from_secs_f64(secs.max(0.0))) => {}
                _ = shutdown_signal() => {}
            },
            None => shutdown_signal().await,
        }
    };
    autoscaler::run_loop(policies, a.scrape_url, actuator, stop).await;
    Ok(ExitCode::SUCCESS)
}

async fn bench_cmd(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let client_certificate = match (a.cert, a.key) {
        (Some(cert), Some(key)) => Some(ClientCertPaths { cert, key }),
        _ => None,
    };
    let clock = TokioClock::new();
    if let Some(path) = &a.scenario {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cells = bench::load_scenario(&text)?;
        let target = FixedTarget {
            base: a.url.clone(),
            cert: client_certificate,
            ca: a.ca.clone(),
        };
        let rows = bench::run_matrix(&cells, &target, &clock).await;
        bench::write_matrix_outputs(&rows, a.csv.as_deref(), a.plot_data.as_deref())?;
        print!("{}", bench::matrix_csv(&rows));
        return Ok(ExitCode::SUCCESS);
    }
    anyhow::ensure!(
        a.timeout > 0.0 && a.timeout.is_finite(),
        "--timeout must be positive"
    );
    let config = BenchConfig {
        target_url: a.url,
        n: a.n,
        c: a.c,
        repetitions: a.k,
        timeout: Duration::from_secs_f64(a.timeout),
        client_certificate,
        ca_certificate: a.ca,
        label: a.label,
    };
    config.validate()?;
    let client = HttpClient::new(&config)?;
    let (_, agg) = bench::run_repeated(&config, &client, &clock).await?;
    println!("{}", serde_json::to_string_pretty(&agg)?);
    let row = bench::MatrixRow {
        label: agg.label.clone(),
        replicas: 0,
        service: String::new(),
        mean_rps: agg.mean_rps,
        stddev_rps: agg.stddev_rps,
        p50: agg.mean_latency.p50,
        p99: agg.mean_latency.p99,
        runs: agg.runs,
        error: None,
    };
    bench::write_matrix_outputs(&[row], a.csv.as_deref(), a.plot_data.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

/// Scenario target that cannot reconfigure anything: every cell runs
/// against the same URL base.
struct FixedTarget {
    base: String,
    cert: Option<ClientCertPaths>,
    ca: Option<PathBuf>,
}

impl bench::MatrixTarget for FixedTarget {
    type Client = HttpClient;

    async fn configure(&self, _service: &str, _replicas: u32) -> anyhow::Result<()> {
        Ok(())
    }

    fn client(&self, cell: &bench::ScenarioCell) -> anyhow::Result<HttpClient> {
        let mut cfg = cell.bench_config(&self.base);
        cfg.client_certificate = self.cert.clone();
        cfg.ca_certificate = self.ca.clone();
        HttpClient::new(&cfg)
    }
}

async fn demo_cmd(a: DemoArgs) -> anyhow::Result<ExitCode> {
    let workdir = a.out.join("pki");
    let mut opts = StackOptions::new(Launcher::current_exe()?, &workdir);
    opts.seed = a.seed;
    opts.burn_ms = a.burn_ms;
    opts.frontend_listen = a.frontend_listen;
    opts.backend_listen = a.backend_listen;
    if a.sweep {
        let cells = demo::replica_sweep(a.n, a.c, a.repetitions);
        let report = tokio::select! {
            r = demo::run_demo_scenario(opts, Some(cells), &a.out) => r?,
            _ = shutdown_signal() => anyhow::bail!("interrupted"),
        };
        print!("{}", bench::matrix_csv(&report.rows));
        println!("csv: {}", report.csv.display());
        println!("plot data: {}", report.plot_data.display());
        println!("elapsed: {:.1}s", report.elapsed.as_secs_f64());
        return Ok(ExitCode::SUCCESS);
    }
    let stack = Stack::launch(opts).await?;
    print_endpoints(&stack).await;
    match a.duration {
        Some(secs) => tokio::select! {
            _ = tokio::time::sleep(Duration::from_secs_f64(secs.max(0.0))) => {}
            _ = shutdown_signal() => {}
        },
        None => shutdown_signal().await,
    }
    stack.shutdown().await;
    println!("stopped");
    Ok(ExitCode::SUCCESS)
}

async fn print_endpoints(stack: &Stack) {
    println!("frontend: {}", stack.frontend_url());
    println!("backend: {}", stack.backend_url());
    println!("legacy: http://{}", stack.legacy_addr);
    println!("ca: {}", stack.pki.ca_cert.display());
    println!("client cert: {}", stack.pki.client_cert.display());
    println!("client key: {}", stack.pki.client_key.display());
    let pool = stack.pool.lock().await;
    let mut pids: Vec<u32> = stack.legacy_pid().into_iter().collect();
    let mut services: Vec<_> = stack
        .topology
        .services
        .iter()
        .map(|s| s.name.clone())
        .collect();
    services.sort();
    for svc in services {
        let replicas = pool.replicas(&svc);
        if replicas.is_empty() {
            continue;
        }
        let ports: Vec<String> = replicas.iter().map(|r| r.port.to_string()).collect();
        println!("service {svc}: replicas on ports {}", ports.join(","));
        pids.extend(replicas.iter().filter_map(|r| r.pid));
    }
    let pids: Vec<String> = pids.iter().map(u32::to_string).collect();
    println!("pids: {}", pids.join(","));
    println!("ready");
}

/// Load every given file and report problems. Never writes anything.
pub fn validate(a: &ValidateArgs) -> ExitCode {
    let mut failures = 0;
    let mut report = |what: &str, path: &Path, result: anyhow::Result<String>| match result {
        Ok(summary) => println!("ok: {what} {}: {summary}", path.display()),
        Err(e) => {
            failures += 1;
            eprintln!("error: {what} {}: {e:#}", path.display());
        }
    };
    report(
        "topology",
        &a.topology,
        load_topology_file(&a.topology)
            .map(|t| format!("{} services", t.services.len()))
            .map_err(Into::into),
    );
    if let Some(p) = &a.policies {
        report(
            "policies",
            p,
            std::fs::read_to_string(p)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(autoscaler::load_policies(&t)?))
                .map(|ps| format!("{} policies", ps.len())),
        );
    }
    if let Some(p) = &a.auth_policy {
        report("auth policy", p, validate_auth_policy(p));
    }
    if let Some(p) = &a.scenario {
        report(
            "scenario",
            p,
            std::fs::read_to_string(p)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(bench::load_scenario(&t)?))
                .map(|cells| format!("{} cells", cells.len())),
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn validate_auth_policy(path: &Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path)?;
    let doc = parse_policy_document(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut roots = Vec::new();
    for root in &doc.trusted_roots {
        let full = base.join(root);
        let certs = crate::tls::load_certs(&full)?;
        anyhow::ensure!(!certs.is_empty(), "no certificates in {}", full.display());
        roots.extend(certs);
    }
    // a throwaway secret: only the roots and rules are being checked
    let secret = OriginSecret::new(vec![0u8; crate::origin::MIN_SECRET_LEN])?;
    AuthPolicy::new(
        roots,
        doc.dn_role_rules.clone(),
        doc.revoked_dns.clone(),
        secret,
    )?;
    Ok(format!(
        "{} roots, {} rules, {} revoked",
        doc.trusted_roots.len(),
        doc.dn_role_rules.len(),
        doc.revoked_dns.len()
    ))
}
