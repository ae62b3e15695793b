//! The full stack on loopback: PKI, frontend, backend ingress, supervised
//! replica pool and a legacy endpoint. Used by the `demo` subcommand and the
//! end-to-end tests.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use rand::{RngCore, SeedableRng};
use tokio::net::TcpListener;
use tokio::process::Child;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::auth::{AuthPolicy, DnPattern, DnRoleRule};
use crate::backend::{spawn_backend, BackendConfig, BackendState};
use crate::bench::{
    self, BenchConfig, ClientCertPaths, HttpClient, MatrixRow, MatrixTarget, ScenarioCell,
};
use crate::frontend::{spawn_frontend, FrontendConfig, FrontendState};
use crate::http::ServerHandle;
use crate::metrics::Registry;
use crate::origin::{loopback_peers, OriginConfig, OriginSecret, DEFAULT_SKEW_TOLERANCE_SECS};
use crate::supervisor::{free_port, run_supervisor, Launcher, ReplicaPool, SharedPool};
use crate::tls::{self, PkiFiles};
use crate::topology::{Endpoint, ReleaseTrack, ServiceSpec, Topology, WorkloadKind};

pub const DEMO_CLIENT_CN: &str = "ops-demo";
pub const DEMO_BURN_MS: u64 = 20;

#[derive(Debug, Clone)]
pub struct StackOptions {
    pub launcher: Launcher,
    pub workdir: PathBuf,
    pub frontend_listen: SocketAddr,
    pub backend_listen: SocketAddr,
    pub seed: Option<u64>,
    pub probe_interval: Duration,
    pub probe_timeout: Duration,
    pub connection_limit: usize,
    pub burn_ms: u64,
    pub upstream_timeout: Duration,
}

impl StackOptions {
    pub fn new(launcher: Launcher, workdir: impl Into<PathBuf>) -> Self {
        Self {
            launcher,
            workdir: workdir.into(),
            frontend_listen: ([127, 0, 0, 1], 0).into(),
            backend_listen: ([127, 0, 0, 1], 0).into(),
            seed: None,
            probe_interval: Duration::from_secs(1),
            probe_timeout: crate::supervisor::DEFAULT_PROBE_TIMEOUT,
            connection_limit: crate::admission::DEFAULT_CONNECTION_LIMIT,
            burn_ms: DEMO_BURN_MS,
            upstream_timeout: crate::frontend::DEFAULT_UPSTREAM_TIMEOUT,
        }
    }
}

fn pool_service(
    name: &str,
    prefix: &str,
    kind: WorkloadKind,
    backend: &str,
    max: u32,
) -> ServiceSpec {
    ServiceSpec {
        name: name.into(),
        path_prefix: prefix.into(),
        tracks: vec![ReleaseTrack {
            label: "stable".into(),
            weight: 100,
            endpoints: vec![Endpoint::parse(backend).expect("socket address")],
        }],
        legacy_endpoint: None,
        min_replicas: 1,
        max_replicas: max,
        burn_ms: None,
        kind,
        required_roles: BTreeSet::new(),
    }
}

/// Services of the demo: `echo` and `burn` on the pool, `stateful` on the
/// pool with two replicas (to show divergence), `legacy` on an external
/// endpoint.
pub fn demo_topology(backend: SocketAddr, legacy: SocketAddr, burn_ms: u64) -> Topology {
    let b = backend.to_string();
    let mut burn = pool_service("burn", "/burn", WorkloadKind::Burn, &b, 8);
    burn.burn_ms = Some(burn_ms);
    let mut ops = pool_service("ops", "/ops", WorkloadKind::Echo, &b, 2);
    ops.required_roles = BTreeSet::from(["operator".to_owned()]);
    Topology {
        services: vec![
            pool_service("echo", "/echo", WorkloadKind::Echo, &b, 8),
            burn,
            pool_service("stateful", "/kv", WorkloadKind::Stateful, &b, 4),
            ops,
            ServiceSpec {
                name: "legacy".into(),
                path_prefix: "/legacy".into(),
                tracks: Vec::new(),
                legacy_endpoint: Some(
                    Endpoint::parse(&legacy.to_string()).expect("socket address"),
                ),
                min_replicas: 1,
                max_replicas: 1,
                burn_ms: None,
                kind: WorkloadKind::Stateful,
                required_roles: BTreeSet::new(),
            },
        ],
    }
}

/// Desired counts right after launch.
pub fn demo_initial_desired() -> HashMap<String, u32> {
    HashMap::from([
        ("echo".to_owned(), 2),
        ("burn".to_owned(), 1),
        ("stateful".to_owned(), 2),
        ("ops".to_owned(), 1),
    ])
}

pub fn demo_rules() -> Vec<DnRoleRule> {
    vec![
        DnRoleRule {
            pattern: DnPattern::new("CN=ops-*").expect("static pattern"),
            role: "operator".into(),
        },
        DnRoleRule {
            pattern: DnPattern::new("*O=Gatekit Test*").expect("static pattern"),
            role: "reader".into(),
        },
    ]
}

/// A running stack. Dropping it kills the servers and every child process;
/// [`Stack::shutdown`] does so gracefully.
pub struct Stack {
    pub pki: PkiFiles,
    pub secret: OriginSecret,
    pub topology: Topology,
    pub frontend_addr: SocketAddr,
    pub backend_addr: SocketAddr,
    pub legacy_addr: SocketAddr,
    pub frontend: Arc<FrontendState>,
    pub backend: Arc<BackendState>,
    pub pool: SharedPool,
    pub frontend_metrics: Arc<Registry>,
    pub backend_metrics: Arc<Registry>,
    _servers: Vec<ServerHandle>,
    legacy: Option<Child>,
    supervisor: Option<(oneshot::Sender<()>, JoinHandle<()>)>,
}

impl Stack {
    pub async fn launch(opts: StackOptions) -> anyhow::Result<Stack> {
        let pki = tls::write_demo_pki(&opts.workdir, DEMO_CLIENT_CN)
            .with_context(|| format!("writing PKI under {}", opts.workdir.display()))?;
        let mut secret_bytes = vec![0u8; 48];
        match opts.seed {
            Some(s) => {
                rand_chacha::ChaCha8Rng::seed_from_u64(s ^ 0x5ec7e7).fill_bytes(&mut secret_bytes)
            }
            None => rand::thread_rng().fill_bytes(&mut secret_bytes),
        }
        let secret = OriginSecret::new(hex::encode(secret_bytes).into_bytes())?;

        let frontend_listener = TcpListener::bind(opts.frontend_listen)
            .await
            .with_context(|| format!("binding frontend on {}", opts.frontend_listen))?;
        let backend_listener = TcpListener::bind(opts.backend_listen)
            .await
            .with_context(|| format!("binding backend on {}", opts.backend_listen))?;
        let frontend_addr = frontend_listener.local_addr()?;
        let backend_addr = backend_listener.local_addr()?;

        let legacy_port = free_port()?;
        let legacy_addr: SocketAddr = ([127, 0, 0, 1], legacy_port).into();
        let topology = demo_topology(backend_addr, legacy_addr, opts.burn_ms);
        crate::topology::validate(&topology)?;
        let legacy_spec = topology.service("legacy").expect("demo service").clone();
        let mut legacy_as_replica = legacy_spec.clone();
        legacy_as_replica.legacy_endpoint = None;
        let legacy =
            crate::supervisor::start_replica(&opts.launcher, &legacy_as_replica, legacy_port, 0)
                .await
                .context("starting legacy endpoint")?
                .into_child();

        let backend_metrics = Arc::new(Registry::new());
        let mut pool = ReplicaPool::new(
            opts.launcher.clone(),
            &topology,
            Arc::clone(&backend_metrics),
        )
        .with_probe_timeout(opts.probe_timeout);
        pool.reconcile_pool(&demo_initial_desired())
            .await
            .context("starting initial replicas")?;
        let snapshot = pool.snapshot_cell();
        let pool: SharedPool = Arc::new(tokio::sync::Mutex::new(pool));

        let backend = BackendState::new(
            BackendConfig {
                connection_limit: opts.connection_limit,
                origin: OriginConfig::new(
                    secret.clone(),
                    loopback_peers(),
                    DEFAULT_SKEW_TOLERANCE_SECS,
                )?,
                upstream_timeout: crate::backend::DEFAULT_UPSTREAM_TIMEOUT,
            },
            topology.clone(),
            snapshot,
            Some(Arc::clone(&pool)),
            Arc::clone(&backend_metrics),
        );
        let backend_server = spawn_backend(backend_listener, Arc::clone(&backend))?;

        let roots = tls::load_certs(&pki.ca_cert)?;
        let policy = AuthPolicy::new(roots.clone(), demo_rules(), BTreeSet::new(), secret.clone())?;
        let frontend_metrics = Arc::new(Registry::new());
        let frontend = FrontendState::new(
            topology.clone(),
            policy,
            FrontendConfig {
                upstream_timeout: opts.upstream_timeout,
                seed: opts.seed,
            },
            Arc::clone(&frontend_metrics),
        );
        let tls_config = tls::server_config(
            tls::load_certs(&pki.server_cert)?,
            tls::load_private_key(&pki.server_key)?,
            &roots,
            false,
        )?;
        let frontend_server = spawn_frontend(
            frontend_listener,
            Arc::new(tls_config),
            Arc::clone(&frontend),
        )?;

        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let supervisor = tokio::spawn(run_supervisor(
            Arc::clone(&pool),
            opts.probe_interval,
            async {
                let _ = stop_rx.await;
            },
        ));

        Ok(Stack {
            pki,
            secret,
            topology,
            frontend_addr,
            backend_addr,
            legacy_addr,
            frontend,
            backend,
            pool,
            frontend_metrics,
            backend_metrics,
            _servers: vec![frontend_server, backend_server],
            legacy,
            supervisor: Some((stop_tx, supervisor)),
        })
    }

    pub fn legacy_pid(&self) -> Option<u32> {
        self.legacy.as_ref().and_then(Child::id)
    }

    pub fn frontend_url(&self) -> String {
        format!("https://localhost:{}", self.frontend_addr.port())
    }

    pub fn backend_url(&self) -> String {
        format!("http://{}", self.backend_addr)
    }

    pub fn client_cert(&self) -> ClientCertPaths {
        ClientCertPaths {
            cert: self.pki.client_cert.clone(),
            key: self.pki.client_key.clone(),
        }
    }

    /// Bench configuration for `path` through the frontend with the demo
    /// client certificate.
    pub fn bench_config(&self, path: &str, n: usize, c: usize) -> BenchConfig {
        let mut cfg = BenchConfig::new(format!("{}{}", self.frontend_url(), path), n, c);
        cfg.client_certificate = Some(self.client_cert());
        cfg.ca_certificate = Some(self.pki.ca_cert.clone());
        cfg
    }

    /// Set the desired count and wait until exactly that many replicas are
    /// healthy.
    pub async fn scale(
        &self,
        service: &str,
        replicas: u32,
        deadline: Duration,
    ) -> anyhow::Result<()> {
        self.pool
            .lock()
            .await
            .reconcile_pool(&HashMap::from([(service.to_owned(), replicas)]))
            .await?;
        let cell = self.pool.lock().await.snapshot_cell();
        let until = Instant::now() + deadline;
        loop {
            let snap = cell.load();
            let total = snap.replicas.get(service).map_or(0, Vec::len);
            if total == replicas as usize && snap.healthy(service).len() == replicas as usize {
                return Ok(());
            }
            anyhow::ensure!(
                Instant::now() < until,
                "`{service}` did not reach {replicas} healthy replicas within {deadline:?}"
            );
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    pub async fn shutdown(mut self) {
        self.stop().await;
    }

    async fn stop(&mut self) {
        if let Some((tx, task)) = self.supervisor.take() {
            let _ = tx.send(());
            let _ = task.await;
        }
        if let Some(mut child) = self.legacy.take() {
            let _ = child.kill().await;
        }
        for s in &self._servers {
            s.abort();
        }
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        // the supervisor task stops the replicas; kill_on_drop covers the rest
        if let Some((tx, _)) = self.supervisor.take() {
            let _ = tx.send(());
        }
    }
}

impl MatrixTarget for Stack {
    type Client = HttpClient;

    async fn configure(&self, service: &str, replicas: u32) -> anyhow::Result<()> {
        self.scale(service, replicas, Duration::from_secs(30)).await
    }

    fn client(&self, cell: &ScenarioCell) -> anyhow::Result<HttpClient> {
        let mut cfg = cell.bench_config(&self.frontend_url());
        cfg.client_certificate = Some(self.client_cert());
        cfg.ca_certificate = Some(self.pki.ca_cert.clone());
        HttpClient::new(&cfg)
    }
}

/// The replica sweep: burn service at 4, 6 and 8 replicas.
pub fn replica_sweep(n: usize, c: usize, repetitions: usize) -> Vec<ScenarioCell> {
    [4u32, 6, 8]
        .into_iter()
        .map(|replicas| ScenarioCell {
            label: format!("burn-r{replicas}"),
            service: "burn".into(),
            replicas,
            path: "/burn/work".into(),
            n,
            c,
            repetitions,
            timeout_seconds: 10.0,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<MatrixRow>,
    pub csv: PathBuf,
    pub plot_data: PathBuf,
    pub elapsed: Duration,
}

/// Boot the stack, run `cells` (the replica sweep by default), write CSV and
/// plot data into `out`, tear down.
pub async fn run_demo_scenario(
    opts: StackOptions,
    cells: Option<Vec<ScenarioCell>>,
    out: &Path,
) -> anyhow::Result<SweepReport> {
    let started = Instant::now();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells = cells.unwrap_or_else(|| replica_sweep(10, 5, 20));
    let stack = Stack::launch(opts).await?;
    let rows = bench::run_matrix(&cells, &stack, &bench::TokioClock::new()).await;
    stack.shutdown().await;
    let csv = out.join("replica-sweep.csv");
    let plot_data = out.join("replica-sweep.dat");
    bench::write_matrix_outputs(&rows, Some(&csv), Some(&plot_data))?;
    Ok(SweepReport {
        rows,
        csv,
        plot_data,
        elapsed: started.elapsed(),
    })
}
