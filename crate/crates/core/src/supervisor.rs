//! Replica pool: spawns workload replicas as child processes, probes their
//! health, restarts unresponsive ones and converges replica counts to the
//! desired state.
//!
//! Planning ([`plan_reconcile`], [`plan_supervision`]) is pure and works on
//! [`ReplicaInfo`] values; [`ReplicaPool`] executes the plans against real
//! processes and publishes a read-only [`PoolSnapshot`] for the ingress.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use serde::Serialize;
use thiserror::Error;
use tokio::process::{Child, Command};

use crate::metrics::{self, Registry};
use crate::topology::{ServiceSpec, Topology};

pub const FAILURE_THRESHOLD: u32 = 3;
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(1);
pub const STARTUP_DEADLINE: Duration = Duration::from_secs(5);
pub const STOP_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Starting,
    Healthy,
    Unresponsive,
    Stopped,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicaInfo {
    pub id: u64,
    pub service_name: String,
    pub port: u16,
    pub pid: Option<u32>,
    #[serde(skip)]
    pub started_at: Instant,
    pub health: Health,
    pub consecutive_failures: u32,
}

#[derive(Debug)]
pub struct ReplicaHandle {
    pub info: ReplicaInfo,
    child: Option<Child>,
}

impl ReplicaHandle {
    pub fn port(&self) -> u16 {
        self.info.port
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.info.port))
    }

    /// Detach the process from pool bookkeeping.
    pub fn into_child(mut self) -> Option<Child> {
        self.child.take()
    }
}

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("spawning replica of `{service}`: {message}")]
    Spawn { service: String, message: String },
    #[error("replica of `{service}` on port {port} not healthy within {deadline:?}")]
    StartupTimeout {
        service: String,
        port: u16,
        deadline: Duration,
    },
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("desired count {desired} for `{service}` outside [{min}, {max}]")]
    Bounds {
        service: String,
        desired: u32,
        min: u32,
        max: u32,
    },
    #[error("service `{0}` is served by a legacy endpoint and has no local replicas")]
    Legacy(String),
}

/// How replica processes are launched: `<program> workload --kind K --port P --burn-ms B`.
#[derive(Debug, Clone)]
pub struct Launcher {
    pub program: PathBuf,
    pub startup_deadline: Duration,
    pub inherit_stderr: bool,
}

impl Launcher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            startup_deadline: STARTUP_DEADLINE,
            inherit_stderr: false,
        }
    }

    /// The running executable, for the multi-call binary.
    pub fn current_exe() -> std::io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?))
    }
}

pub fn port_is_free(port: u16) -> bool {
    std::net::TcpListener::bind(("127.0.0.1", port)).is_ok()
}

/// A currently unused loopback port.
pub fn free_port() -> std::io::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?
        .local_addr()?
        .port())
}

/// Spawn a replica and wait until its `/healthz` answers.
pub async fn start_replica(
    launcher: &Launcher,
    spec: &ServiceSpec,
    port: u16,
    id: u64,
) -> Result<ReplicaHandle, SupervisorError> {
    if spec.is_legacy() {
        return Err(SupervisorError::Legacy(spec.name.clone()));
    }
    if !port_is_free(port) {
        return Err(SupervisorError::PortInUse(port));
    }
    let mut cmd = Command::new(&launcher.program);
    cmd.arg("workload")
        .arg("--kind")
        .arg(spec.kind.as_str())
        .arg("--port")
        .arg(port.to_string())
        .arg("--burn-ms")
        .arg(spec.burn_ms.unwrap_or(0).to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(if launcher.inherit_stderr {
            Stdio::inherit()
        } else {
            Stdio::null()
        })
        .kill_on_drop(true);
    // SAFETY: prctl is async-signal-safe. The child gets SIGTERM if the
    // spawning thread dies, which covers a hard kill of the supervisor.
    unsafe {
        cmd.pre_exec(|| {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGTERM);
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(|e| SupervisorError::Spawn {
        service: spec.name.clone(),
        message: e.to_string(),
    })?;
    let started_at = Instant::now();
    let pid = child.id();
    let deadline = started_at + launcher.startup_deadline;
    loop {
        if let Ok(Some(status)) = child.try_wait() {
            return Err(SupervisorError::Spawn {
                service: spec.name.clone(),
                message: format!("exited during startup with {status}"),
            });
        }
        if probe(port, Duration::from_millis(250)).await.is_ok() {
            break;
        }
        if Instant::now() >= deadline {
            let _ = child.kill().await;
            return Err(SupervisorError::StartupTimeout {
                service: spec.name.clone(),
                port,
                deadline: launcher.startup_deadline,
            });
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    Ok(ReplicaHandle {
        info: ReplicaInfo {
            id,
            service_name: spec.name.clone(),
            port,
            pid,
            started_at,
            health: Health::Healthy,
            consecutive_failures: 0,
        },
        child: Some(child),
    })
}

/// SIGTERM, wait up to the grace period, then SIGKILL.
pub async fn stop_replica(mut handle: ReplicaHandle) {
    handle.info.health = Health::Stopped;
    let Some(mut child) = handle.child.take() else {
        return;
    };
    if let Some(pid) = child.id() {
        // SAFETY: plain kill(2) on our own child's pid.
        unsafe {
            libc::kill(pid as libc::pid_t, libc::SIGTERM);
        }
    }
    if tokio::time::timeout(STOP_GRACE, child.wait())
        .await
        .is_err()
    {
        let _ = child.kill().await;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HealthResult {
    Ok,
    Failed(String),
}

impl HealthResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, HealthResult::Ok)
    }
}

/// `GET /healthz` with a deadline, on a fresh connection.
pub async fn probe(port: u16, timeout: Duration) -> HealthResult {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let attempt = async {
        let mut stream = tokio::net::TcpStream::connect(("127.0.0.1", port)).await?;
        stream
            .write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
            .await?;
        let mut buf = Vec::with_capacity(256);
        stream.read_to_end(&mut buf).await?;
        Ok::<_, std::io::Error>(buf)
    };
    match tokio::time::timeout(timeout, attempt).await {
        Err(_) => HealthResult::Failed("timeout".into()),
        Ok(Err(e)) => HealthResult::Failed(e.to_string()),
        Ok(Ok(buf)) if buf.starts_with(b"HTTP/1.1 200") => HealthResult::Ok,
        Ok(Ok(buf)) => HealthResult::Failed(format!(
            "unexpected response `{}`",
            String::from_utf8_lossy(&buf[..buf.len().min(32)])
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum PoolAction {
    Start {
        service: String,
    },
    Stop {
        service: String,
        replica_id: u64,
        port: u16,
    },
    Restart {
        service: String,
        replica_id: u64,
        port: u16,
    },
}

/// Newest first: later start time, then higher id.
fn newest_first(a: &ReplicaInfo, b: &ReplicaInfo) -> std::cmp::Ordering {
    b.started_at.cmp(&a.started_at).then(b.id.cmp(&a.id))
}

/// Start or stop replicas of one service so that its count equals `desired`.
/// Surplus replicas are stopped newest first.
pub fn plan_reconcile(service: &str, replicas: &[ReplicaInfo], desired: u32) -> Vec<PoolAction> {
    let current = replicas.len();
    let desired = desired as usize;
    if current < desired {
        return (current..desired)
            .map(|_| PoolAction::Start {
                service: service.to_owned(),
            })
            .collect();
    }
    let mut sorted: Vec<&ReplicaInfo> = replicas.iter().collect();
    sorted.sort_by(|a, b| newest_first(a, b));
    sorted
        .into_iter()
        .take(current - desired)
        .map(|r| PoolAction::Stop {
            service: service.to_owned(),
            replica_id: r.id,
            port: r.port,
        })
        .collect()
}

/// Restart replicas that reached the failure threshold. Only the oldest
/// `desired` replicas are eligible: surplus ones are about to be stopped.
pub fn plan_supervision(
    service: &str,
    replicas: &[ReplicaInfo],
    desired: u32,
    threshold: u32,
) -> Vec<PoolAction> {
    let mut sorted: Vec<&ReplicaInfo> = replicas.iter().collect();
    sorted.sort_by(|a, b| newest_first(b, a));
    sorted
        .into_iter()
        .take(desired as usize)
        .filter(|r| r.health != Health::Stopped && r.consecutive_failures >= threshold)
        .map(|r| PoolAction::Restart {
            service: service.to_owned(),
            replica_id: r.id,
            port: r.port,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicaView {
    pub id: u64,
    pub port: u16,
    pub healthy: bool,
}

impl ReplicaView {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.port))
    }
}

/// What the ingress sees of the pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PoolSnapshot {
    pub replicas: BTreeMap<String, Vec<ReplicaView>>,
    pub desired: BTreeMap<String, u32>,
}

impl PoolSnapshot {
    pub fn healthy(&self, service: &str) -> Vec<&ReplicaView> {
        self.replicas
            .get(service)
            .map(|rs| rs.iter().filter(|r| r.healthy).collect())
            .unwrap_or_default()
    }
}

pub type SnapshotCell = Arc<ArcSwap<PoolSnapshot>>;

pub struct ReplicaPool {
    launcher: Launcher,
    services: HashMap<String, ServiceSpec>,
    replicas: HashMap<String, Vec<ReplicaHandle>>,
    desired: HashMap<String, u32>,
    snapshot: SnapshotCell,
    metrics: Arc<Registry>,
    probe_timeout: Duration,
    threshold: u32,
    next_id: u64,
}

impl ReplicaPool {
    /// Pool for every non-legacy service, desired counts at `min_replicas`.
    /// Nothing is started until [`ReplicaPool::reconcile`].
    pub fn new(launcher: Launcher, topology: &Topology, metrics: Arc<Registry>) -> Self {
        let services: HashMap<String, ServiceSpec> = topology
            .services
            .iter()
            .filter(|s| !s.is_legacy())
            .map(|s| (s.name.clone(), s.clone()))
            .collect();
        let desired = services
            .values()
            .map(|s| (s.name.clone(), s.min_replicas))
            .collect();
        Self {
            launcher,
            services,
            replicas: HashMap::new(),
            desired,
            snapshot: Arc::new(ArcSwap::from_pointee(PoolSnapshot::default())),
            metrics,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            threshold: FAILURE_THRESHOLD,
            next_id: 1,
        }
    }

    pub fn with_probe_timeout(mut self, timeout: Duration) -> Self {
        self.probe_timeout = timeout;
        self
    }

    pub fn snapshot_cell(&self) -> SnapshotCell {
        Arc::clone(&self.snapshot)
    }

    pub fn snapshot(&self) -> Arc<PoolSnapshot> {
        self.snapshot.load_full()
    }

    pub fn desired(&self) -> HashMap<String, u32> {
        self.desired.clone()
    }

    pub fn replicas(&self, service: &str) -> Vec<ReplicaInfo> {
        self.replicas
            .get(service)
            .map(|rs| rs.iter().map(|r| r.info.clone()).collect())
            .unwrap_or_default()
    }

    pub fn current_counts(&self) -> HashMap<String, u32> {
        self.services
            .keys()
            .map(|s| {
                (
                    s.clone(),
                    self.replicas.get(s).map_or(0, |r| r.len() as u32),
                )
            })
            .collect()
    }

    fn check_bounds(&self, service: &str, desired: u32) -> Result<(), SupervisorError> {
        let spec = self
            .services
            .get(service)
            .ok_or_else(|| SupervisorError::UnknownService(service.to_owned()))?;
        if desired < spec.min_replicas || desired > spec.max_replicas {
            return Err(SupervisorError::Bounds {
                service: service.to_owned(),
                desired,
                min: spec.min_replicas,
                max: spec.max_replicas,
            });
        }
        Ok(())
    }

    pub fn set_desired(&mut self, service: &str, desired: u32) -> Result<(), SupervisorError> {
        self.check_bounds(service, desired)?;
        self.desired.insert(service.to_owned(), desired);
        self.publish();
        Ok(())
    }

    /// Update desired counts and converge. Bounds are checked for every
    /// entry before anything changes.
    pub async fn reconcile_pool(
        &mut self,
        desired_counts: &HashMap<String, u32>,
    ) -> Result<Vec<PoolAction>, SupervisorError> {
        for (svc, n) in desired_counts {
            self.check_bounds(svc, *n)?;
        }
        for (svc, n) in desired_counts {
            self.desired.insert(svc.clone(), *n);
        }
        self.reconcile().await
    }

    /// Converge every service to its desired count.
    pub async fn reconcile(&mut self) -> Result<Vec<PoolAction>, SupervisorError> {
        let mut names: Vec<String> = self.services.keys().cloned().collect();
        names.sort();
        let mut applied = Vec::new();
        let mut first_error = None;
        for name in names {
            let desired = self.desired.get(&name).copied().unwrap_or(0);
            let plan = plan_reconcile(&name, &self.replicas(&name), desired);
            for action in plan {
                match self.apply(&action).await {
                    Ok(()) => applied.push(action),
                    Err(e) => {
                        tracing::warn!(service = %name, error = %e, "reconcile action failed");
                        first_error.get_or_insert(e);
                    }
                }
            }
        }
        self.publish();
        match first_error {
            Some(e) if applied.is_empty() => Err(e),
            _ => Ok(applied),
        }
    }

    async fn apply(&mut self, action: &PoolAction) -> Result<(), SupervisorError> {
        match action {
            PoolAction::Start { service } => {
                let spec = self.services[service].clone();
                let handle = self.spawn(&spec).await?;
                self.replicas
                    .entry(service.clone())
                    .or_default()
                    .push(handle);
                Ok(())
            }
            PoolAction::Stop {
                service,
                replica_id,
                ..
            } => {
                if let Some(handle) = self.take(service, *replica_id) {
                    stop_replica(handle).await;
                }
                Ok(())
            }
            PoolAction::Restart {
                service,
                replica_id,
                ..
            } => {
                if let Some(handle) = self.take(service, *replica_id) {
                    stop_replica(handle).await;
                }
                self.metrics
                    .inc(metrics::REPLICA_RESTARTS_TOTAL, &[("service", service)]);
                let spec = self.services[service].clone();
                let handle = self.spawn(&spec).await?;
                self.replicas
                    .entry(service.clone())
                    .or_default()
                    .push(handle);
                Ok(())
            }
        }
    }

    async fn spawn(&mut self, spec: &ServiceSpec) -> Result<ReplicaHandle, SupervisorError> {
        let mut last_err = None;
        // a freshly probed free port can be taken by someone else before the child binds
        for _ in 0..3 {
            let port = free_port().map_err(|e| SupervisorError::Spawn {
                service: spec.name.clone(),
                message: e.to_string(),
            })?;
            let id = self.next_id;
            self.next_id += 1;
            match start_replica(&self.launcher, spec, port, id).await {
                Ok(h) => return Ok(h),
                Err(e @ SupervisorError::PortInUse(_)) | Err(e @ SupervisorError::Spawn { .. }) => {
                    last_err = Some(e)
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("loop ran"))
    }

    fn take(&mut self, service: &str, id: u64) -> Option<ReplicaHandle> {
        let list = self.replicas.get_mut(service)?;
        let idx = list.iter().position(|r| r.info.id == id)?;
        Some(list.remove(idx))
    }

    /// Probe every replica concurrently, restart the ones that crossed the
    /// failure threshold, and top up counts. Returns the applied actions.
    pub async fn supervise_step(&mut self) -> Vec<PoolAction> {
        let timeout = self.probe_timeout;
        let targets: Vec<(String, u64, u16)> = self
            .replicas
            .iter()
            .flat_map(|(svc, rs)| {
                rs.iter()
                    .map(move |r| (svc.clone(), r.info.id, r.info.port))
            })
            .collect();
        let results =
            futures::future::join_all(targets.iter().map(|(_, _, port)| probe(*port, timeout)))
                .await;
        for ((svc, id, _), result) in targets.iter().zip(results) {
            let Some(handle) = self
                .replicas
                .get_mut(svc)
                .and_then(|rs| rs.iter_mut().find(|r| r.info.id == *id))
            else {
                continue;
            };
            let exited = handle
                .child
                .as_mut()
                .map(|c| matches!(c.try_wait(), Ok(Some(_))))
                .unwrap_or(true);
            if result.is_ok() && !exited {
                handle.info.health = Health::Healthy;
                handle.info.consecutive_failures = 0;
            } else {
                handle.info.health = Health::Unresponsive;
                handle.info.consecutive_failures += 1;
                tracing::debug!(service = %svc, port = handle.info.port,
                    failures = handle.info.consecutive_failures, "probe failed");
            }
        }
        self.publish();

        let mut names: Vec<String> = self.services.keys().cloned().collect();
        names.sort();
        let mut applied = Vec::new();
        for name in &names {
            let desired = self.desired.get(name).copied().unwrap_or(0);
            for action in plan_supervision(name, &self.replicas(name), desired, self.threshold) {
                tracing::info!(?action, "supervisor restart");
                match self.apply(&action).await {
                    Ok(()) => applied.push(action),
                    Err(e) => tracing::warn!(service = %name, error = %e, "restart failed"),
                }
            }
        }
        match self.reconcile().await {
            Ok(actions) => applied.extend(actions),
            Err(e) => tracing::warn!(error = %e, "reconcile during supervision failed"),
        }
        self.publish();
        applied
    }

    /// Publish the read-only view and replica gauges.
    pub fn publish(&self) {
        let mut snap = PoolSnapshot::default();
        for name in self.services.keys() {
            let views: Vec<ReplicaView> = self
                .replicas
                .get(name)
                .map(|rs| {
                    rs.iter()
                        .map(|r| ReplicaView {
                            id: r.info.id,
                            port: r.info.port,
                            healthy: r.info.health == Health::Healthy,
                        })
                        .collect()
                })
                .unwrap_or_default();
            let desired = self.desired.get(name).copied().unwrap_or(0);
            self.metrics.set_gauge(
                metrics::REPLICAS_CURRENT,
                &[("service", name)],
                views.len() as f64,
            );
            self.metrics.set_gauge(
                metrics::REPLICAS_DESIRED,
                &[("service", name)],
                f64::from(desired),
            );
            snap.replicas.insert(name.clone(), views);
            snap.desired.insert(name.clone(), desired);
        }
        self.snapshot.store(Arc::new(snap));
    }

    /// Stop every replica.
    pub async fn shutdown(&mut self) {
        let all: Vec<ReplicaHandle> = self.replicas.drain().flat_map(|(_, rs)| rs).collect();
        futures::future::join_all(all.into_iter().map(stop_replica)).await;
        self.publish();
    }
}

pub type SharedPool = Arc<tokio::sync::Mutex<ReplicaPool>>;

/// Run [`ReplicaPool::supervise_step`] every `interval` until `stop` resolves,
/// then shut the pool down.
pub async fn run_supervisor(
    pool: SharedPool,
    interval: Duration,
    stop: impl std::future::Future<Output = ()>,
) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => break,
            _ = ticker.tick() => {
                let actions = pool.lock().await.supervise_step().await;
                for action in actions {
                    tracing::info!(?action, "pool action");
                }
            }
        }
    }
    pool.lock().await.shutdown().await;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(id: u64, age_ms: u64, failures: u32) -> ReplicaInfo {
        ReplicaInfo {
            id,
            service_name: "echo".into(),
            port: 10_000 + id as u16,
            pid: None,
            started_at: Instant::now() - Duration::from_millis(age_ms),
            health: if failures == 0 {
                Health::Healthy
            } else {
                Health::Unresponsive
            },
            consecutive_failures: failures,
        }
    }

    #[test]
    fn scale_up_starts_difference() {
        let rs: Vec<_> = (1..=4).map(|i| info(i, 100, 0)).collect();
        let plan = plan_reconcile("echo", &rs, 6);
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|a| matches!(a, PoolAction::Start { .. })));
    }

    #[test]
    fn fixed_point_is_noop() {
        let rs: Vec<_> = (1..=8).map(|i| info(i, 100, 0)).collect();
        assert!(plan_reconcile("echo", &rs, 8).is_empty());
    }

    #[test]
    fn scale_down_stops_newest() {
        // id i started (1000 - 100*i) ms ago, so ids 5 and 6 are newest
        let rs: Vec<_> = (1..=6).map(|i| info(i, 1000 - 100 * i, 0)).collect();
        let plan = plan_reconcile("echo", &rs, 4);
        let stopped: Vec<u64> = plan
            .iter()
            .map(|a| match a {
                PoolAction::Stop { replica_id, .. } => *replica_id,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(stopped, [6, 5]);
    }

    #[test]
    fn healthy_replicas_need_nothing() {
        let rs: Vec<_> = (1..=3).map(|i| info(i, 100, 0)).collect();
        assert!(plan_supervision("echo", &rs, 3, FAILURE_THRESHOLD).is_empty());
    }

    #[test]
    fn threshold_triggers_restart() {
        let rs = vec![info(1, 300, 2), info(2, 200, 3)];
        let plan = plan_supervision("echo", &rs, 2, FAILURE_THRESHOLD);
        assert_eq!(
            plan,
            [PoolAction::Restart {
                service: "echo".into(),
                replica_id: 2,
                port: 10_002
            }]
        );
    }

    #[test]
    fn surplus_replicas_are_not_restarted() {
        // desired dropped to 1: the newer failing replica is excluded
        let rs = vec![info(1, 300, 0), info(2, 200, 5)];
        assert!(plan_supervision("echo", &rs, 1, FAILURE_THRESHOLD).is_empty());
    }

    #[tokio::test]
    async fn probe_refused_port_fails() {
        let port = free_port().unwrap();
        assert!(!probe(port, Duration::from_millis(200)).await.is_ok());
    }
}
