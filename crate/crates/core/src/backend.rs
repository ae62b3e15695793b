//! Backend ingress: connection admission, origin verification and
//! round-robin dispatch to healthy local replicas.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use http::{Method, Request, Response, StatusCode, Uri};
use http_body_util::BodyExt;
use hyper::body::Incoming;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;

use crate::admission::{admit_connection, Admission, AdmissionState};
use crate::http::{self as h, Body, ServerHandle, UpstreamClient};
use crate::metrics::{self, Registry};
use crate::origin::{check_origin, unix_now, OriginConfig};
use crate::supervisor::{PoolSnapshot, SharedPool, SnapshotCell, SupervisorError};
use crate::topology::{RoutingTable, SharedRoutes, Topology};

pub const DEFAULT_UPSTREAM_TIMEOUT: Duration = Duration::from_secs(30);
pub const ADMIN_PREFIX: &str = "/admin/desired";

const REJECT_RESPONSE: &[u8] = b"HTTP/1.1 503 Service Unavailable\r\n\
content-type: text/plain; charset=utf-8\r\n\
content-length: 25\r\n\
connection: close\r\n\r\n\
connection limit reached\n";

/// Per-service round-robin cursors.
#[derive(Debug, Default)]
pub struct RoundRobin {
    cursors: Mutex<HashMap<String, usize>>,
}

impl RoundRobin {
    pub fn next(&self, service: &str, len: usize) -> usize {
        let mut cursors = self.cursors.lock().unwrap();
        let c = cursors.entry(service.to_owned()).or_insert(0);
        let idx = *c % len;
        *c = c.wrapping_add(1);
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchError {
    NotFound,
    NoHealthyReplica(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchTarget {
    pub service: String,
    pub replica_id: u64,
    pub addr: SocketAddr,
}

/// Pick a healthy replica of the service owning `path`.
pub fn dispatch(
    path: &str,
    table: &RoutingTable,
    pool: &PoolSnapshot,
    rr: &RoundRobin,
) -> Result<DispatchTarget, DispatchError> {
    let spec = table.match_service(path).ok_or(DispatchError::NotFound)?;
    let healthy = pool.healthy(&spec.name);
    if healthy.is_empty() {
        return Err(DispatchError::NoHealthyReplica(spec.name.clone()));
    }
    let r = healthy[rr.next(&spec.name, healthy.len())];
    Ok(DispatchTarget {
        service: spec.name.clone(),
        replica_id: r.id,
        addr: r.addr(),
    })
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub connection_limit: usize,
    pub origin: OriginConfig,
    pub upstream_timeout: Duration,
}

pub struct BackendState {
    pub config: BackendConfig,
    pub routes: Arc<SharedRoutes>,
    pub snapshot: SnapshotCell,
    pub admission: Arc<AdmissionState>,
    pub metrics: Arc<Registry>,
    pool: Option<SharedPool>,
    client: UpstreamClient,
    rr: RoundRobin,
}

impl BackendState {
    pub fn new(
        config: BackendConfig,
        topology: Topology,
        snapshot: SnapshotCell,
        pool: Option<SharedPool>,
        metrics: Arc<Registry>,
    ) -> Arc<Self> {
        let admission = AdmissionState::new(config.connection_limit);
        metrics
            .register(
                metrics::CONNECTIONS_REJECTED_TOTAL,
                metrics::MetricKind::Counter,
            )
            .expect("static metric name");
        Arc::new(Self {
            config,
            routes: Arc::new(SharedRoutes::new(topology)),
            snapshot,
            admission,
            metrics,
            pool,
            client: h::upstream_client(),
            rr: RoundRobin::default(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DesiredRequest {
    pub replicas: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolCounts {
    pub desired: std::collections::BTreeMap<String, u32>,
    pub current: std::collections::BTreeMap<String, u32>,
}

/// Handle one admitted request.
pub async fn handle_backend_request(
    state: Arc<BackendState>,
    req: Request<Incoming>,
    peer: IpAddr,
) -> Response<Body> {
    let path = req.uri().path().to_owned();
    if path == "/healthz" {
        return h::health_response();
    }
    if path == "/metrics" {
        return h::metrics_response(&state.metrics);
    }
    let pq = h::path_and_query(&req);
    if let Err(rejection) = check_origin(
        req.method().as_str(),
        &pq,
        req.headers(),
        peer,
        &state.config.origin,
        unix_now(),
    ) {
        tracing::debug!(%peer, path = %pq, reason = %rejection, "origin rejected");
        return h::text(StatusCode::FORBIDDEN, format!("forbidden: {rejection}\n"));
    }
    if path == ADMIN_PREFIX || path.starts_with(&format!("{ADMIN_PREFIX}/")) {
        return admin(&state, req).await;
    }
    let table = state.routes.load();
    let snapshot = state.snapshot.load();
    let target = match dispatch(&path, &table, &snapshot, &state.rr) {
        Ok(t) => t,
        Err(DispatchError::NotFound) => return h::text(StatusCode::NOT_FOUND, "no route\n"),
        Err(DispatchError::NoHealthyReplica(service)) => {
            state.metrics.inc(
                metrics::HTTP_REQUEST_ERRORS_TOTAL,
                &[("service", &service), ("reason", "no_healthy_replica")],
            );
            state.metrics.inc(
                metrics::HTTP_REQUESTS_TOTAL,
                &[("service", &service), ("code", "503")],
            );
            return h::text(StatusCode::SERVICE_UNAVAILABLE, "no healthy replica\n");
        }
    };
    proxy(&state, req, &pq, target).await
}

async fn proxy(
    state: &BackendState,
    req: Request<Incoming>,
    pq: &str,
    target: DispatchTarget,
) -> Response<Body> {
    let service = target.service.as_str();
    let started = Instant::now();
    state
        .metrics
        .add_gauge(metrics::REQUESTS_INFLIGHT, &[("service", service)], 1.0);
    let (mut parts, body) = req.into_parts();
    h::strip_hop_by_hop(&mut parts.headers);
    parts.uri = match format!("http://{}{}", target.addr, pq).parse::<Uri>() {
        Ok(u) => u,
        Err(_) => {
            state
                .metrics
                .add_gauge(metrics::REQUESTS_INFLIGHT, &[("service", service)], -1.0);
            return h::text(StatusCode::BAD_REQUEST, "bad request target\n");
        }
    };
    let upstream = Request::from_parts(parts, body);
    let result = tokio::time::timeout(
        state.config.upstream_timeout,
        state.client.request(upstream),
    )
    .await;
    let resp = match result {
        Ok(Ok(resp)) => {
            let (mut parts, body) = resp.into_parts();
            h::strip_hop_by_hop(&mut parts.headers);
            Response::from_parts(parts, h::boxed(body))
        }
        Ok(Err(e)) => {
            tracing::warn!(service, replica = target.replica_id, error = %e, "replica unreachable");
            state.metrics.inc(
                metrics::HTTP_REQUEST_ERRORS_TOTAL,
                &[("service", service), ("reason", "bad_gateway")],
            );
            h::text(StatusCode::BAD_GATEWAY, "replica unreachable\n")
        }
        Err(_) => {
            state.metrics.inc(
                metrics::HTTP_REQUEST_ERRORS_TOTAL,
                &[("service", service), ("reason", "timeout")],
            );
            h::text(StatusCode::GATEWAY_TIMEOUT, "replica timed out\n")
        }
    };
    let code = resp.status().as_u16().to_string();
    state.metrics.inc(
        metrics::HTTP_REQUESTS_TOTAL,
        &[("service", service), ("code", &code)],
    );
    state.metrics.observe(
        metrics::HTTP_REQUEST_DURATION_SECONDS,
        &[("service", service)],
        started.elapsed().as_secs_f64(),
    );
    state
        .metrics
        .add_gauge(metrics::REQUESTS_INFLIGHT, &[("service", service)], -1.0);
    resp
}

async fn admin(state: &BackendState, req: Request<Incoming>) -> Response<Body> {
    let path = req.uri().path().to_owned();
    match (req.method().clone(), path.strip_prefix(ADMIN_PREFIX)) {
        (Method::GET, Some("")) => {
            let snap = state.snapshot.load();
            h::json(
                StatusCode::OK,
                &PoolCounts {
                    desired: snap.desired.clone(),
                    current: snap
                        .replicas
                        .iter()
                        .map(|(k, v)| (k.clone(), v.len() as u32))
                        .collect(),
                },
            )
        }
        (Method::POST, Some(rest)) if rest.len() > 1 => {
            let service = rest[1..].to_owned();
            let Some(pool) = &state.pool else {
                return h::text(StatusCode::NOT_IMPLEMENTED, "no replica pool attached\n");
            };
            let body = match req.into_body().collect().await {
                Ok(b) => b.to_bytes(),
                Err(_) => return h::text(StatusCode::BAD_REQUEST, "unreadable body\n"),
            };
            let want: DesiredRequest = match serde_json::from_slice(&body) {
                Ok(w) => w,
                Err(e) => return h::text(StatusCode::BAD_REQUEST, format!("{e}\n")),
            };
            match pool.lock().await.set_desired(&service, want.replicas) {
                Ok(()) => h::json(StatusCode::OK, &want),
                Err(e @ SupervisorError::UnknownService(_)) => {
                    h::text(StatusCode::NOT_FOUND, format!("{e}\n"))
                }
                Err(e) => h::text(StatusCode::UNPROCESSABLE_ENTITY, format!("{e}\n")),
            }
        }
        _ => h::text(StatusCode::NOT_FOUND, "no such admin endpoint\n"),
    }
}

/// Accept loop with admission control. Rejected connections get a raw 503
/// and are closed without being read.
pub fn spawn_backend(
    listener: TcpListener,
    state: Arc<BackendState>,
) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        loop {
            let (mut stream, peer) = match listener.accept().await {
                Ok(conn) => conn,
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(10)).await;
                    continue;
                }
            };
            match admit_connection(&state.admission) {
                Admission::Reject => {
                    state.metrics.inc(metrics::CONNECTIONS_REJECTED_TOTAL, &[]);
                    tokio::spawn(async move {
                        let _ = stream.write_all(REJECT_RESPONSE).await;
                        let _ = stream.shutdown().await;
                    });
                }
                Admission::Admit(guard) => {
                    let _ = stream.set_nodelay(true);
                    let state = Arc::clone(&state);
                    tokio::spawn(async move {
                        let _guard = guard;
                        h::serve_stream(stream, move |req| {
                            handle_backend_request(Arc::clone(&state), req, peer.ip())
                        })
                        .await;
                    });
                }
            }
        }
    });
    Ok(ServerHandle::new(addr, task))
}

/// Origin-signed client for the admin endpoint, used as the autoscaler's actuator.
pub struct AdminClient {
    base: String,
    secret: crate::origin::OriginSecret,
    http: reqwest::Client,
}

impl AdminClient {
    pub fn new(base: impl Into<String>, secret: crate::origin::OriginSecret) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            secret,
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("reqwest client"),
        }
    }

    fn signed(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let ts = unix_now();
        let sig = crate::origin::sign(&self.secret, method.as_str(), path, ts);
        self.http
            .request(method, format!("{}{}", self.base, path))
            .header(crate::origin::HEADER_ORIGIN_TIME, ts.to_string())
            .header(crate::origin::HEADER_ORIGIN_SIG, sig)
    }

    pub async fn counts(&self) -> anyhow::Result<PoolCounts> {
        let resp = self
            .signed(reqwest::Method::GET, ADMIN_PREFIX)
            .send()
            .await?;
        anyhow::ensure!(
            resp.status().is_success(),
            "admin GET returned {}",
            resp.status()
        );
        Ok(resp.json().await?)
    }

    pub async fn set_desired(&self, service: &str, replicas: u32) -> anyhow::Result<()> {
        let path = format!("{ADMIN_PREFIX}/{service}");
        let resp = self
            .signed(reqwest::Method::POST, &path)
            .json(&DesiredRequest { replicas })
            .send()
            .await?;
        let status = resp.status();
        anyhow::ensure!(
            status.is_success(),
            "admin POST returned {status}: {}",
            resp.text().await.unwrap_or_default().trim()
        );
        Ok(())
    }
}

impl crate::autoscaler::Actuator for AdminClient {
    async fn apply(&self, service: &str, desired: u32) -> anyhow::Result<()> {
        self.set_desired(service, desired).await
    }

    async fn current(&self) -> anyhow::Result<HashMap<String, u32>> {
        Ok(self.counts().await?.current.into_iter().collect())
    }
}
