//! Frontend gateway: terminates mutual TLS, authenticates the client
//! certificate, authorizes per service, injects identity and origin-proof
//! headers and proxies to the resolved upstream.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use http::{HeaderMap, HeaderName, Request, Response, StatusCode, Uri};
use hyper::body::Incoming;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustls_pki_types::CertificateDer;
use tokio::net::TcpListener;
use tokio_rustls::TlsAcceptor;

use crate::auth::{authorize, verify_client_certificate, AuthPolicy, AuthReason, Identity};
use crate::http::{self as h, Body, ServerHandle, UpstreamClient};
use crate::metrics::{self, Registry};
use crate::origin::{self, unix_now, OriginSecret};
use crate::topology::{RouteError, SharedRoutes, Topology};

pub const HEADER_AUTH_REASON: &str = "x-auth-reason";
pub const DEFAULT_UPSTREAM_TIMEOUT: Duration = Duration::from_secs(30);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const AUTH_FAILURES_TOTAL: &str = "auth_failures_total";

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub upstream_timeout: Duration,
    /// Seed for the canary-weight generator; `None` seeds from entropy.
    pub seed: Option<u64>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            upstream_timeout: DEFAULT_UPSTREAM_TIMEOUT,
            seed: None,
        }
    }
}

pub struct FrontendState {
    pub routes: SharedRoutes,
    policy: ArcSwap<AuthPolicy>,
    pub config: FrontendConfig,
    pub metrics: Arc<Registry>,
    client: UpstreamClient,
    rng: Mutex<ChaCha8Rng>,
}

impl FrontendState {
    pub fn new(
        topology: Topology,
        policy: AuthPolicy,
        config: FrontendConfig,
        metrics: Arc<Registry>,
    ) -> Arc<Self> {
        let rng = match config.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        };
        metrics
            .register(AUTH_FAILURES_TOTAL, metrics::MetricKind::Counter)
            .expect("static metric name");
        Arc::new(Self {
            routes: SharedRoutes::new(topology),
            policy: ArcSwap::from_pointee(policy),
            config,
            metrics,
            client: h::upstream_client(),
            rng: Mutex::new(rng),
        })
    }

    pub fn policy(&self) -> Arc<AuthPolicy> {
        self.policy.load_full()
    }

    pub fn reload_policy(&self, policy: AuthPolicy) {
        self.policy.store(Arc::new(policy));
    }

    /// Publish a new topology; returns the routing-table generation.
    pub fn reload_topology(&self, topology: Topology) -> u64 {
        self.routes.reload(topology)
    }

    fn draw(&self) -> f64 {
        self.rng.lock().unwrap().gen::<f64>()
    }
}

fn is_identity_header(name: &HeaderName) -> bool {
    let n = name.as_str();
    n.starts_with("x-auth-") || n.starts_with("x-origin-")
}

/// Replace any client-supplied identity headers with the verified identity
/// and origin proof for `(method, path_and_query, timestamp)`.
pub fn inject_headers(
    headers: &mut HeaderMap,
    method: &str,
    path_and_query: &str,
    identity: &Identity,
    secret: &OriginSecret,
    timestamp: u64,
) -> Result<(), http::header::InvalidHeaderValue> {
    let spoofed: Vec<HeaderName> = headers
        .keys()
        .filter(|k| is_identity_header(k))
        .cloned()
        .collect();
    for name in spoofed {
        headers.remove(name);
    }
    let sig = origin::sign(secret, method, path_and_query, timestamp);
    headers.insert(origin::HEADER_AUTH_DN, identity.subject_dn.parse()?);
    headers.insert(origin::HEADER_AUTH_ROLES, identity.roles.join(",").parse()?);
    headers.insert(origin::HEADER_ORIGIN_TIME, timestamp.into());
    headers.insert(origin::HEADER_ORIGIN_SIG, sig.parse()?);
    Ok(())
}

fn auth_failure(state: &FrontendState, service: &str, reason: AuthReason) -> Response<Body> {
    state
        .metrics
        .inc(AUTH_FAILURES_TOTAL, &[("reason", reason.as_str())]);
    state.metrics.inc(
        metrics::HTTP_REQUESTS_TOTAL,
        &[
            ("service", service),
            ("code", &reason.http_status().to_string()),
        ],
    );
    let status = StatusCode::from_u16(reason.http_status()).expect("401 or 403");
    let mut resp = h::text(status, format!("{reason}\n"));
    resp.headers_mut().insert(
        HEADER_AUTH_REASON,
        reason.as_str().parse().expect("ascii reason"),
    );
    resp
}

/// Handle one request on an established TLS connection. `chain` is the
/// client chain presented in the handshake, leaf first (possibly empty).
pub async fn handle_frontend_request(
    state: Arc<FrontendState>,
    req: Request<Incoming>,
    chain: Arc<Vec<CertificateDer<'static>>>,
) -> Response<Body> {
    let path = req.uri().path().to_owned();
    if path == "/healthz" {
        return h::health_response();
    }
    if path == "/metrics" {
        return h::metrics_response(&state.metrics);
    }
    let table = state.routes.load();
    let label = table
        .match_service(&path)
        .map(|s| s.name.clone())
        .unwrap_or_else(|| "unrouted".into());
    let policy = state.policy();
    let identity = match verify_client_certificate(&chain, &policy, unix_now()) {
        Ok(id) => id,
        Err(reason) => return auth_failure(&state, &label, reason),
    };
    let decision = match table.resolve(&path, state.draw()) {
        Ok(d) => d,
        Err(RouteError::NotFound(_)) => return h::text(StatusCode::NOT_FOUND, "no route\n"),
        Err(e) => return h::text(StatusCode::BAD_REQUEST, format!("{e}\n")),
    };
    let spec = table
        .service(&decision.service_name)
        .expect("resolved service is in the table");
    let verdict = authorize(&identity, spec);
    if !verdict.allowed {
        return auth_failure(&state, &decision.service_name, verdict.reason);
    }
    forward(
        &state,
        req,
        &decision.service_name,
        decision.target.as_str(),
        &identity,
        &policy,
    )
    .await
}

async fn forward(
    state: &FrontendState,
    req: Request<Incoming>,
    service: &str,
    target: &str,
    identity: &Identity,
    policy: &AuthPolicy,
) -> Response<Body> {
    let started = Instant::now();
    state
        .metrics
        .add_gauge(metrics::REQUESTS_INFLIGHT, &[("service", service)], 1.0);
    let pq = h::path_and_query(&req);
    let (mut parts, body) = req.into_parts();
    h::strip_hop_by_hop(&mut parts.headers);
    let prepared = inject_headers(
        &mut parts.headers,
        parts.method.as_str(),
        &pq,
        identity,
        &policy.origin_secret,
        unix_now(),
    )
    .ok()
    .and_then(|()| format!("http://{target}{pq}").parse::<Uri>().ok());
    let resp = match prepared {
        None => h::text(StatusCode::BAD_REQUEST, "request cannot be forwarded\n"),
        Some(uri) => {
            parts.uri = uri;
            let upstream = Request::from_parts(parts, body);
            match tokio::time::timeout(
                state.config.upstream_timeout,
                state.client.request(upstream),
            )
            .await
            {
                Ok(Ok(resp)) => {
                    let (mut parts, body) = resp.into_parts();
                    h::strip_hop_by_hop(&mut parts.headers);
                    Response::from_parts(parts, h::boxed(body))
                }
                Ok(Err(e)) => {
                    tracing::warn!(service, target, error = %e, "upstream unreachable");
                    state.metrics.inc(
                        metrics::HTTP_REQUEST_ERRORS_TOTAL,
                        &[("service", service), ("reason", "bad_gateway")],
                    );
                    h::text(StatusCode::BAD_GATEWAY, "upstream unreachable\n")
                }
                Err(_) => {
                    state.metrics.inc(
                        metrics::HTTP_REQUEST_ERRORS_TOTAL,
                        &[("service", service), ("reason", "timeout")],
                    );
                    h::text(StatusCode::GATEWAY_TIMEOUT, "upstream timed out\n")
                }
            }
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

/// TLS accept loop.
pub fn spawn_frontend(
    listener: TcpListener,
    tls: Arc<rustls::ServerConfig>,
    state: Arc<FrontendState>,
) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let acceptor = TlsAcceptor::from(tls);
    let task = tokio::spawn(async move {
        loop {
            let (stream, peer) = match listener.accept().await {
                Ok(conn) => conn,
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(10)).await;
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let acceptor = acceptor.clone();
            let state = Arc::clone(&state);
            tokio::spawn(async move {
                let tls =
                    match tokio::time::timeout(HANDSHAKE_TIMEOUT, acceptor.accept(stream)).await {
                        Ok(Ok(tls)) => tls,
                        Ok(Err(e)) => {
                            tracing::debug!(%peer, error = %e, "tls handshake failed");
                            return;
                        }
                        Err(_) => {
                            tracing::debug!(%peer, "tls handshake timed out");
                            return;
                        }
                    };
                let chain: Arc<Vec<CertificateDer<'static>>> = Arc::new(
                    tls.get_ref()
                        .1
                        .peer_certificates()
                        .map(|c| c.iter().map(|d| d.clone().into_owned()).collect())
                        .unwrap_or_default(),
                );
                h::serve_stream(tls, move |req| {
                    handle_frontend_request(Arc::clone(&state), req, Arc::clone(&chain))
                })
                .await;
            });
        }
    });
    Ok(ServerHandle::new(addr, task))
}

/// Files the frontend reloads on SIGHUP or when `--watch` sees a change.
#[derive(Debug, Clone)]
pub struct ReloadSources {
    pub topology: PathBuf,
    pub auth_policy: PathBuf,
    pub secret_file: Option<PathBuf>,
}

impl ReloadSources {
    /// Reload both files; a broken file leaves the running configuration in place.
    pub fn reload(&self, state: &FrontendState) -> anyhow::Result<u64> {
        let topology = crate::topology::load_topology_file(&self.topology)?;
        let secret = OriginSecret::load(self.secret_file.as_deref())?;
        let policy = AuthPolicy::from_file(&self.auth_policy, secret)?;
        state.reload_policy(policy);
        Ok(state.reload_topology(topology))
    }

    fn stamp(&self) -> Vec<Option<std::time::SystemTime>> {
        [&self.topology, &self.auth_policy]
            .iter()
            .map(|p| std::fs::metadata(p).and_then(|m| m.modified()).ok())
            .collect()
    }

    /// Reload whenever a watched file's modification time changes.
    pub async fn watch(self, state: Arc<FrontendState>, every: Duration) {
        let mut last = self.stamp();
        let mut ticker = tokio::time::interval(every);
        loop {
            ticker.tick().await;
            let now = self.stamp();
            if now != last {
                last = now;
                match self.reload(&state) {
                    Ok(generation) => tracing::info!(generation, "configuration reloaded"),
                    Err(e) => {
                        tracing::warn!(error = %e, "reload rejected; keeping current configuration")
                    }
                }
            }
        }
    }
}
