//! Stub backend services run as replica processes: `echo`, `burn` and
//! `stateful`, plus the `/healthz` probe target and `/wedge` test hooks.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use http::{Method, Request, Response, StatusCode};
use http_body_util::BodyExt;
use hyper::body::Incoming;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::Notify;

use crate::http::{self as h, Body, ServerHandle};
use crate::metrics::{self, Registry};
use crate::topology::WorkloadKind;

pub const HEADER_REPLICA: &str = "x-replica";

#[derive(Debug, Clone)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    pub burn_ms: u64,
}

pub struct WorkloadState {
    config: WorkloadConfig,
    replica_id: String,
    wedged: AtomicBool,
    unwedged: Notify,
    // One burn at a time: each replica models a single CPU.
    cpu: Arc<Mutex<()>>,
    store: Mutex<HashMap<String, bytes::Bytes>>,
    metrics: Registry,
}

impl WorkloadState {
    pub fn new(config: WorkloadConfig, replica_id: impl Into<String>) -> Arc<Self> {
        Arc::new(Self {
            config,
            replica_id: replica_id.into(),
            wedged: AtomicBool::new(false),
            unwedged: Notify::new(),
            cpu: Arc::new(Mutex::new(())),
            store: Mutex::new(HashMap::new()),
            metrics: Registry::new(),
        })
    }

    pub fn is_wedged(&self) -> bool {
        self.wedged.load(Ordering::Acquire)
    }

    async fn wait_unwedged(&self) {
        loop {
            let notified = self.unwedged.notified();
            if !self.is_wedged() {
                return;
            }
            notified.await;
        }
    }
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: valid pointer to a timespec; CLOCK_THREAD_CPUTIME_ID is always supported on Linux.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Spin until this thread has consumed `amount` of CPU time. Returns the CPU
/// time actually burned.
pub fn burn_cpu(amount: Duration) -> Duration {
    let start = thread_cpu_time();
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    loop {
        for _ in 0..1_000 {
            x = x.rotate_left(7).wrapping_mul(0x2545_f491_4f6c_dd1d);
        }
        std::hint::black_box(x);
        let used = thread_cpu_time().saturating_sub(start);
        if used >= amount {
            return used;
        }
    }
}

#[derive(Serialize)]
struct EchoReply {
    replica: String,
    method: String,
    path: String,
    headers: BTreeMap<String, String>,
    body: String,
}

#[derive(Serialize)]
struct BurnReply {
    replica: String,
    burn_ms: u64,
    cpu_seconds: f64,
    queued_seconds: f64,
    elapsed_seconds: f64,
}

fn with_replica(mut resp: Response<Body>, id: &str) -> Response<Body> {
    if let Some(v) = h::header_value(id) {
        resp.headers_mut().insert(HEADER_REPLICA, v);
    }
    resp
}

/// Serve one workload request.
pub async fn handle_workload_request(
    state: Arc<WorkloadState>,
    req: Request<Incoming>,
) -> Response<Body> {
    let path = req.uri().path().to_owned();
    if req.method() == Method::POST && path == "/unwedge" {
        state.wedged.store(false, Ordering::Release);
        state.unwedged.notify_waiters();
        return h::text(StatusCode::OK, "unwedged");
    }
    state.wait_unwedged().await;
    if req.method() == Method::POST && path == "/wedge" {
        state.wedged.store(true, Ordering::Release);
        return h::text(StatusCode::OK, "wedged");
    }
    if path == "/healthz" {
        return with_replica(h::health_response(), &state.replica_id);
    }
    if path == "/metrics" {
        return h::metrics_response(&state.metrics);
    }
    let started = Instant::now();
    let kind = state.config.kind;
    let resp = match kind {
        WorkloadKind::Echo => echo(&state, req).await,
        WorkloadKind::Burn => burn(&state).await,
        WorkloadKind::Stateful => stateful(&state, req).await,
    };
    let code = resp.status().as_u16().to_string();
    state.metrics.inc(
        metrics::HTTP_REQUESTS_TOTAL,
        &[("service", kind.as_str()), ("code", &code)],
    );
    state.metrics.observe(
        metrics::HTTP_REQUEST_DURATION_SECONDS,
        &[("service", kind.as_str())],
        started.elapsed().as_secs_f64(),
    );
    with_replica(resp, &state.replica_id)
}

async fn echo(state: &WorkloadState, req: Request<Incoming>) -> Response<Body> {
    let (parts, body) = req.into_parts();
    let body = match body.collect().await {
        Ok(b) => b.to_bytes(),
        Err(_) => return h::text(StatusCode::BAD_REQUEST, "unreadable body"),
    };
    let headers = parts
        .headers
        .iter()
        .map(|(k, v)| {
            (
                k.as_str().to_owned(),
                String::from_utf8_lossy(v.as_bytes()).into_owned(),
            )
        })
        .collect();
    h::json(
        StatusCode::OK,
        &EchoReply {
            replica: state.replica_id.clone(),
            method: parts.method.to_string(),
            path: parts
                .uri
                .path_and_query()
                .map(|p| p.as_str().to_owned())
                .unwrap_or_default(),
            headers,
            body: String::from_utf8_lossy(&body).into_owned(),
        },
    )
}

async fn burn(state: &WorkloadState) -> Response<Body> {
    let amount = Duration::from_millis(state.config.burn_ms);
    let cpu = Arc::clone(&state.cpu);
    let arrived = Instant::now();
    let result = tokio::task::spawn_blocking(move || {
        let _core = cpu.lock().unwrap_or_else(|p| p.into_inner());
        let queued = arrived.elapsed();
        (queued, burn_cpu(amount))
    })
    .await;
    match result {
        Ok((queued, used)) => h::json(
            StatusCode::OK,
            &BurnReply {
                replica: state.replica_id.clone(),
                burn_ms: state.config.burn_ms,
                cpu_seconds: used.as_secs_f64(),
                queued_seconds: queued.as_secs_f64(),
                elapsed_seconds: arrived.elapsed().as_secs_f64(),
            },
        ),
        Err(_) => h::text(StatusCode::INTERNAL_SERVER_ERROR, "burn task failed"),
    }
}

async fn stateful(state: &WorkloadState, req: Request<Incoming>) -> Response<Body> {
    let key = req.uri().path().to_owned();
    match *req.method() {
        Method::GET => match state.store.lock().unwrap().get(&key) {
            Some(v) => Response::builder()
                .status(StatusCode::OK)
                .body(h::full(v.clone()))
                .expect("static response parts"),
            None => h::text(StatusCode::NOT_FOUND, "no such key"),
        },
        Method::PUT | Method::POST => {
            let body = match req.into_body().collect().await {
                Ok(b) => b.to_bytes(),
                Err(_) => return h::text(StatusCode::BAD_REQUEST, "unreadable body"),
            };
            let created = state.store.lock().unwrap().insert(key, body).is_none();
            if created {
                h::text(StatusCode::CREATED, "created")
            } else {
                h::text(StatusCode::OK, "updated")
            }
        }
        Method::DELETE => match state.store.lock().unwrap().remove(&key) {
            Some(_) => h::text(StatusCode::OK, "deleted"),
            None => h::text(StatusCode::NOT_FOUND, "no such key"),
        },
        _ => h::text(StatusCode::METHOD_NOT_ALLOWED, "method not allowed"),
    }
}

/// Serve a workload on `listener` inside the current runtime.
pub fn spawn_workload(
    listener: TcpListener,
    config: WorkloadConfig,
) -> std::io::Result<ServerHandle> {
    let addr: SocketAddr = listener.local_addr()?;
    let state = WorkloadState::new(config, addr.port().to_string());
    h::spawn_plain_server(listener, move |req, _peer| {
        handle_workload_request(Arc::clone(&state), req)
    })
}
