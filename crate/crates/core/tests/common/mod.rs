#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gatekit::auth::{AuthPolicy, DnPattern, DnRoleRule};
use gatekit::frontend::{spawn_frontend, FrontendConfig, FrontendState};
use gatekit::http::{self as h, ServerHandle};
use gatekit::metrics::Registry;
use gatekit::origin::OriginSecret;
use gatekit::supervisor::Launcher;
use gatekit::tls::{self, CertAuthority, IssuedCert};
use gatekit::topology::{Endpoint, ReleaseTrack, ServiceSpec, Topology, WorkloadKind};
use http::{HeaderMap, StatusCode};
use tokio::net::TcpListener;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_gatekit"))
}

pub fn launcher() -> Launcher {
    Launcher::new(bin())
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn secret() -> OriginSecret {
    OriginSecret::new(b"0123456789abcdef0123456789abcdef-test".to_vec()).unwrap()
}

pub fn service(name: &str, prefix: &str, target: SocketAddr) -> ServiceSpec {
    ServiceSpec {
        name: name.into(),
        path_prefix: prefix.into(),
        tracks: vec![ReleaseTrack {
            label: "stable".into(),
            weight: 1,
            endpoints: vec![Endpoint::parse(&target.to_string()).unwrap()],
        }],
        legacy_endpoint: None,
        min_replicas: 1,
        max_replicas: 8,
        burn_ms: None,
        kind: WorkloadKind::Echo,
        required_roles: BTreeSet::new(),
    }
}

/// What an upstream stub saw.
#[derive(Debug, Clone)]
pub struct Seen {
    pub method: String,
    pub path: String,
    pub headers: HeaderMap,
    pub peer: SocketAddr,
}

/// Upstream that records every request and answers 200 with the path.
pub struct Recorder {
    pub server: ServerHandle,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    pub count: Arc<AtomicUsize>,
}

impl Recorder {
    pub async fn start() -> Recorder {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let count = Arc::new(AtomicUsize::new(0));
        let (s, c) = (Arc::clone(&seen), Arc::clone(&count));
        let server = h::spawn_plain_server(listener, move |req, peer| {
            let (s, c) = (Arc::clone(&s), Arc::clone(&c));
            async move {
                c.fetch_add(1, Ordering::SeqCst);
                let path = h::path_and_query(&req);
                s.lock().unwrap().push(Seen {
                    method: req.method().to_string(),
                    path: path.clone(),
                    headers: req.headers().clone(),
                    peer,
                });
                h::text(StatusCode::OK, path)
            }
        })
        .unwrap();
        Recorder {
            server,
            seen,
            count,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.addr
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

pub fn ops_rule() -> DnRoleRule {
    DnRoleRule {
        pattern: DnPattern::new("CN=ops-*").unwrap(),
        role: "operator".into(),
    }
}

/// In-process frontend with its own CA, in front of arbitrary upstreams.
pub struct Gateway {
    pub ca: CertAuthority,
    pub ca_pem: String,
    pub server: ServerHandle,
    pub state: Arc<FrontendState>,
    pub metrics: Arc<Registry>,
}

impl Gateway {
    pub async fn start(
        topology: Topology,
        rules: Vec<DnRoleRule>,
        revoked: BTreeSet<String>,
        upstream_timeout: Duration,
    ) -> Gateway {
        let ca = CertAuthority::generate("Gateway Test Root").unwrap();
        let server_cert = ca.issue_server().unwrap();
        let roots = vec![ca.cert_der()];
        let policy = AuthPolicy::new(roots.clone(), rules, revoked, secret()).unwrap();
        let metrics = Arc::new(Registry::new());
        let state = FrontendState::new(
            topology,
            policy,
            FrontendConfig {
                upstream_timeout,
                seed: Some(7),
            },
            Arc::clone(&metrics),
        );
        let tls_config = tls::server_config(
            vec![server_cert.cert_der.clone()],
            server_cert.private_key(),
            &roots,
            false,
        )
        .unwrap();
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let server = spawn_frontend(listener, Arc::new(tls_config), Arc::clone(&state)).unwrap();
        Gateway {
            ca_pem: ca.cert_pem(),
            ca,
            server,
            state,
            metrics,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("https://localhost:{}{}", self.server.addr.port(), path)
    }

    pub fn client(&self, identity: Option<&IssuedCert>) -> reqwest::Client {
        https_client(
            &self.ca_pem,
            identity.map(IssuedCert::identity_pem).as_deref(),
        )
    }
}

pub fn https_client(ca_pem: &str, identity_pem: Option<&str>) -> reqwest::Client {
    let mut b = reqwest::Client::builder()
        .use_rustls_tls()
        .timeout(Duration::from_secs(20))
        .add_root_certificate(reqwest::Certificate::from_pem(ca_pem.as_bytes()).unwrap());
    if let Some(pem) = identity_pem {
        b = b.identity(reqwest::Identity::from_pem(pem.as_bytes()).unwrap());
    }
    b.build().unwrap()
}

/// Independent HMAC-SHA256 (RFC 2104 over sha2) for checking origin signatures.
pub fn hmac_sha256_hex(key: &[u8], message: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    const BLOCK: usize = 64;
    let mut k = if key.len() > BLOCK {
        Sha256::digest(key).to_vec()
    } else {
        key.to_vec()
    };
    k.resize(BLOCK, 0);
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new()
        .chain_update(&ipad)
        .chain_update(message)
        .finalize();
    let outer = Sha256::new()
        .chain_update(&opad)
        .chain_update(inner)
        .finalize();
    outer.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn process_alive(pid: u32) -> bool {
    // a zombie still has a /proc entry; treat it as gone
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat
            .rsplit_once(')')
            .map(|(_, rest)| rest.trim_start().starts_with('Z'))
            .unwrap_or(false),
        Err(_) => false,
    }
}

pub async fn wait_until<F: FnMut() -> bool>(deadline: Duration, mut f: F) -> bool {
    let until = std::time::Instant::now() + deadline;
    while std::time::Instant::now() < until {
        if f() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    f()
}
