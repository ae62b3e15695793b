//! Origin proof shared by the frontend gateway and the backend ingress.
//!
//! The frontend signs `METHOD|PATH|UNIX_SECONDS` with HMAC-SHA256 under a
//! shared secret and sends the hex digest in `X-Origin-Sig`. The backend
//! accepts a request only if the peer address is allowlisted, the signature
//! verifies, and the timestamp is within the skew tolerance.

use std::net::IpAddr;
use std::path::Path;

use hmac::{Hmac, Mac};
use http::HeaderMap;
use ipnet::IpNet;
use sha2::Sha256;
use thiserror::Error;

pub const HEADER_AUTH_DN: &str = "x-auth-dn";
pub const HEADER_AUTH_ROLES: &str = "x-auth-roles";
pub const HEADER_ORIGIN_TIME: &str = "x-origin-time";
pub const HEADER_ORIGIN_SIG: &str = "x-origin-sig";

pub const MIN_SECRET_LEN: usize = 32;
pub const DEFAULT_SKEW_TOLERANCE_SECS: u64 = 60;
pub const SECRET_ENV: &str = "GATEKIT_ORIGIN_SECRET";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error)]
pub enum SecretError {
    #[error("origin secret is {0} bytes, need at least {MIN_SECRET_LEN}")]
    TooShort(usize),
    #[error("no origin secret: pass --origin-secret-file or set {SECRET_ENV}")]
    Missing,
    #[error("reading origin secret {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone)]
pub struct OriginSecret(Vec<u8>);

impl OriginSecret {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, SecretError> {
        let bytes = bytes.into();
        if bytes.len() < MIN_SECRET_LEN {
            return Err(SecretError::TooShort(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// `GATEKIT_ORIGIN_SECRET` wins over the file. Trailing newlines in the
    /// file are not part of the secret.
    pub fn load(file: Option<&Path>) -> Result<Self, SecretError> {
        if let Ok(v) = std::env::var(SECRET_ENV) {
            if !v.is_empty() {
                return Self::new(v.into_bytes());
            }
        }
        let path = file.ok_or(SecretError::Missing)?;
        let mut bytes = std::fs::read(path).map_err(|source| SecretError::Io {
            path: path.display().to_string(),
            source,
        })?;
        while matches!(bytes.last(), Some(b'\n' | b'\r')) {
            bytes.pop();
        }
        Self::new(bytes)
    }
}

impl std::fmt::Debug for OriginSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OriginSecret({} bytes)", self.0.len())
    }
}

fn mac(secret: &OriginSecret, method: &str, path: &str, timestamp: &str) -> HmacSha256 {
    let mut mac =
        HmacSha256::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
    mac.update(method.as_bytes());
    mac.update(b"|");
    mac.update(path.as_bytes());
    mac.update(b"|");
    mac.update(timestamp.as_bytes());
    mac
}

/// Lowercase hex HMAC-SHA256 over `method|path|timestamp`.
pub fn sign(secret: &OriginSecret, method: &str, path: &str, timestamp: u64) -> String {
    hex::encode(
        mac(secret, method, path, &timestamp.to_string())
            .finalize()
            .into_bytes(),
    )
}

#[derive(Debug, Clone)]
pub struct OriginConfig {
    pub secret: OriginSecret,
    pub allowed_peers: Vec<IpNet>,
    pub skew_tolerance_secs: u64,
}

#[derive(Debug, Error)]
pub enum OriginConfigError {
    #[error("clock skew tolerance must be positive")]
    ZeroTolerance,
    #[error("invalid peer prefix `{0}`")]
    BadPeer(String),
}

/// Parse `127.0.0.0/8,::1/128` style lists; bare addresses become host prefixes.
pub fn parse_peer_list(text: &str) -> Result<Vec<IpNet>, OriginConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<IpNet>()
                .or_else(|_| s.parse::<IpAddr>().map(IpNet::from))
                .map_err(|_| OriginConfigError::BadPeer(s.to_owned()))
        })
        .collect()
}

pub fn loopback_peers() -> Vec<IpNet> {
    vec![
        "127.0.0.0/8".parse().expect("static prefix"),
        "::1/128".parse().expect("static prefix"),
    ]
}

impl OriginConfig {
    pub fn new(
        secret: OriginSecret,
        allowed_peers: Vec<IpNet>,
        skew_tolerance_secs: u64,
    ) -> Result<Self, OriginConfigError> {
        if skew_tolerance_secs == 0 {
            return Err(OriginConfigError::ZeroTolerance);
        }
        Ok(Self {
            secret,
            allowed_peers,
            skew_tolerance_secs,
        })
    }

    pub fn peer_allowed(&self, peer: IpAddr) -> bool {
        let peer = match peer {
            IpAddr::V6(v6) => v6.to_ipv4_mapped().map(IpAddr::V4).unwrap_or(peer),
            v4 => v4,
        };
        self.allowed_peers.iter().any(|net| net.contains(&peer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum OriginRejection {
    #[error("peer not allowlisted")]
    PeerNotAllowed,
    #[error("missing origin header")]
    MissingHeader,
    #[error("malformed origin header")]
    Malformed,
    #[error("origin timestamp outside tolerance")]
    Stale,
    #[error("origin signature mismatch")]
    BadSignature,
}

/// Check that a request came through the frontend.
pub fn check_origin(
    method: &str,
    path: &str,
    headers: &HeaderMap,
    peer: IpAddr,
    config: &OriginConfig,
    now_unix: u64,
) -> Result<(), OriginRejection> {
    if !config.peer_allowed(peer) {
        return Err(OriginRejection::PeerNotAllowed);
    }
    let header = |name: &str| -> Result<&str, OriginRejection> {
        let mut values = headers.get_all(name).iter();
        let v = values.next().ok_or(OriginRejection::MissingHeader)?;
        if values.next().is_some() {
            return Err(OriginRejection::Malformed);
        }
        v.to_str().map_err(|_| OriginRejection::Malformed)
    };
    let ts_text = header(HEADER_ORIGIN_TIME)?;
    let sig_text = header(HEADER_ORIGIN_SIG)?;
    if ts_text.is_empty() || !ts_text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(OriginRejection::Malformed);
    }
    let ts: u64 = ts_text.parse().map_err(|_| OriginRejection::Malformed)?;
    if now_unix.abs_diff(ts) > config.skew_tolerance_secs {
        return Err(OriginRejection::Stale);
    }
    let sig = hex::decode(sig_text).map_err(|_| OriginRejection::Malformed)?;
    mac(&config.secret, method, path, ts_text)
        .verify_slice(&sig)
        .map_err(|_| OriginRejection::BadSignature)
}

/// Boolean form of [`check_origin`]; `false` means respond 403.
pub fn verify_frontend_origin(
    method: &str,
    path: &str,
    headers: &HeaderMap,
    peer: IpAddr,
    config: &OriginConfig,
    now_unix: u64,
) -> bool {
    check_origin(method, path, headers, peer, config, now_unix).is_ok()
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
