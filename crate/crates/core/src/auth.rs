//! Client-certificate authentication and per-service authorization.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rustls_pki_types::{CertificateDer, TrustAnchor, UnixTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use x509_cert::der::Decode;

use crate::origin::OriginSecret;
use crate::topology::ServiceSpec;

/// Verified client identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Identity {
    /// RFC 4514 string, most specific RDN first.
    pub subject_dn: String,
    pub common_name: String,
    pub issuer_dn: String,
    pub roles: Vec<String>,
    /// Unix seconds.
    pub not_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthReason {
    Ok,
    NoCert,
    UntrustedIssuer,
    Expired,
    Revoked,
    NoRole,
}

impl AuthReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthReason::Ok => "ok",
            AuthReason::NoCert => "no_cert",
            AuthReason::UntrustedIssuer => "untrusted_issuer",
            AuthReason::Expired => "expired",
            AuthReason::Revoked => "revoked",
            AuthReason::NoRole => "no_role",
        }
    }

    /// 401 for authentication failures, 403 for authorization denial.
    pub fn http_status(self) -> u16 {
        match self {
            AuthReason::Ok => 200,
            AuthReason::NoRole => 403,
            _ => 401,
        }
    }
}

impl fmt::Display for AuthReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::error::Error for AuthReason {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuthDecision {
    pub allowed: bool,
    pub reason: AuthReason,
}

impl AuthDecision {
    fn allow() -> Self {
        Self {
            allowed: true,
            reason: AuthReason::Ok,
        }
    }

    fn deny(reason: AuthReason) -> Self {
        debug_assert_ne!(reason, AuthReason::Ok);
        Self {
            allowed: false,
            reason,
        }
    }
}

/// A DN glob where `*` matches any run of characters and everything else is literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DnPattern(String);

impl DnPattern {
    pub fn new(pattern: &str) -> Result<Self, PolicyError> {
        if pattern.is_empty() {
            return Err(PolicyError::BadPattern("empty pattern".into()));
        }
        if pattern.chars().any(char::is_control) {
            return Err(PolicyError::BadPattern(format!(
                "control character in `{}`",
                pattern.escape_debug()
            )));
        }
        Ok(Self(pattern.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, dn: &str) -> bool {
        glob_match(self.0.as_bytes(), dn.as_bytes())
    }
}

impl TryFrom<String> for DnPattern {
    type Error = PolicyError;
    fn try_from(s: String) -> Result<Self, PolicyError> {
        DnPattern::new(&s)
    }
}

impl From<DnPattern> for String {
    fn from(p: DnPattern) -> String {
        p.0
    }
}

/// Linear-time `*` glob with single-star backtracking.
fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if p < pattern.len() && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnRoleRule {
    pub pattern: DnPattern,
    pub role: String,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid DN pattern: {0}")]
    BadPattern(String),
    #[error("policy has no trusted roots")]
    NoRoots,
    #[error("trusted root {path}: {message}")]
    BadRoot { path: String, message: String },
    #[error("rule role must be nonempty")]
    EmptyRole,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// On-disk form of the auth policy. Root paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthPolicyDocument {
    pub trusted_roots: Vec<PathBuf>,
    #[serde(default)]
    pub dn_role_rules: Vec<DnRoleRule>,
    #[serde(default)]
    pub revoked_dns: BTreeSet<String>,
}

pub fn parse_policy_document(text: &str) -> Result<AuthPolicyDocument, PolicyError> {
    let doc: AuthPolicyDocument = serde_json::from_str(text).map_err(|e| PolicyError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.trusted_roots.is_empty() {
        return Err(PolicyError::NoRoots);
    }
    if doc.dn_role_rules.iter().any(|r| r.role.is_empty()) {
        return Err(PolicyError::EmptyRole);
    }
    Ok(doc)
}

pub struct AuthPolicy {
    trusted_roots: Vec<CertificateDer<'static>>,
    anchors: Vec<TrustAnchor<'static>>,
    pub dn_role_rules: Vec<DnRoleRule>,
    pub revoked_dns: BTreeSet<String>,
    pub origin_secret: OriginSecret,
}

impl fmt::Debug for AuthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuthPolicy")
            .field("trusted_roots", &self.trusted_roots.len())
            .field("dn_role_rules", &self.dn_role_rules)
            .field("revoked_dns", &self.revoked_dns)
            .field("origin_secret", &self.origin_secret)
            .finish()
    }
}

impl AuthPolicy {
    pub fn new(
        trusted_roots: Vec<CertificateDer<'static>>,
        dn_role_rules: Vec<DnRoleRule>,
        revoked_dns: BTreeSet<String>,
        origin_secret: OriginSecret,
    ) -> Result<Self, PolicyError> {
        if trusted_roots.is_empty() {
            return Err(PolicyError::NoRoots);
        }
        let anchors = trusted_roots
            .iter()
            .enumerate()
            .map(|(i, der)| {
                webpki::anchor_from_trusted_cert(der)
                    .map(|a| a.to_owned())
                    .map_err(|e| PolicyError::BadRoot {
                        path: format!("root #{i}"),
                        message: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            trusted_roots,
            anchors,
            dn_role_rules,
            revoked_dns,
            origin_secret,
        })
    }

    pub fn from_file(path: &Path, origin_secret: OriginSecret) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc = parse_policy_document(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut roots = Vec::new();
        for root in &doc.trusted_roots {
            let full = base.join(root);
            let certs = crate::tls::load_certs(&full).map_err(|e| PolicyError::BadRoot {
                path: full.display().to_string(),
                message: e.to_string(),
            })?;
            if certs.is_empty() {
                return Err(PolicyError::BadRoot {
                    path: full.display().to_string(),
                    message: "no certificates in file".into(),
                });
            }
            roots.extend(certs);
        }
        Self::new(roots, doc.dn_role_rules, doc.revoked_dns, origin_secret)
    }

    pub fn trusted_roots(&self) -> &[CertificateDer<'static>] {
        &self.trusted_roots
    }

    /// Roles from every matching rule, in rule order, deduplicated.
    pub fn roles_for(&self, subject_dn: &str) -> Vec<String> {
        let mut roles: Vec<String> = Vec::new();
        for rule in &self.dn_role_rules {
            if rule.pattern.matches(subject_dn) && !roles.contains(&rule.role) {
                roles.push(rule.role.clone());
            }
        }
        roles
    }
}

/// Subject, issuer and validity fields pulled from a DER certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertSummary {
    pub subject_dn: String,
    pub common_name: String,
    pub issuer_dn: String,
    pub not_before: u64,
    pub not_after: u64,
}

pub fn summarize_certificate(der: &[u8]) -> Option<CertSummary> {
    let cert = x509_cert::Certificate::from_der(der).ok()?;
    let tbs = &cert.tbs_certificate;
    let cn_oid = x509_cert::der::asn1::ObjectIdentifier::new_unwrap("2.5.4.3");
    let common_name = tbs
        .subject
        .0
        .iter()
        .rev()
        .flat_map(|rdn| rdn.0.iter())
        .find(|atv| atv.oid == cn_oid)
        .map(|atv| {
            let text = atv.to_string();
            text.split_once('=')
                .map(|(_, v)| v.to_owned())
                .unwrap_or(text)
        })
        .unwrap_or_default();
    Some(CertSummary {
        subject_dn: tbs.subject.to_string(),
        common_name,
        issuer_dn: tbs.issuer.to_string(),
        not_before: tbs.validity.not_before.to_unix_duration().as_secs(),
        not_after: tbs.validity.not_after.to_unix_duration().as_secs(),
    })
}

/// Verify a client chain (leaf first) against the policy at `now_unix`.
pub fn verify_client_certificate(
    chain: &[CertificateDer<'_>],
    policy: &AuthPolicy,
    now_unix: u64,
) -> Result<Identity, AuthReason> {
    let (leaf, intermediates) = chain.split_first().ok_or(AuthReason::NoCert)?;
    let ee = webpki::EndEntityCert::try_from(leaf).map_err(|_| AuthReason::UntrustedIssuer)?;
    ee.verify_for_usage(
        webpki::ALL_VERIFICATION_ALGS,
        &policy.anchors,
        intermediates,
        UnixTime::since_unix_epoch(std::time::Duration::from_secs(now_unix)),
        webpki::KeyUsage::client_auth(),
        None,
        None,
    )
    .map_err(|e| match e {
        webpki::Error::CertExpired { .. } | webpki::Error::CertNotValidYet { .. } => {
            AuthReason::Expired
        }
        _ => AuthReason::UntrustedIssuer,
    })?;
    let summary = summarize_certificate(leaf).ok_or(AuthReason::UntrustedIssuer)?;
    if summary.subject_dn.is_empty() {
        return Err(AuthReason::UntrustedIssuer);
    }
    if now_unix > summary.not_after {
        return Err(AuthReason::Expired);
    }
    if policy.revoked_dns.contains(&summary.subject_dn) {
        return Err(AuthReason::Revoked);
    }
    let roles = policy.roles_for(&summary.subject_dn);
    Ok(Identity {
        subject_dn: summary.subject_dn,
        common_name: summary.common_name,
        issuer_dn: summary.issuer_dn,
        roles,
        not_after: summary.not_after,
    })
}

/// Allowed iff the identity holds one of the service's required roles, or
/// the service requires none.
pub fn authorize(identity: &Identity, service: &ServiceSpec) -> AuthDecision {
    authorize_roles(&identity.roles, &service.required_roles)
}

pub fn authorize_roles(roles: &[String], required: &BTreeSet<String>) -> AuthDecision {
    if required.is_empty() || roles.iter().any(|r| required.contains(r)) {
        AuthDecision::allow()
    } else {
        AuthDecision::deny(AuthReason::NoRole)
    }
}
