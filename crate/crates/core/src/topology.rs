//! Declarative service topology and the compiled routing table.
//!
//! A topology is a JSON document with a top-level `services` array. Loading
//! is strict: unknown keys are rejected and every invariant is checked before
//! a [`Topology`] value exists. [`RoutingTable::build`] compiles a topology
//! into an immutable longest-prefix matcher that is shared across request
//! handlers; reloads publish a fresh table through [`SharedRoutes`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced while loading a topology document.
#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("service `{service}`: invalid `{field}`: {message}")]
    Invalid {
        service: String,
        field: &'static str,
        message: String,
    },
    #[error("duplicate path prefix `{prefix}` (services `{first}` and `{second}`)")]
    DuplicatePrefix {
        prefix: String,
        first: String,
        second: String,
    },
    #[error("duplicate service name `{0}`")]
    DuplicateName(String),
    #[error("reading topology file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors from [`RoutingTable::resolve`].
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("no route for path `{0}`")]
    NotFound(String),
    #[error("path `{0}` does not begin with `/`")]
    BadPath(String),
    #[error("random draw {0} outside [0, 1)")]
    BadDraw(String),
}

/// A `host:port` network address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Endpoint(String);

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("`{s}` is not host:port"))?;
        if host.is_empty() {
            return Err(format!("`{s}` has an empty host"));
        }
        if host.contains(char::is_whitespace) || host.contains('/') {
            return Err(format!("`{s}` has an invalid host"));
        }
        match port.parse::<u16>() {
            Ok(p) if p > 0 => Ok(Self(s.to_owned())),
            _ => Err(format!("`{s}` has an invalid port")),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Endpoint {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Endpoint::parse(&s)
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.0
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which stub workload backs a service's replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    #[default]
    Echo,
    Burn,
    Stateful,
}

impl WorkloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::Echo => "echo",
            WorkloadKind::Burn => "burn",
            WorkloadKind::Stateful => "stateful",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "echo" => Ok(WorkloadKind::Echo),
            "burn" => Ok(WorkloadKind::Burn),
            "stateful" => Ok(WorkloadKind::Stateful),
            other => Err(format!("unknown workload kind `{other}`")),
        }
    }
}

/// One weighted release variant of a service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseTrack {
    pub label: String,
    pub weight: u32,
    pub endpoints: Vec<Endpoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub path_prefix: String,
    #[serde(default)]
    pub tracks: Vec<ReleaseTrack>,
    #[serde(default)]
    pub legacy_endpoint: Option<Endpoint>,
    pub min_replicas: u32,
    pub max_replicas: u32,
    #[serde(default)]
    pub burn_ms: Option<u64>,
    #[serde(default)]
    pub kind: WorkloadKind,
    /// Roles allowed to reach this service; empty admits every authenticated client.
    #[serde(default)]
    pub required_roles: BTreeSet<String>,
}

impl ServiceSpec {
    pub fn is_legacy(&self) -> bool {
        self.legacy_endpoint.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub services: Vec<ServiceSpec>,
}

impl Topology {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }
}

/// Parse and validate a topology document.
pub fn load_topology(config_text: &str) -> Result<Topology, TopologyError> {
    let topology: Topology =
        serde_json::from_str(config_text).map_err(|e| TopologyError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    validate(&topology)?;
    Ok(topology)
}

pub fn load_topology_file(path: &Path) -> Result<Topology, TopologyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_topology(&text)
}

fn invalid(service: &str, field: &'static str, message: impl Into<String>) -> TopologyError {
    TopologyError::Invalid {
        service: service.to_owned(),
        field,
        message: message.into(),
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn valid_prefix(prefix: &str) -> Result<(), &'static str> {
    if !prefix.starts_with('/') {
        return Err("must begin with `/`");
    }
    if prefix.len() > 1 && prefix.ends_with('/') {
        return Err("must not end with `/`");
    }
    if prefix.contains("//") {
        return Err("must not contain empty segments");
    }
    if prefix
        .chars()
        .any(|c| c.is_whitespace() || c == '?' || c == '#')
    {
        return Err("contains a forbidden character");
    }
    Ok(())
}

pub fn validate(topology: &Topology) -> Result<(), TopologyError> {
    let mut names: HashMap<&str, ()> = HashMap::new();
    let mut prefixes: HashMap<&str, &str> = HashMap::new();
    for svc in &topology.services {
        let name = svc.name.as_str();
        if !valid_name(name) {
            return Err(invalid(
                name,
                "name",
                "must be a nonempty [A-Za-z0-9_-] identifier",
            ));
        }
        if names.insert(name, ()).is_some() {
            return Err(TopologyError::DuplicateName(name.to_owned()));
        }
        valid_prefix(&svc.path_prefix).map_err(|m| invalid(name, "path_prefix", m))?;
        if let Some(first) = prefixes.insert(&svc.path_prefix, name) {
            return Err(TopologyError::DuplicatePrefix {
                prefix: svc.path_prefix.clone(),
                first: first.to_owned(),
                second: name.to_owned(),
            });
        }
        if svc.min_replicas == 0 {
            return Err(invalid(name, "min_replicas", "must be positive"));
        }
        if svc.max_replicas == 0 {
            return Err(invalid(name, "max_replicas", "must be positive"));
        }
        if svc.min_replicas > svc.max_replicas {
            return Err(invalid(
                name,
                "min_replicas",
                format!(
                    "min_replicas {} exceeds max_replicas {}",
                    svc.min_replicas, svc.max_replicas
                ),
            ));
        }
        match (&svc.legacy_endpoint, svc.tracks.is_empty()) {
            (Some(_), false) => {
                return Err(invalid(
                    name,
                    "legacy_endpoint",
                    "legacy_endpoint and tracks are mutually exclusive",
                ))
            }
            (None, true) => {
                return Err(invalid(name, "tracks", "needs tracks or a legacy_endpoint"))
            }
            _ => {}
        }
        let mut labels = BTreeSet::new();
        for track in &svc.tracks {
            if track.label.is_empty() {
                return Err(invalid(name, "tracks.label", "must be nonempty"));
            }
            if !labels.insert(track.label.as_str()) {
                return Err(invalid(
                    name,
                    "tracks.label",
                    format!("duplicate track label `{}`", track.label),
                ));
            }
            if track.endpoints.is_empty() {
                return Err(invalid(
                    name,
                    "tracks.endpoints",
                    format!("track `{}` has no endpoints", track.label),
                ));
            }
        }
        if !svc.tracks.is_empty()
            && svc.tracks.iter().map(|t| u64::from(t.weight)).sum::<u64>() == 0
        {
            return Err(invalid(name, "tracks.weight", "track weights sum to zero"));
        }
        for role in &svc.required_roles {
            if role.is_empty() {
                return Err(invalid(
                    name,
                    "required_roles",
                    "role names must be nonempty",
                ));
            }
        }
    }
    Ok(())
}

/// Round-robin cursor over one track's endpoints.
#[derive(Debug)]
pub struct TrackState {
    endpoints: Vec<Endpoint>,
    counter: AtomicUsize,
}

impl TrackState {
    /// Panics if `endpoints` is empty; validated topologies never produce that.
    pub fn new(endpoints: Vec<Endpoint>) -> Self {
        assert!(!endpoints.is_empty(), "track needs at least one endpoint");
        Self {
            endpoints,
            counter: AtomicUsize::new(0),
        }
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }
}

/// Next endpoint of the track in cyclic order.
pub fn next_endpoint(track: &TrackState) -> &Endpoint {
    let i = track.counter.fetch_add(1, Ordering::Relaxed);
    &track.endpoints[i % track.endpoints.len()]
}

#[derive(Debug)]
struct CompiledTrack {
    label: String,
    // half-open [lower, upper) on the cumulative weight axis
    lower: u64,
    upper: u64,
    state: TrackState,
}

#[derive(Debug)]
pub struct CompiledService {
    spec: ServiceSpec,
    tracks: Vec<CompiledTrack>,
    total_weight: u64,
}

impl CompiledService {
    fn compile(spec: &ServiceSpec) -> Self {
        let mut cumulative = 0u64;
        let tracks = spec
            .tracks
            .iter()
            .map(|t| {
                let lower = cumulative;
                cumulative += u64::from(t.weight);
                CompiledTrack {
                    label: t.label.clone(),
                    lower,
                    upper: cumulative,
                    state: TrackState::new(t.endpoints.clone()),
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            tracks,
            total_weight: cumulative,
        }
    }

    pub fn spec(&self) -> &ServiceSpec {
        &self.spec
    }

    fn pick_track(&self, draw: f64) -> &CompiledTrack {
        let point = draw * self.total_weight as f64;
        self.tracks
            .iter()
            .find(|t| t.upper > t.lower && (t.lower as f64) <= point && point < t.upper as f64)
            // rounding can push draw*total onto the upper edge
            .unwrap_or_else(|| {
                self.tracks
                    .iter()
                    .rev()
                    .find(|t| t.upper > t.lower)
                    .expect("validated service has positive total weight")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteDecision {
    pub service_name: String,
    pub target: Endpoint,
    pub is_legacy: bool,
    pub track_label: String,
    pub stripped_path: String,
}

pub const LEGACY_TRACK: &str = "legacy";

/// Immutable longest-prefix routing table.
#[derive(Debug)]
pub struct RoutingTable {
    entries: Vec<(String, Arc<CompiledService>)>,
    generation: u64,
}

/// Segment-aware prefix test: `/db` matches `/db` and `/db/x` but not `/dbs`.
pub fn prefix_matches(prefix: &str, path: &str) -> bool {
    if prefix == "/" {
        return path.starts_with('/');
    }
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/') || rest.starts_with('?'),
        None => false,
    }
}

impl RoutingTable {
    /// Compile a validated topology. The generation is one past `previous`'s.
    pub fn build(topology: &Topology, previous: Option<&RoutingTable>) -> Self {
        let mut entries: Vec<(String, Arc<CompiledService>)> = topology
            .services
            .iter()
            .map(|s| (s.path_prefix.clone(), Arc::new(CompiledService::compile(s))))
            .collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Self {
            entries,
            generation: previous.map_or(1, |p| p.generation + 1),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prefixes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.entries
            .iter()
            .map(|(_, s)| &s.spec)
            .find(|s| s.name == name)
    }

    /// Longest matching service for `path`, without picking a target.
    pub fn match_service(&self, path: &str) -> Option<&ServiceSpec> {
        self.entries
            .iter()
            .find(|(prefix, _)| prefix_matches(prefix, path))
            .map(|(_, s)| &s.spec)
    }

    pub fn resolve(&self, path: &str, rng_draw: f64) -> Result<RouteDecision, RouteError> {
        if !path.starts_with('/') {
            return Err(RouteError::BadPath(path.to_owned()));
        }
        if !(0.0..1.0).contains(&rng_draw) {
            return Err(RouteError::BadDraw(rng_draw.to_string()));
        }
        let svc = self
            .entries
            .iter()
            .find(|(prefix, _)| prefix_matches(prefix, path))
            .map(|(_, s)| s)
            .ok_or_else(|| RouteError::NotFound(path.to_owned()))?;
        if let Some(legacy) = &svc.spec.legacy_endpoint {
            return Ok(RouteDecision {
                service_name: svc.spec.name.clone(),
                target: legacy.clone(),
                is_legacy: true,
                track_label: LEGACY_TRACK.to_owned(),
                stripped_path: path.to_owned(),
            });
        }
        let track = svc.pick_track(rng_draw);
        Ok(RouteDecision {
            service_name: svc.spec.name.clone(),
            target: next_endpoint(&track.state).clone(),
            is_legacy: false,
            track_label: track.label.clone(),
            stripped_path: path.to_owned(),
        })
    }
}

/// Free-function form of [`RoutingTable::resolve`].
pub fn resolve_route(
    table: &RoutingTable,
    path: &str,
    rng_draw: f64,
) -> Result<RouteDecision, RouteError> {
    table.resolve(path, rng_draw)
}

/// Free-function form of [`RoutingTable::build`].
pub fn build_routing_table(topology: &Topology, previous: Option<&RoutingTable>) -> RoutingTable {
    RoutingTable::build(topology, previous)
}

/// Atomically swappable handle to the current routing table and its topology.
pub struct SharedRoutes {
    current: ArcSwap<RoutingTable>,
    topology: ArcSwap<Topology>,
}

impl SharedRoutes {
    pub fn new(topology: Topology) -> Self {
        let table = RoutingTable::build(&topology, None);
        Self {
            current: ArcSwap::from_pointee(table),
            topology: ArcSwap::from_pointee(topology),
        }
    }

    pub fn load(&self) -> Arc<RoutingTable> {
        self.current.load_full()
    }

    pub fn topology(&self) -> Arc<Topology> {
        self.topology.load_full()
    }

    /// Compile `topology` and publish it; returns the new generation.
    pub fn reload(&self, topology: Topology) -> u64 {
        let prev = self.current.load();
        let table = RoutingTable::build(&topology, Some(&prev));
        let generation = table.generation();
        self.topology.store(Arc::new(topology));
        self.current.store(Arc::new(table));
        generation
    }
}
