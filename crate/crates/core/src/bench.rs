//! Load benchmark harness: `n` requests over `c` concurrent workers,
//! repeated `K` times, summarized as requests/second and latency
//! percentiles, plus a matrix runner that compares configurations.
//!
//! The engine is generic over [`LoadClient`] and [`Clock`] so that tests can
//! drive it single-threaded under tokio's paused clock with a fake client.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_REPETITIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCertPaths {
    pub cert: PathBuf,
    pub key: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub target_url: String,
    pub n: usize,
    pub c: usize,
    pub repetitions: usize,
    pub timeout: Duration,
    pub client_certificate: Option<ClientCertPaths>,
    /// Extra root for verifying an HTTPS target.
    pub ca_certificate: Option<PathBuf>,
    pub label: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("need n >= c >= 1 (n={n}, c={c})")]
    BadConcurrency { n: usize, c: usize },
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("cannot aggregate zero reports")]
    Empty,
    #[error("mixed labels in aggregate: `{0}` and `{1}`")]
    MixedLabels(String, String),
}

impl BenchConfig {
    pub fn new(target_url: impl Into<String>, n: usize, c: usize) -> Self {
        Self {
            target_url: target_url.into(),
            n,
            c,
            repetitions: DEFAULT_REPETITIONS,
            timeout: Duration::from_secs(10),
            client_certificate: None,
            ca_certificate: None,
            label: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.c == 0 || self.n < self.c {
            return Err(BenchError::BadConcurrency {
                n: self.n,
                c: self.c,
            });
        }
        if self.repetitions == 0 {
            return Err(BenchError::NoRepetitions);
        }
        if self.timeout.is_zero() {
            return Err(BenchError::ZeroTimeout);
        }
        Ok(())
    }
}

/// Result of one request: an HTTP status or a transport-level failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Status(u16),
    Error,
}

pub trait LoadClient: Sync {
    /// Issue request number `index` (0-based within the run).
    fn request(&self, index: usize) -> impl std::future::Future<Output = Outcome> + Send;
}

/// Monotonic time since an arbitrary origin.
pub trait Clock {
    fn now(&self) -> Duration;
}

/// tokio's clock, so `tokio::time::pause` turns it into a simulated clock.
#[derive(Debug, Clone, Copy)]
pub struct TokioClock {
    origin: tokio::time::Instant,
}

impl TokioClock {
    pub fn new() -> Self {
        Self {
            origin: tokio::time::Instant::now(),
        }
    }
}

impl Default for TokioClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for TokioClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub n: usize,
    pub wall_seconds: f64,
    /// `n / wall_seconds`, counting failed requests; 0 when the wall time is 0.
    pub requests_per_second: f64,
    pub latency: LatencySummary,
    pub status_histogram: BTreeMap<u16, usize>,
    pub errors: usize,
}

/// Nearest-rank percentile over an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Run one benchmark pass. Workers pull request indices from a shared
/// counter, so at most `c` requests are in flight and none are pre-assigned.
pub async fn run_load<C: LoadClient, K: Clock>(
    config: &BenchConfig,
    client: &C,
    clock: &K,
) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(Duration, Duration, Outcome)>> =
        Mutex::new(Vec::with_capacity(config.n));
    let worker = || async {
        loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            if i >= config.n {
                break;
            }
            let started = clock.now();
            let outcome = match tokio::time::timeout(config.timeout, client.request(i)).await {
                Ok(o) => o,
                Err(_) => Outcome::Error,
            };
            let finished = clock.now();
            results.lock().unwrap().push((started, finished, outcome));
        }
    };
    futures::future::join_all((0..config.c.min(config.n)).map(|_| worker())).await;

    let results = results.into_inner().unwrap();
    let first = results.iter().map(|r| r.0).min().unwrap_or_default();
    let last = results.iter().map(|r| r.1).max().unwrap_or_default();
    let wall = last.saturating_sub(first).as_secs_f64();
    let mut latencies: Vec<f64> = results
        .iter()
        .map(|(s, f, _)| f.saturating_sub(*s).as_secs_f64())
        .collect();
    latencies.sort_by(f64::total_cmp);
    let mut status_histogram = BTreeMap::new();
    let mut errors = 0;
    for (_, _, outcome) in &results {
        match outcome {
            Outcome::Status(code) => *status_histogram.entry(*code).or_insert(0) += 1,
            Outcome::Error => errors += 1,
        }
    }
    Ok(BenchReport {
        label: config.label.clone(),
        n: config.n,
        wall_seconds: wall,
        requests_per_second: if wall > 0.0 {
            config.n as f64 / wall
        } else {
            0.0
        },
        latency: LatencySummary {
            p50: percentile(&latencies, 50.0),
            p90: percentile(&latencies, 90.0),
            p99: percentile(&latencies, 99.0),
        },
        status_histogram,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub label: String,
    pub runs: usize,
    pub mean_rps: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stddev_rps: f64,
    pub per_run_rps: Vec<f64>,
    pub mean_latency: LatencySummary,
    pub total_errors: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(reports: &[BenchReport]) -> Result<AggregateReport, BenchError> {
    let first = reports.first().ok_or(BenchError::Empty)?;
    if let Some(other) = reports.iter().find(|r| r.label != first.label) {
        return Err(BenchError::MixedLabels(
            first.label.clone(),
            other.label.clone(),
        ));
    }
    let rps: Vec<f64> = reports.iter().map(|r| r.requests_per_second).collect();
    let mean_rps = mean(&rps);
    let stddev_rps = if rps.len() < 2 {
        0.0
    } else {
        let ss: f64 = rps.iter().map(|x| (x - mean_rps).powi(2)).sum();
        (ss / (rps.len() - 1) as f64).sqrt()
    };
    let pick = |f: fn(&LatencySummary) -> f64| {
        mean(&reports.iter().map(|r| f(&r.latency)).collect::<Vec<_>>())
    };
    Ok(AggregateReport {
        label: first.label.clone(),
        runs: reports.len(),
        mean_rps,
        stddev_rps,
        per_run_rps: rps,
        mean_latency: LatencySummary {
            p50: pick(|l| l.p50),
            p90: pick(|l| l.p90),
            p99: pick(|l| l.p99),
        },
        total_errors: reports.iter().map(|r| r.errors).sum(),
    })
}

/// `repetitions` sequential runs, aggregated.
pub async fn run_repeated<C: LoadClient, K: Clock>(
    config: &BenchConfig,
    client: &C,
    clock: &K,
) -> Result<(Vec<BenchReport>, AggregateReport), BenchError> {
    config.validate()?;
    let mut reports = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        reports.push(run_load(config, client, clock).await?);
    }
    let agg = aggregate(&reports)?;
    Ok((reports, agg))
}

/// HTTP(S) GET client over reqwest.
pub struct HttpClient {
    client: reqwest::Client,
    url: String,
}

impl HttpClient {
    pub fn new(config: &BenchConfig) -> anyhow::Result<Self> {
        let mut builder = reqwest::Client::builder()
            .use_rustls_tls()
            .timeout(config.timeout)
            .pool_max_idle_per_host(config.c.max(1));
        if let Some(ca) = &config.ca_certificate {
            let pem = std::fs::read(ca)?;
            builder = builder.add_root_certificate(reqwest::Certificate::from_pem(&pem)?);
        }
        if let Some(paths) = &config.client_certificate {
            let mut pem = std::fs::read(&paths.cert)?;
            pem.extend(std::fs::read(&paths.key)?);
            builder = builder.identity(reqwest::Identity::from_pem(&pem)?);
        }
        Ok(Self {
            client: builder.build()?,
            url: config.target_url.clone(),
        })
    }
}

impl LoadClient for HttpClient {
    async fn request(&self, _index: usize) -> Outcome {
        match self.client.get(&self.url).send().await {
            Ok(resp) => {
                let status = resp.status().as_u16();
                // drain so the connection returns to the pool
                match resp.bytes().await {
                    Ok(_) => Outcome::Status(status),
                    Err(_) => Outcome::Error,
                }
            }
            Err(_) => Outcome::Error,
        }
    }
}

fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}

fn default_timeout() -> f64 {
    10.0
}

/// One row of a comparison scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCell {
    pub label: String,
    pub service: String,
    pub replicas: u32,
    /// Request path appended to the harness base URL.
    pub path: String,
    pub n: usize,
    pub c: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("scenario cell `{label}`: {message}")]
    Invalid { label: String, message: String },
}

pub fn load_scenario(text: &str) -> Result<Vec<ScenarioCell>, ScenarioError> {
    let cells: Vec<ScenarioCell> =
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    for cell in &cells {
        let bad = |message: String| ScenarioError::Invalid {
            label: cell.label.clone(),
            message,
        };
        if !cell.path.starts_with('/') {
            return Err(bad("path must begin with `/`".into()));
        }
        if cell.replicas == 0 {
            return Err(bad("replicas must be positive".into()));
        }
        if !(cell.timeout_seconds.is_finite() && cell.timeout_seconds > 0.0) {
            return Err(bad("timeout_seconds must be positive".into()));
        }
        cell.bench_config("http://placeholder")
            .validate()
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok(cells)
}

impl ScenarioCell {
    pub fn bench_config(&self, base_url: &str) -> BenchConfig {
        BenchConfig {
            target_url: format!("{}{}", base_url.trim_end_matches('/'), self.path),
            n: self.n,
            c: self.c,
            repetitions: self.repetitions,
            timeout: Duration::from_secs_f64(self.timeout_seconds.max(1e-3)),
            client_certificate: None,
            ca_certificate: None,
            label: self.label.clone(),
        }
    }
}

/// What the matrix runner drives: something that can resize a service and
/// hand out a client for a cell.
pub trait MatrixTarget: Sync {
    type Client: LoadClient;

    fn configure(
        &self,
        service: &str,
        replicas: u32,
    ) -> impl std::future::Future<Output = anyhow::Result<()>> + Send;

    fn client(&self, cell: &ScenarioCell) -> anyhow::Result<Self::Client>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub label: String,
    pub replicas: u32,
    pub service: String,
    pub mean_rps: f64,
    pub stddev_rps: f64,
    pub p50: f64,
    pub p99: f64,
    pub runs: usize,
    pub error: Option<String>,
}

/// Run every cell in order. A failing cell yields a row with `error` set
/// and the matrix continues.
pub async fn run_matrix<T: MatrixTarget, K: Clock>(
    cells: &[ScenarioCell],
    target: &T,
    clock: &K,
) -> Vec<MatrixRow> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let outcome: anyhow::Result<AggregateReport> = async {
            target.configure(&cell.service, cell.replicas).await?;
            let client = target.client(cell)?;
            let config = cell.bench_config("");
            let (_, agg) = run_repeated(&config, &client, clock).await?;
            Ok(agg)
        }
        .await;
        rows.push(match outcome {
            Ok(agg) => MatrixRow {
                label: cell.label.clone(),
                replicas: cell.replicas,
                service: cell.service.clone(),
                mean_rps: agg.mean_rps,
                stddev_rps: agg.stddev_rps,
                p50: agg.mean_latency.p50,
                p99: agg.mean_latency.p99,
                runs: agg.runs,
                error: None,
            },
            Err(e) => {
                tracing::warn!(cell = %cell.label, error = %e, "scenario cell failed");
                MatrixRow {
                    label: cell.label.clone(),
                    replicas: cell.replicas,
                    service: cell.service.clone(),
                    mean_rps: f64::NAN,
                    stddev_rps: f64::NAN,
                    p50: f64::NAN,
                    p99: f64::NAN,
                    runs: 0,
                    error: Some(format!("{e:#}")),
                }
            }
        });
    }
    rows
}

pub const CSV_HEADER: [&str; 7] = [
    "label",
    "replicas",
    "service",
    "mean_rps",
    "stddev_rps",
    "p50",
    "p99",
];

fn cell_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// CSV with [`CSV_HEADER`]; failed cells have empty numeric fields.
pub fn matrix_csv(rows: &[MatrixRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.replicas.to_string(),
            r.service.clone(),
            cell_value(r.mean_rps),
            cell_value(r.stddev_rps),
            cell_value(r.p50),
            cell_value(r.p99),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Whitespace-separated columns for gnuplot; failed cells are commented out.
pub fn matrix_plot_data(rows: &[MatrixRow]) -> String {
    let mut out = String::from("# index label replicas service mean_rps stddev_rps p50 p99\n");
    for (i, r) in rows.iter().enumerate() {
        let prefix = if r.error.is_some() { "# " } else { "" };
        out.push_str(&format!(
            "{prefix}{i} {} {} {} {} {} {} {}\n",
            r.label.replace(char::is_whitespace, "_"),
            r.replicas,
            r.service,
            cell_value(r.mean_rps),
            cell_value(r.stddev_rps),
            cell_value(r.p50),
            cell_value(r.p99),
        ));
    }
    out
}

pub fn write_matrix_outputs(
    rows: &[MatrixRow],
    csv_path: Option<&Path>,
    plot_path: Option<&Path>,
) -> std::io::Result<()> {
    if let Some(p) = csv_path {
        std::fs::File::create(p)?.write_all(matrix_csv(rows).as_bytes())?;
    }
    if let Some(p) = plot_path {
        std::fs::File::create(p)?.write_all(matrix_plot_data(rows).as_bytes())?;
    }
    Ok(())
}
