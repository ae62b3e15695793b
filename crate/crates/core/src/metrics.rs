//! In-process metric registry with Prometheus text exposition (v0.0.4)
//! rendering, the matching parser, and an HTTP scrape client.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

pub const HTTP_REQUESTS_TOTAL: &str = "http_requests_total";
pub const HTTP_REQUEST_DURATION_SECONDS: &str = "http_request_duration_seconds";
pub const HTTP_REQUEST_ERRORS_TOTAL: &str = "http_request_errors_total";
pub const REQUESTS_INFLIGHT: &str = "requests_inflight";
pub const REPLICAS_CURRENT: &str = "replicas_current";
pub const REPLICAS_DESIRED: &str = "replicas_desired";
pub const REPLICA_RESTARTS_TOTAL: &str = "replica_restarts_total";
pub const CONNECTIONS_REJECTED_TOTAL: &str = "connections_rejected_total";

pub const CONTENT_TYPE: &str = "text/plain; version=0.0.4";

pub const DEFAULT_BUCKETS: [f64; 11] = [
    0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Counter,
    Gauge,
    Histogram,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Counter => "counter",
            MetricKind::Gauge => "gauge",
            MetricKind::Histogram => "histogram",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub name: String,
    pub labels: Labels,
    pub value: f64,
    pub kind: MetricKind,
}

impl MetricSample {
    pub fn new(name: &str, labels: &[(&str, &str)], value: f64, kind: MetricKind) -> Self {
        Self {
            name: name.to_owned(),
            labels: labels
                .iter()
                .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
                .collect(),
            value,
            kind,
        }
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid metric name `{0}`")]
    InvalidName(String),
    #[error("invalid label name `{0}`")]
    InvalidLabel(String),
    #[error("metric `{name}` already registered as {existing}")]
    KindMismatch { name: String, existing: MetricKind },
    #[error("counter `{0}` cannot decrease")]
    CounterDecrease(String),
    #[error("metric `{name}` value {value} is not finite")]
    NotFinite { name: String, value: f64 },
}

pub fn valid_metric_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == ':' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

pub fn valid_label_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone)]
struct Histogram {
    bounds: Vec<f64>,
    counts: Vec<u64>,
    sum: f64,
    count: u64,
}

impl Histogram {
    fn new(bounds: &[f64]) -> Self {
        Self {
            bounds: bounds.to_vec(),
            counts: vec![0; bounds.len()],
            sum: 0.0,
            count: 0,
        }
    }

    fn observe(&mut self, v: f64) {
        for (bound, count) in self.bounds.iter().zip(self.counts.iter_mut()) {
            if v <= *bound {
                *count += 1;
            }
        }
        self.sum += v;
        self.count += 1;
    }
}

#[derive(Debug, Clone)]
enum Series {
    Scalar(f64),
    Histogram(Histogram),
}

#[derive(Debug, Clone)]
struct Family {
    kind: MetricKind,
    buckets: Vec<f64>,
    series: BTreeMap<Vec<(String, String)>, Series>,
}

/// Thread-safe metric registry.
#[derive(Debug, Default)]
pub struct Registry {
    families: Mutex<BTreeMap<String, Family>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a family. Re-registering with the same kind is a no-op.
    pub fn register(&self, name: &str, kind: MetricKind) -> Result<(), MetricsError> {
        self.register_with_buckets(name, kind, &DEFAULT_BUCKETS)
    }

    pub fn register_with_buckets(
        &self,
        name: &str,
        kind: MetricKind,
        buckets: &[f64],
    ) -> Result<(), MetricsError> {
        if !valid_metric_name(name) {
            return Err(MetricsError::InvalidName(name.to_owned()));
        }
        let mut families = self.families.lock().unwrap();
        match families.get(name) {
            Some(f) if f.kind != kind => Err(MetricsError::KindMismatch {
                name: name.to_owned(),
                existing: f.kind,
            }),
            Some(_) => Ok(()),
            None => {
                let mut buckets: Vec<f64> =
                    buckets.iter().copied().filter(|b| b.is_finite()).collect();
                buckets.sort_by(f64::total_cmp);
                buckets.dedup();
                families.insert(
                    name.to_owned(),
                    Family {
                        kind,
                        buckets,
                        series: BTreeMap::new(),
                    },
                );
                Ok(())
            }
        }
    }

    /// Counter adds `value`, gauge sets it, histogram observes it.
    pub fn record(&self, sample: &MetricSample) -> Result<(), MetricsError> {
        if !sample.value.is_finite() {
            return Err(MetricsError::NotFinite {
                name: sample.name.clone(),
                value: sample.value,
            });
        }
        if let Some(bad) = sample.labels.keys().find(|k| !valid_label_name(k)) {
            return Err(MetricsError::InvalidLabel(bad.clone()));
        }
        if sample.kind == MetricKind::Counter && sample.value < 0.0 {
            return Err(MetricsError::CounterDecrease(sample.name.clone()));
        }
        self.register(&sample.name, sample.kind)?;
        let mut families = self.families.lock().unwrap();
        let family = families.get_mut(&sample.name).expect("registered above");
        let key: Vec<(String, String)> = sample
            .labels
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let buckets = family.buckets.clone();
        let series = family
            .series
            .entry(key)
            .or_insert_with(|| match sample.kind {
                MetricKind::Histogram => Series::Histogram(Histogram::new(&buckets)),
                _ => Series::Scalar(0.0),
            });
        match (sample.kind, series) {
            (MetricKind::Counter, Series::Scalar(v)) => *v += sample.value,
            (MetricKind::Gauge, Series::Scalar(v)) => *v = sample.value,
            (MetricKind::Histogram, Series::Histogram(h)) => h.observe(sample.value),
            _ => unreachable!("series shape follows family kind"),
        }
        Ok(())
    }

    pub fn inc(&self, name: &str, labels: &[(&str, &str)]) {
        self.add(name, labels, 1.0);
    }

    /// Counter increment. Registry misuse is a programming error, so it panics.
    pub fn add(&self, name: &str, labels: &[(&str, &str)], value: f64) {
        self.record(&MetricSample::new(name, labels, value, MetricKind::Counter))
            .expect("counter record");
    }

    pub fn set_gauge(&self, name: &str, labels: &[(&str, &str)], value: f64) {
        self.record(&MetricSample::new(name, labels, value, MetricKind::Gauge))
            .expect("gauge record");
    }

    /// Adds `delta` to a gauge (may be negative).
    pub fn add_gauge(&self, name: &str, labels: &[(&str, &str)], delta: f64) {
        self.register(name, MetricKind::Gauge)
            .expect("gauge register");
        let key = label_key(labels);
        let mut families = self.families.lock().unwrap();
        let family = families.get_mut(name).expect("registered above");
        match family.series.entry(key).or_insert(Series::Scalar(0.0)) {
            Series::Scalar(v) => *v += delta,
            Series::Histogram(_) => unreachable!("gauge family"),
        }
    }

    pub fn observe(&self, name: &str, labels: &[(&str, &str)], value: f64) {
        self.record(&MetricSample::new(
            name,
            labels,
            value,
            MetricKind::Histogram,
        ))
        .expect("histogram record");
    }

    /// Current value of a counter or gauge series.
    pub fn scalar(&self, name: &str, labels: &[(&str, &str)]) -> Option<f64> {
        let key = label_key(labels);
        let families = self.families.lock().unwrap();
        match families.get(name)?.series.get(&key)? {
            Series::Scalar(v) => Some(*v),
            Series::Histogram(_) => None,
        }
    }

    /// Flattened samples in render order. Histograms expand to
    /// `_bucket`/`_sum`/`_count` series.
    pub fn samples(&self) -> Vec<MetricSample> {
        let families = self.families.lock().unwrap().clone();
        let mut out = Vec::new();
        for (name, family) in &families {
            for (labels, series) in &family.series {
                let base: Labels = labels.iter().cloned().collect();
                match series {
                    Series::Scalar(v) => out.push(MetricSample {
                        name: name.clone(),
                        labels: base,
                        value: *v,
                        kind: family.kind,
                    }),
                    Series::Histogram(h) => {
                        let mut push = |suffix: &str, extra: Option<String>, value: f64| {
                            let mut l = base.clone();
                            if let Some(le) = extra {
                                l.insert("le".into(), le);
                            }
                            out.push(MetricSample {
                                name: format!("{name}{suffix}"),
                                labels: l,
                                value,
                                kind: MetricKind::Histogram,
                            });
                        };
                        for (bound, count) in h.bounds.iter().zip(&h.counts) {
                            push("_bucket", Some(format_value(*bound)), *count as f64);
                        }
                        push("_bucket", Some("+Inf".into()), h.count as f64);
                        push("_sum", None, h.sum);
                        push("_count", None, h.count as f64);
                    }
                }
            }
        }
        out
    }

    /// Render in text exposition format. Families ordered by name, series by
    /// label set; output is byte-identical for identical registries.
    pub fn render(&self) -> String {
        let families = self.families.lock().unwrap().clone();
        let mut out = String::new();
        for (name, family) in &families {
            if family.series.is_empty() {
                continue;
            }
            let _ = writeln!(out, "# TYPE {name} {}", family.kind);
            for (labels, series) in &family.series {
                match series {
                    Series::Scalar(v) => write_line(&mut out, name, labels, None, *v),
                    Series::Histogram(h) => {
                        let bucket = format!("{name}_bucket");
                        for (bound, count) in h.bounds.iter().zip(&h.counts) {
                            let le = format_value(*bound);
                            write_line(&mut out, &bucket, labels, Some(&le), *count as f64);
                        }
                        write_line(&mut out, &bucket, labels, Some("+Inf"), h.count as f64);
                        write_line(&mut out, &format!("{name}_sum"), labels, None, h.sum);
                        write_line(
                            &mut out,
                            &format!("{name}_count"),
                            labels,
                            None,
                            h.count as f64,
                        );
                    }
                }
            }
        }
        out
    }
}

/// Free-function form of [`Registry::record`].
pub fn record(registry: &Registry, sample: &MetricSample) -> Result<(), MetricsError> {
    registry.record(sample)
}

/// Free-function form of [`Registry::render`].
pub fn render(registry: &Registry) -> String {
    registry.render()
}

fn label_key(labels: &[(&str, &str)]) -> Vec<(String, String)> {
    labels
        .iter()
        .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
        .collect::<BTreeMap<_, _>>()
        .into_iter()
        .collect()
}

fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        // shortest representation that parses back to the same f64
        format!("{v}")
    }
}

fn escape_label_value(v: &str, out: &mut String) {
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

fn write_line(out: &mut String, name: &str, labels: &[(String, String)], le: Option<&str>, v: f64) {
    out.push_str(name);
    if !labels.is_empty() || le.is_some() {
        out.push('{');
        let mut first = true;
        let le_pair = le.map(|le| ("le", le));
        for (k, val) in labels
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .chain(le_pair)
        {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(k);
            out.push_str("=\"");
            escape_label_value(val, out);
            out.push('"');
        }
        out.push('}');
    }
    out.push(' ');
    out.push_str(&format_value(v));
    out.push('\n');
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("exposition parse error at line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Parse text exposition format into samples.
///
/// The `# TYPE` line of a family determines the kind of every following
/// sample of that family, including histogram `_bucket`, `_sum` and `_count`
/// series. Samples without a declared type are treated as gauges.
pub fn parse_exposition(text: &str) -> Result<Vec<MetricSample>, ParseError> {
    let mut types: BTreeMap<String, MetricKind> = BTreeMap::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| ParseError {
            line: line_no,
            message,
        };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("TYPE") {
                let name = parts
                    .next()
                    .ok_or_else(|| err("TYPE without name".into()))?;
                if !valid_metric_name(name) {
                    return Err(err(format!("invalid metric name `{name}`")));
                }
                let kind = match parts.next() {
                    Some("counter") => MetricKind::Counter,
                    Some("gauge") | Some("untyped") => MetricKind::Gauge,
                    Some("histogram") => MetricKind::Histogram,
                    Some(other) => return Err(err(format!("unsupported type `{other}`"))),
                    None => return Err(err("TYPE without kind".into())),
                };
                if parts.next().is_some() {
                    return Err(err("trailing tokens after TYPE".into()));
                }
                types.insert(name.to_owned(), kind);
            }
            continue;
        }
        let (name, labels, rest) = parse_sample_head(line).map_err(err)?;
        let mut fields = rest.split_whitespace();
        let value_text = fields.next().ok_or_else(|| err("missing value".into()))?;
        let value =
            parse_value(value_text).ok_or_else(|| err(format!("bad value `{value_text}`")))?;
        if !value.is_finite() {
            return Err(err(format!("non-finite value `{value_text}`")));
        }
        if let Some(ts) = fields.next() {
            ts.parse::<i64>()
                .map_err(|_| err(format!("bad timestamp `{ts}`")))?;
        }
        if fields.next().is_some() {
            return Err(err("trailing tokens after sample".into()));
        }
        let kind = family_kind(&types, &name);
        out.push(MetricSample {
            name,
            labels,
            value,
            kind,
        });
    }
    Ok(out)
}

fn family_kind(types: &BTreeMap<String, MetricKind>, name: &str) -> MetricKind {
    if let Some(k) = types.get(name) {
        return *k;
    }
    for suffix in ["_bucket", "_sum", "_count"] {
        if let Some(base) = name.strip_suffix(suffix) {
            if types.get(base) == Some(&MetricKind::Histogram) {
                return MetricKind::Histogram;
            }
        }
    }
    MetricKind::Gauge
}

fn parse_value(s: &str) -> Option<f64> {
    match s {
        "+Inf" | "Inf" => Some(f64::INFINITY),
        "-Inf" => Some(f64::NEG_INFINITY),
        "NaN" => Some(f64::NAN),
        _ if s
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')) =>
        {
            s.parse().ok()
        }
        _ => None,
    }
}

fn parse_sample_head(line: &str) -> Result<(String, Labels, &str), String> {
    let name_end = line
        .find(|c: char| c == '{' || c.is_whitespace())
        .unwrap_or(line.len());
    let name = &line[..name_end];
    if !valid_metric_name(name) {
        return Err(format!("invalid metric name `{name}`"));
    }
    let rest = &line[name_end..];
    let Some(body) = rest.strip_prefix('{') else {
        if rest.is_empty() {
            return Err("missing value".into());
        }
        return Ok((name.to_owned(), Labels::new(), rest));
    };
    let mut labels = Labels::new();
    let mut chars = body.char_indices().peekable();
    loop {
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            Some((i, '}')) => {
                let after = &body[i + 1..];
                if !after.starts_with(char::is_whitespace) {
                    return Err("missing whitespace before value".into());
                }
                return Ok((name.to_owned(), labels, after));
            }
            None => return Err("unterminated label set".into()),
            _ => {}
        }
        let mut key = String::new();
        while let Some((_, c)) = chars.peek() {
            if *c == '=' || c.is_whitespace() {
                break;
            }
            key.push(*c);
            chars.next();
        }
        if !valid_label_name(&key) {
            return Err(format!("invalid label name `{key}`"));
        }
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        if chars.next().map(|(_, c)| c) != Some('=') {
            return Err(format!("expected `=` after label `{key}`"));
        }
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        if chars.next().map(|(_, c)| c) != Some('"') {
            return Err(format!("expected quoted value for label `{key}`"));
        }
        let mut value = String::new();
        loop {
            match chars.next() {
                Some((_, '"')) => break,
                Some((_, '\\')) => match chars.next() {
                    Some((_, '\\')) => value.push('\\'),
                    Some((_, '"')) => value.push('"'),
                    Some((_, 'n')) => value.push('\n'),
                    Some((_, c)) => return Err(format!("bad escape `\\{c}`")),
                    None => return Err("unterminated label value".into()),
                },
                Some((_, c)) => value.push(c),
                None => return Err("unterminated label value".into()),
            }
        }
        if labels.insert(key.clone(), value).is_some() {
            return Err(format!("duplicate label `{key}`"));
        }
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            Some((_, ',')) => {
                chars.next();
            }
            Some((_, '}')) => {}
            _ => return Err("expected `,` or `}` in label set".into()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScrapeError {
    #[error("scrape of {url} failed: {message}")]
    Network { url: String, message: String },
    #[error("scrape of {url} returned HTTP {status}")]
    Status { url: String, status: u16 },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// GET `url` and parse the exposition body.
pub async fn scrape(url: &str, timeout: Duration) -> Result<Vec<MetricSample>, ScrapeError> {
    let net = |e: reqwest::Error| ScrapeError::Network {
        url: url.to_owned(),
        message: e.to_string(),
    };
    let client = reqwest::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(net)?;
    let resp = client.get(url).send().await.map_err(net)?;
    if !resp.status().is_success() {
        return Err(ScrapeError::Status {
            url: url.to_owned(),
            status: resp.status().as_u16(),
        });
    }
    let body = resp.text().await.map_err(net)?;
    Ok(parse_exposition(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_adds() {
        let r = Registry::new();
        r.inc("hits", &[]);
        r.inc("hits", &[]);
        assert_eq!(r.render(), "# TYPE hits counter\nhits 2\n");
    }

    #[test]
    fn gauge_sets() {
        let r = Registry::new();
        r.set_gauge("g", &[], 5.0);
        r.set_gauge("g", &[], 3.0);
        assert_eq!(r.render(), "# TYPE g gauge\ng 3\n");
    }

    #[test]
    fn histogram_buckets() {
        let r = Registry::new();
        r.register_with_buckets("lat", MetricKind::Histogram, &[0.1, 0.5, 1.0])
            .unwrap();
        r.observe("lat", &[], 0.05);
        r.observe("lat", &[], 0.2);
        let text = r.render();
        assert_eq!(
            text,
            "# TYPE lat histogram\n\
             lat_bucket{le=\"0.1\"} 1\n\
             lat_bucket{le=\"0.5\"} 2\n\
             lat_bucket{le=\"1\"} 2\n\
             lat_bucket{le=\"+Inf\"} 2\n\
             lat_sum 0.25\n\
             lat_count 2\n"
        );
    }

    #[test]
    fn empty_registry_renders_nothing() {
        assert_eq!(Registry::new().render(), "");
    }

    #[test]
    fn counter_exact_line() {
        let r = Registry::new();
        r.add(HTTP_REQUESTS_TOTAL, &[("service", "echo")], 7.0);
        assert!(r
            .render()
            .lines()
            .any(|l| l == r#"http_requests_total{service="echo"} 7"#));
    }

    #[test]
    fn deterministic_order() {
        let r = Registry::new();
        r.inc("b", &[("z", "1")]);
        r.inc("b", &[("a", "2")]);
        r.set_gauge("a", &[], 1.0);
        let first = r.render();
        assert_eq!(first, r.render());
        assert_eq!(
            first,
            "# TYPE a gauge\na 1\n# TYPE b counter\nb{a=\"2\"} 1\nb{z=\"1\"} 1\n"
        );
    }

    #[test]
    fn rejects_bad_input() {
        let r = Registry::new();
        assert_eq!(
            r.register("9lives", MetricKind::Counter),
            Err(MetricsError::InvalidName("9lives".into()))
        );
        assert!(matches!(
            r.record(&MetricSample::new("c", &[], -1.0, MetricKind::Counter)),
            Err(MetricsError::CounterDecrease(_))
        ));
        assert!(matches!(
            r.record(&MetricSample::new("g", &[], f64::NAN, MetricKind::Gauge)),
            Err(MetricsError::NotFinite { .. })
        ));
        assert!(matches!(
            r.record(&MetricSample::new(
                "g",
                &[("bad-label", "x")],
                1.0,
                MetricKind::Gauge
            )),
            Err(MetricsError::InvalidLabel(_))
        ));
        r.set_gauge("g", &[], 1.0);
        assert!(matches!(
            r.record(&MetricSample::new("g", &[], 1.0, MetricKind::Counter)),
            Err(MetricsError::KindMismatch { .. })
        ));
    }

    #[test]
    fn label_escaping_round_trips() {
        let r = Registry::new();
        r.set_gauge("g", &[("path", "a\"b\\c\nd")], 1.5);
        let text = r.render();
        assert!(text.contains(r#"g{path="a\"b\\c\nd"} 1.5"#));
        let parsed = parse_exposition(&text).unwrap();
        assert_eq!(parsed[0].label("path"), Some("a\"b\\c\nd"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_exposition("# TYPE foo gauge\nfoo 1\nfoo{ 1\n").unwrap_err();
        assert_eq!(err.line, 3);
        for bad in [
            "foo",
            "foo{a=\"b\"}1",
            "foo{a=b} 1",
            "foo 1 2 3",
            "foo abc",
            "1foo 1",
        ] {
            assert!(parse_exposition(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn parses_histogram_family_kind() {
        let r = Registry::new();
        r.observe("lat", &[("service", "x")], 0.3);
        let samples = parse_exposition(&r.render()).unwrap();
        assert!(samples.iter().all(|s| s.kind == MetricKind::Histogram));
        assert_eq!(samples, r.samples());
    }

    #[test]
    fn add_gauge_tracks_inflight() {
        let r = Registry::new();
        r.add_gauge(REQUESTS_INFLIGHT, &[("service", "a")], 1.0);
        r.add_gauge(REQUESTS_INFLIGHT, &[("service", "a")], 1.0);
        r.add_gauge(REQUESTS_INFLIGHT, &[("service", "a")], -1.0);
        assert_eq!(r.scalar(REQUESTS_INFLIGHT, &[("service", "a")]), Some(1.0));
    }
}
