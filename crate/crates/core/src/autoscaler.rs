//! Metric-driven replica autoscaling.
//!
//! [`desired_replicas`] is the whole scaling rule: proportional with a
//! ceiling, a tolerance dead-band around the target, and clamping to the
//! policy bounds. [`control_step`] applies it across policies with a
//! per-service cooldown and never scales on missing data.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricSample};

// Absorbs float error when ratio lands exactly on a band edge or an integer.
const EPS: f64 = 1e-9;

fn default_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalePolicy {
    pub service_name: String,
    pub metric_name: String,
    pub target_per_replica: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    pub cooldown_seconds: f64,
    pub evaluation_interval_seconds: f64,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("policy `{service}`: {message}")]
    Invalid { service: String, message: String },
    #[error("duplicate policy for service `{0}`")]
    Duplicate(String),
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |message: String| {
            Err(PolicyError::Invalid {
                service: self.service_name.clone(),
                message,
            })
        };
        if self.service_name.is_empty() {
            return bad("service_name must be nonempty".into());
        }
        if !metrics::valid_metric_name(&self.metric_name) {
            return bad(format!("invalid metric_name `{}`", self.metric_name));
        }
        if !(self.target_per_replica.is_finite() && self.target_per_replica > 0.0) {
            return bad("target_per_replica must be a positive number".into());
        }
        if self.min_replicas == 0 || self.max_replicas == 0 {
            return bad("replica bounds must be positive".into());
        }
        if self.min_replicas > self.max_replicas {
            return bad(format!(
                "min_replicas {} exceeds max_replicas {}",
                self.min_replicas, self.max_replicas
            ));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return bad("tolerance must lie strictly between 0 and 1".into());
        }
        if !(self.evaluation_interval_seconds.is_finite() && self.evaluation_interval_seconds > 0.0)
        {
            return bad("evaluation_interval_seconds must be positive".into());
        }
        if !(self.cooldown_seconds.is_finite() && self.cooldown_seconds > 0.0) {
            return bad("cooldown_seconds must be positive".into());
        }
        if self.cooldown_seconds < self.evaluation_interval_seconds {
            return bad("cooldown_seconds must be at least evaluation_interval_seconds".into());
        }
        Ok(())
    }

    pub fn clamp(&self, n: u32) -> u32 {
        n.clamp(self.min_replicas, self.max_replicas)
    }
}

/// Parse a JSON array of policies and validate each one.
pub fn load_policies(text: &str) -> Result<Vec<ScalePolicy>, PolicyError> {
    let policies: Vec<ScalePolicy> =
        serde_json::from_str(text).map_err(|e| PolicyError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    let mut seen = std::collections::HashSet::new();
    for p in &policies {
        p.validate()?;
        if !seen.insert(p.service_name.as_str()) {
            return Err(PolicyError::Duplicate(p.service_name.clone()));
        }
    }
    Ok(policies)
}

/// Replica count that brings the per-replica metric back to target.
///
/// Inside the dead-band the current count is kept (clamped, should the
/// bounds have moved since it was set).
pub fn desired_replicas(current: u32, observed_total: f64, policy: &ScalePolicy) -> u32 {
    let current = current.max(1);
    let observed = if observed_total.is_finite() {
        observed_total.max(0.0)
    } else {
        0.0
    };
    let ratio = observed / (f64::from(current) * policy.target_per_replica);
    if (ratio - 1.0).abs() <= policy.tolerance + EPS {
        return policy.clamp(current);
    }
    let raw = f64::from(current) * ratio;
    let nearest = raw.round();
    let wanted = if (raw - nearest).abs() <= EPS * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    let wanted = wanted.min(f64::from(u32::MAX)) as u32;
    policy.clamp(wanted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleDecision {
    pub service_name: String,
    pub current: u32,
    pub desired: u32,
    pub reason: String,
    /// Seconds on the caller's clock.
    pub effective_at: f64,
}

impl ScaleDecision {
    pub fn is_change(&self) -> bool {
        self.desired != self.current
    }
}

pub const REASON_METRIC_UNAVAILABLE: &str = "metric_unavailable";
pub const REASON_COOLDOWN: &str = "cooldown";
pub const REASON_WITHIN_TOLERANCE: &str = "within_tolerance";
pub const REASON_SCALE_UP: &str = "scale_up";
pub const REASON_SCALE_DOWN: &str = "scale_down";

/// Per-service replica counts and the time of the last applied change.
#[derive(Debug, Clone, Default)]
pub struct AutoscalerState {
    current: HashMap<String, u32>,
    last_change: HashMap<String, f64>,
}

impl AutoscalerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_current(&mut self, service: &str, replicas: u32) {
        self.current.insert(service.to_owned(), replicas);
    }

    pub fn current(&self, service: &str) -> Option<u32> {
        self.current.get(service).copied()
    }

    pub fn last_change(&self, service: &str) -> Option<f64> {
        self.last_change.get(service).copied()
    }
}

/// Sum of every sample named `metric` whose `service` label is `service`.
pub fn observed_total(samples: &[MetricSample], metric: &str, service: &str) -> Option<f64> {
    let mut matched = samples
        .iter()
        .filter(|s| s.name == metric && s.label("service") == Some(service))
        .peekable();
    matched.peek()?;
    Some(matched.map(|s| s.value).sum())
}

/// One evaluation across all policies. Changing decisions update `state`.
pub fn control_step(
    state: &mut AutoscalerState,
    samples: &[MetricSample],
    policies: &[ScalePolicy],
    now: f64,
) -> Vec<ScaleDecision> {
    policies
        .iter()
        .map(|policy| {
            let name = policy.service_name.as_str();
            let current = state.current(name).unwrap_or(policy.min_replicas).max(1);
            let hold = |reason: &str| ScaleDecision {
                service_name: name.to_owned(),
                current,
                desired: current,
                reason: reason.to_owned(),
                effective_at: now,
            };
            let Some(observed) = observed_total(samples, &policy.metric_name, name) else {
                return hold(REASON_METRIC_UNAVAILABLE);
            };
            let desired = desired_replicas(current, observed, policy);
            if desired == current {
                return hold(REASON_WITHIN_TOLERANCE);
            }
            if let Some(last) = state.last_change(name) {
                if now < last + policy.cooldown_seconds {
                    return hold(REASON_COOLDOWN);
                }
            }
            state.current.insert(name.to_owned(), desired);
            state.last_change.insert(name.to_owned(), now);
            ScaleDecision {
                service_name: name.to_owned(),
                current,
                desired,
                reason: if desired > current {
                    REASON_SCALE_UP
                } else {
                    REASON_SCALE_DOWN
                }
                .to_owned(),
                effective_at: now,
            }
        })
        .collect()
}

/// Applies replica-count changes somewhere: an in-process pool or a remote backend.
pub trait Actuator: Send + Sync {
    fn apply(
        &self,
        service: &str,
        desired: u32,
    ) -> impl std::future::Future<Output = anyhow::Result<()>> + Send;

    /// Replica counts the autoscaler should treat as current.
    fn current(
        &self,
    ) -> impl std::future::Future<Output = anyhow::Result<HashMap<String, u32>>> + Send;
}

/// Scrape, decide, apply; forever (or until `stop` resolves).
pub async fn run_loop<A: Actuator>(
    policies: Vec<ScalePolicy>,
    scrape_url: String,
    actuator: Option<A>,
    stop: impl std::future::Future<Output = ()>,
) {
    let interval = policies
        .iter()
        .map(|p| p.evaluation_interval_seconds)
        .fold(f64::INFINITY, f64::min);
    let interval = if interval.is_finite() { interval } else { 15.0 };
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(interval));
    let mut state = AutoscalerState::new();
    let started = tokio::time::Instant::now();
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => return,
            _ = ticker.tick() => {}
        }
        if let Some(act) = &actuator {
            match act.current().await {
                Ok(counts) => {
                    for (svc, n) in counts {
                        state.set_current(&svc, n);
                    }
                }
                Err(e) => tracing::warn!(error = %e, "reading current replica counts"),
            }
        }
        let samples = match metrics::scrape(&scrape_url, Duration::from_secs(2)).await {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "scrape failed; holding all services");
                Vec::new()
            }
        };
        let now = started.elapsed().as_secs_f64();
        for d in control_step(&mut state, &samples, &policies, now) {
            tracing::info!(
                service = %d.service_name,
                current = d.current,
                desired = d.desired,
                reason = %d.reason,
                "scale decision"
            );
            if let (true, Some(act)) = (d.is_change(), &actuator) {
                if let Err(e) = act.apply(&d.service_name, d.desired).await {
                    tracing::warn!(service = %d.service_name, error = %e, "applying scale decision");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;

    fn policy(min: u32, max: u32) -> ScalePolicy {
        ScalePolicy {
            service_name: "burn".into(),
            metric_name: "requests_inflight".into(),
            target_per_replica: 2.0,
            min_replicas: min,
            max_replicas: max,
            tolerance: 0.1,
            cooldown_seconds: 30.0,
            evaluation_interval_seconds: 10.0,
        }
    }

    fn inflight(v: f64) -> Vec<MetricSample> {
        vec![MetricSample::new(
            "requests_inflight",
            &[("service", "burn")],
            v,
            MetricKind::Gauge,
        )]
    }

    #[test]
    fn formula_examples() {
        let p = policy(1, 16);
        assert_eq!(desired_replicas(4, 4.0 * 2.0, &p), 4);
        assert_eq!(desired_replicas(4, 8.0 * 2.0, &p), 8);
        assert_eq!(desired_replicas(8, 0.0, &policy(4, 16)), 4);
    }

    #[test]
    fn band_edges_hold() {
        let p = policy(1, 64);
        for current in 1..=16u32 {
            for ratio in [0.9, 1.1] {
                let observed = f64::from(current) * p.target_per_replica * ratio;
                assert_eq!(desired_replicas(current, observed, &p), current);
            }
        }
    }

    #[test]
    fn out_of_bounds_current_is_clamped() {
        let p = policy(2, 8);
        assert_eq!(desired_replicas(12, 12.0 * 2.0, &p), 8);
        assert_eq!(desired_replicas(1, 2.0, &p), 2);
    }

    #[test]
    fn policy_validation() {
        let mut p = policy(4, 2);
        assert!(p.validate().is_err());
        p = policy(1, 2);
        p.tolerance = 1.0;
        assert!(p.validate().is_err());
        p = policy(1, 2);
        p.cooldown_seconds = 5.0;
        assert!(p.validate().is_err());
        p = policy(1, 2);
        p.metric_name = "bad name".into();
        assert!(p.validate().is_err());
        assert!(policy(1, 2).validate().is_ok());
    }

    #[test]
    fn load_policies_defaults_tolerance() {
        let ps = load_policies(
            r#"[{"service_name":"a","metric_name":"requests_inflight","target_per_replica":2,
                "min_replicas":1,"max_replicas":4,"cooldown_seconds":30,
                "evaluation_interval_seconds":10}]"#,
        )
        .unwrap();
        assert_eq!(ps[0].tolerance, 0.1);
        assert!(matches!(
            load_policies("[{}]"),
            Err(PolicyError::Parse { .. })
        ));
    }

    #[test]
    fn duplicate_policy_rejected() {
        let text = serde_json::to_string(&vec![policy(1, 2), policy(1, 2)]).unwrap();
        assert!(matches!(
            load_policies(&text),
            Err(PolicyError::Duplicate(_))
        ));
    }

    #[test]
    fn missing_metric_holds() {
        let mut state = AutoscalerState::new();
        state.set_current("burn", 4);
        let d = control_step(&mut state, &[], &[policy(1, 16)], 0.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].reason, REASON_METRIC_UNAVAILABLE);
        assert_eq!(d[0].desired, 4);
        // a sample for another service does not count
        let other = vec![MetricSample::new(
            "requests_inflight",
            &[("service", "echo")],
            100.0,
            MetricKind::Gauge,
        )];
        let d = control_step(&mut state, &other, &[policy(1, 16)], 1.0);
        assert_eq!(d[0].reason, REASON_METRIC_UNAVAILABLE);
    }

    #[test]
    fn constant_load_at_target_is_stable() {
        let mut state = AutoscalerState::new();
        state.set_current("burn", 4);
        for step in 0..20 {
            let d = control_step(
                &mut state,
                &inflight(8.0),
                &[policy(1, 16)],
                f64::from(step) * 10.0,
            );
            assert!(!d[0].is_change());
            assert_eq!(d[0].reason, REASON_WITHIN_TOLERANCE);
        }
    }

    #[test]
    fn cooldown_timeline() {
        let p = policy(1, 16);
        let mut state = AutoscalerState::new();
        state.set_current("burn", 4);
        // load doubles: per-replica metric at 2x target
        let d = control_step(&mut state, &inflight(16.0), std::slice::from_ref(&p), 0.0);
        assert_eq!((d[0].current, d[0].desired), (4, 8));
        assert_eq!(d[0].reason, REASON_SCALE_UP);
        // still 2x per replica 10s later: cooldown holds
        let d = control_step(&mut state, &inflight(32.0), std::slice::from_ref(&p), 10.0);
        assert_eq!((d[0].current, d[0].desired), (8, 8));
        assert_eq!(d[0].reason, REASON_COOLDOWN);
        let d = control_step(&mut state, &inflight(32.0), std::slice::from_ref(&p), 29.9);
        assert_eq!(d[0].reason, REASON_COOLDOWN);
        let d = control_step(&mut state, &inflight(32.0), std::slice::from_ref(&p), 30.0);
        assert_eq!((d[0].current, d[0].desired), (8, 16));
        // cooldown applies to scale-down too
        let d = control_step(&mut state, &inflight(0.0), std::slice::from_ref(&p), 40.0);
        assert_eq!(d[0].reason, REASON_COOLDOWN);
        let d = control_step(&mut state, &inflight(0.0), &[p], 60.0);
        assert_eq!((d[0].desired, d[0].reason.as_str()), (1, REASON_SCALE_DOWN));
    }

    #[test]
    fn observed_total_sums_series() {
        let mut samples = inflight(3.0);
        samples.push(MetricSample::new(
            "requests_inflight",
            &[("service", "burn"), ("replica", "2")],
            4.0,
            MetricKind::Gauge,
        ));
        assert_eq!(
            observed_total(&samples, "requests_inflight", "burn"),
            Some(7.0)
        );
        assert_eq!(observed_total(&samples, "requests_inflight", "x"), None);
    }
}
