//! Two-tier authenticated web gateway: a certificate-authenticating frontend,
//! an origin-restricted backend ingress in front of a supervised replica
//! pool, a metric-driven autoscaler, and a load-benchmark harness.

pub mod admission;
pub mod auth;
pub mod autoscaler;
pub mod backend;
pub mod bench;
pub mod cli;
pub mod demo;
pub mod frontend;
pub mod http;
pub mod metrics;
pub mod origin;
pub mod supervisor;
pub mod tls;
pub mod topology;
pub mod workload;
