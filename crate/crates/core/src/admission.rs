//! Connection admission control for the backend ingress.
//!
//! The limit is a hard ceiling on concurrently open connections. A connection
//! over the limit is answered with 503 and closed, and counted in
//! `rejected_total`.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

pub const DEFAULT_CONNECTION_LIMIT: usize = 1024;

#[derive(Debug)]
pub struct AdmissionState {
    active: AtomicUsize,
    peak: AtomicUsize,
    limit: usize,
    rejected_total: AtomicU64,
}

/// Holds one admitted slot; releasing happens on drop.
#[derive(Debug)]
pub struct AdmissionGuard {
    state: Arc<AdmissionState>,
}

impl Drop for AdmissionGuard {
    fn drop(&mut self) {
        self.state.active.fetch_sub(1, Ordering::AcqRel);
    }
}

#[derive(Debug)]
pub enum Admission {
    Admit(AdmissionGuard),
    Reject,
}

impl Admission {
    pub fn is_admitted(&self) -> bool {
        matches!(self, Admission::Admit(_))
    }
}

impl AdmissionState {
    /// Panics if `limit` is zero.
    pub fn new(limit: usize) -> Arc<Self> {
        assert!(limit > 0, "connection limit must be positive");
        Arc::new(Self {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            limit,
            rejected_total: AtomicU64::new(0),
        })
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::Acquire)
    }

    /// Highest active count ever reached.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected_total.load(Ordering::Acquire)
    }
}

/// Take a slot if one is free.
pub fn admit_connection(state: &Arc<AdmissionState>) -> Admission {
    let mut current = state.active.load(Ordering::Acquire);
    loop {
        if current >= state.limit {
            state.rejected_total.fetch_add(1, Ordering::AcqRel);
            return Admission::Reject;
        }
        match state.active.compare_exchange_weak(
            current,
            current + 1,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => {
                debug_assert!(current < state.limit);
                state.peak.fetch_max(current + 1, Ordering::AcqRel);
                return Admission::Admit(AdmissionGuard {
                    state: Arc::clone(state),
                });
            }
            Err(actual) => current = actual,
        }
    }
}
