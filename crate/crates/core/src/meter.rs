//! Operation counters for the estimator cost contract.
//!
//! Every estimator increments the meter exactly once per underlying model
//! pass: one tick per recorded forward, one tick per backward sweep. The
//! counters are cumulative across calls; take snapshots to get per-call
//! deltas.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct CostMeter {
    forwards: AtomicU64,
    backwards: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostSnapshot {
    pub forwards: u64,
    pub backwards: u64,
}

impl CostSnapshot {
    /// Passes spent between `earlier` and `self`.
    pub fn since(&self, earlier: CostSnapshot) -> CostSnapshot {
        CostSnapshot {
            forwards: self.forwards - earlier.forwards,
            backwards: self.backwards - earlier.backwards,
        }
    }
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count_forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count_backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CostSnapshot {
        CostSnapshot {
            forwards: self.forwards.load(Ordering::Relaxed),
            backwards: self.backwards.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_are_additive_across_calls() {
        let meter = CostMeter::new();
        meter.count_forward();
        meter.count_forward();
        meter.count_backward();
        let first = meter.snapshot();
        assert_eq!(first, CostSnapshot { forwards: 2, backwards: 1 });
        meter.count_forward();
        let second = meter.snapshot();
        assert_eq!(second.since(first), CostSnapshot { forwards: 1, backwards: 0 });
        assert_eq!(second, CostSnapshot { forwards: 3, backwards: 1 });
    }
}
