//! Per-thread operation counters.
//!
//! Used by tests and the benchmark log to check the sharing contract: how many
//! plans were built, how many Q/K projections ran and how many row
//! permutations were applied. Thread-local so concurrent tests do not see each
//! other's counts.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub gathers: u64,
    pub scatters: u64,
    pub plan_builds: u64,
    pub weight_builds: u64,
    pub qk_projections: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts {
        gathers: 0,
        scatters: 0,
        plan_builds: 0,
        weight_builds: 0,
        qk_projections: 0,
    }) };
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub(crate) fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

impl OpCounts {
    /// Counts accumulated since `earlier` was taken.
    pub fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts {
            gathers: self.gathers - earlier.gathers,
            scatters: self.scatters - earlier.scatters,
            plan_builds: self.plan_builds - earlier.plan_builds,
            weight_builds: self.weight_builds - earlier.weight_builds,
            qk_projections: self.qk_projections - earlier.qk_projections,
        }
    }
}
