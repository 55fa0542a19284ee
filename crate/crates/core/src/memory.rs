//! Accounting of tensor buffer bytes.
//!
//! Every [`Matrix`](crate::tensor::Matrix) and [`FeatureMap`](crate::tensor::FeatureMap)
//! registers its buffer here on creation and unregisters it on drop. The
//! benchmark harness reads the high-water mark instead of probing OS RSS.
//! Byte counters are process-wide, so peak measurements are only meaningful
//! when a single workload runs at a time. The budget is per thread.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
thread_local! {
    // 0 means unlimited.
    static BUDGET: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently held by live tensor buffers.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Restart peak tracking from the current live byte count.
pub fn reset_peak() {
    PEAK.store(current_bytes(), Ordering::Relaxed);
}

/// Cap on live tensor bytes enforced by [`reserve`] for allocations made on
/// the calling thread; `None` removes the cap.
pub fn set_budget(bytes: Option<usize>) {
    BUDGET.with(|b| b.set(bytes.unwrap_or(0)));
}

pub fn budget() -> Option<usize> {
    match BUDGET.with(Cell::get) {
        0 => None,
        b => Some(b),
    }
}

/// Check that `bytes` more can be allocated without exceeding the budget.
///
/// Matrix products call this before allocating their output, which covers
/// the quadratic similarity buffers.
pub fn reserve(bytes: usize) -> Result<()> {
    match budget() {
        Some(budget) if current_bytes().saturating_add(bytes) > budget => Err(Error::OutOfMemory {
            requested: bytes,
            budget,
        }),
        _ => Ok(()),
    }
}
