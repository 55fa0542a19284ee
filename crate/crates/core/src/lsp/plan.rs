//! Centroid-sorted fixed-size windows.

use std::ops::Range;

use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::Permutation;

/// Which keys each query attends to.
///
/// Positions are sorted by `(cluster label, position)` and cut into windows of
/// `window_size` slots. If the last window is short it is filled with pad slots
/// that replicate the last sorted position; pad keys are masked out of the
/// softmax and pad query outputs are dropped. With `span_previous`, window
/// `w ≥ 1` also attends to window `w − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPlan {
    perm: Permutation,
    sorted_labels: Vec<usize>,
    window_size: usize,
    num_windows: usize,
    pad_count: usize,
    span_previous: bool,
}

pub fn build_plan(labels: &[usize], window_size: usize, n: usize) -> Result<AttentionPlan> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot plan attention over zero positions".into(),
        ));
    }
    if window_size == 0 {
        return Err(Error::InvalidArgument(
            "window size must be at least 1".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "build_plan",
            format!("{} labels for {n} positions", labels.len()),
        ));
    }
    counters::bump(|c| c.plan_builds += 1);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable, so equal labels keep position order.
    order.sort_by_key(|&i| labels[i]);
    let sorted_labels = order.iter().map(|&i| labels[i]).collect();
    let num_windows = n.div_ceil(window_size);
    Ok(AttentionPlan {
        perm: Permutation::new(order)?,
        sorted_labels,
        window_size,
        num_windows,
        pad_count: num_windows * window_size - n,
        span_previous: true,
    })
}

impl AttentionPlan {
    /// Same plan with the adjacent-window span switched on or off.
    pub fn with_span_previous(mut self, span_previous: bool) -> Self {
        self.span_previous = span_previous;
        self
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    /// Cluster labels in sorted (slot) order; non-decreasing.
    pub fn sorted_labels(&self) -> &[usize] {
        &self.sorted_labels
    }

    /// Number of real positions.
    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn num_windows(&self) -> usize {
        self.num_windows
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn span_previous(&self) -> bool {
        self.span_previous
    }

    /// Total slots, `num_windows · window_size`.
    pub fn slots(&self) -> usize {
        self.num_windows * self.window_size
    }

    pub fn is_pad(&self, slot: usize) -> bool {
        slot >= self.n()
    }

    /// Row of the permuted (sorted) matrix that backs `slot`.
    pub fn slot_row(&self, slot: usize) -> usize {
        slot.min(self.n() - 1)
    }

    /// Query slots of window `w`.
    pub fn window(&self, w: usize) -> Range<usize> {
        w * self.window_size..(w + 1) * self.window_size
    }

    /// Key slots attended by the queries of window `w`.
    pub fn span(&self, w: usize) -> Range<usize> {
        let start = if self.span_previous && w > 0 {
            w - 1
        } else {
            w
        };
        start * self.window_size..(w + 1) * self.window_size
    }
}
