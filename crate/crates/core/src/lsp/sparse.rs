//! Windowed sparse attention over an [`AttentionPlan`].

use std::ops::Range;

use rayon::prelude::*;

use super::plan::AttentionPlan;
use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::{self, Exec, Matrix};

/// Per-window attention weights `A_s`.
///
/// Block `w` is `window_size × span(w).len()` and row-stochastic over the
/// real keys of the span; pad key columns are exactly zero. Rows belonging to
/// pad queries are computed but never read.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedWeights {
    n: usize,
    window_size: usize,
    span_previous: bool,
    blocks: Vec<Matrix>,
}

impl SharedWeights {
    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn block(&self, w: usize) -> &Matrix {
        &self.blocks[w]
    }

    pub fn num_windows(&self) -> usize {
        self.blocks.len()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    /// Number of stored weights.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn check_plan(&self, plan: &AttentionPlan) -> Result<()> {
        if self.n != plan.n()
            || self.window_size != plan.window_size()
            || self.blocks.len() != plan.num_windows()
            || self.span_previous != plan.span_previous()
        {
            return Err(Error::shape(
                "sparse_attention_apply",
                format!(
                    "weights for n={} window={} windows={} do not match plan n={} window={} windows={}",
                    self.n,
                    self.window_size,
                    self.blocks.len(),
                    plan.n(),
                    plan.window_size(),
                    plan.num_windows()
                ),
            ));
        }
        Ok(())
    }
}

/// Copies the rows backing `slots` out of a matrix already in sorted order.
fn slot_rows(sorted: &Matrix, plan: &AttentionPlan, slots: Range<usize>) -> Matrix {
    let mut out = Matrix::zeros(slots.len(), sorted.cols());
    for (r, s) in slots.enumerate() {
        out.row_mut(r).copy_from_slice(sorted.row(plan.slot_row(s)));
    }
    out
}

fn per_window<T: Send>(
    plan: &AttentionPlan,
    exec: Exec,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match exec {
        Exec::Sequential => (0..plan.num_windows()).map(f).collect(),
        Exec::Parallel => (0..plan.num_windows()).into_par_iter().map(f).collect(),
    }
}

pub fn sparse_attention_weights(
    q: &Matrix,
    k_mat: &Matrix,
    plan: &AttentionPlan,
) -> Result<SharedWeights> {
    sparse_attention_weights_with(q, k_mat, plan, Exec::Sequential)
}

/// Softmax of `Q_w · K_spanᵀ` per window, with pad keys at `-inf`.
pub fn sparse_attention_weights_with(
    q: &Matrix,
    k_mat: &Matrix,
    plan: &AttentionPlan,
    exec: Exec,
) -> Result<SharedWeights> {
    if q.rows() != plan.n() || k_mat.rows() != plan.n() || q.cols() != k_mat.cols() {
        return Err(Error::shape(
            "sparse_attention_weights",
            format!(
                "q {:?} and k {:?} for a plan over {} positions",
                q.shape(),
                k_mat.shape(),
                plan.n()
            ),
        ));
    }
    counters::bump(|c| c.weight_builds += 1);
    let qs = tensor::gather_rows(q, plan.perm())?;
    let ks = tensor::gather_rows(k_mat, plan.perm())?;
    let blocks = per_window(plan, exec, |w| {
        let span = plan.span(w);
        let qw = slot_rows(&qs, plan, plan.window(w));
        let kw = slot_rows(&ks, plan, span.clone());
        let mut logits = tensor::matmul_nt(&qw, &kw)?;
        logits.ensure_finite("sparse logits")?;
        let cols = logits.cols();
        for (c, slot) in span.enumerate() {
            if plan.is_pad(slot) {
                for r in 0..logits.rows() {
                    logits.as_mut_slice()[r * cols + c] = f32::NEG_INFINITY;
                }
            }
        }
        tensor::row_softmax_in_place(&mut logits);
        Ok(logits)
    })?;
    Ok(SharedWeights {
        n: plan.n(),
        window_size: plan.window_size(),
        span_previous: plan.span_previous(),
        blocks,
    })
}

pub fn sparse_attention_apply(
    weights: &SharedWeights,
    plan: &AttentionPlan,
    v: &Matrix,
) -> Result<Matrix> {
    sparse_attention_apply_with(weights, plan, v, Exec::Sequential)
}

/// Gathers `v` into sorted order, multiplies each window by its block of
/// `A_s` over the span, and scatters the real rows back.
pub fn sparse_attention_apply_with(
    weights: &SharedWeights,
    plan: &AttentionPlan,
    v: &Matrix,
    exec: Exec,
) -> Result<Matrix> {
    weights.check_plan(plan)?;
    if v.rows() != plan.n() {
        return Err(Error::shape(
            "sparse_attention_apply",
            format!(
                "{} value rows for a plan over {} positions",
                v.rows(),
                plan.n()
            ),
        ));
    }
    let vs = tensor::gather_rows(v, plan.perm())?;
    let outs = per_window(plan, exec, |w| {
        let vw = slot_rows(&vs, plan, plan.span(w));
        tensor::matmul(weights.block(w), &vw)
    })?;
    drop(vs);
    let mut sorted = Matrix::zeros(plan.n(), v.cols());
    for (w, out) in outs.iter().enumerate() {
        for (r, slot) in plan.window(w).enumerate() {
            if !plan.is_pad(slot) {
                sorted.row_mut(slot).copy_from_slice(out.row(r));
            }
        }
    }
    drop(outs);
    tensor::scatter_rows(&sorted, plan.perm())
}
