//! Learnable sparse pattern.
//!
//! Queries and keys are projected onto the unit sphere and assigned to the
//! nearest of `k` learned centroids. Positions are sorted by cluster, cut into
//! fixed windows, and each query attends to its own window plus the one before
//! it. Softmax runs over that restricted key set on the un-normalized Q and K.

mod kmeans;
mod plan;
mod sparse;

pub use kmeans::{assign_clusters, ema_step, update_centroids, KMeansState};
pub use plan::{build_plan, AttentionPlan};
pub use sparse::{
    sparse_attention_apply, sparse_attention_apply_with, sparse_attention_weights,
    sparse_attention_weights_with, SharedWeights,
};

use crate::counters;
use crate::error::{Error, Result};
use crate::nla::{self, NlaWeights};
use crate::tensor::{self, Exec, Matrix};

pub const DEFAULT_CLUSTERS: usize = 128;
pub const DEFAULT_WINDOW: usize = 384;
pub const DEFAULT_DECAY: f32 = 0.999;

/// Rows with a smaller norm are left as they are when projecting to the sphere.
pub const NORMALIZE_EPS: f32 = 1e-12;

/// Query/key projections feeding the sparse pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct LspProjection {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl LspProjection {
    pub fn new(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::shape(
                "LspProjection::new",
                format!("w_q {:?} vs w_k {:?}", w_q.shape(), w_k.shape()),
            ));
        }
        Ok(LspProjection { w_q, w_k })
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn embed(&self) -> usize {
        self.w_q.cols()
    }
}

/// Whether centroids move during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LspMode {
    #[default]
    Inference,
    Train,
}

#[derive(Debug, Clone)]
pub struct LspOutput {
    pub weights: SharedWeights,
    pub plan: AttentionPlan,
    pub state: KMeansState,
}

/// Clusters, plans and weights from already projected queries and keys.
pub fn lsp_from_qk(
    q: &Matrix,
    k: &Matrix,
    state: &KMeansState,
    window_size: usize,
    mode: LspMode,
    exec: Exec,
) -> Result<LspOutput> {
    let qn = tensor::l2_normalize_rows(q, NORMALIZE_EPS);
    let kn = tensor::l2_normalize_rows(k, NORMALIZE_EPS);
    let labels_q = assign_clusters(&qn, state)?;
    let state = match mode {
        LspMode::Inference => state.clone(),
        LspMode::Train => {
            let labels_k = assign_clusters(&kn, state)?;
            update_centroids(state, &qn, &kn, &labels_q, &labels_k)?
        }
    };
    drop((qn, kn));
    let plan = build_plan(&labels_q, window_size, q.rows())?;
    let weights = sparse_attention_weights_with(q, k, &plan, exec)?;
    Ok(LspOutput {
        weights,
        plan,
        state,
    })
}

/// Sparse weights `A_s` computed on the shallow features `x1`.
pub fn lsp_forward(
    x1: &Matrix,
    proj: &LspProjection,
    state: &KMeansState,
    window_size: usize,
    mode: LspMode,
) -> Result<LspOutput> {
    lsp_forward_with(x1, proj, state, window_size, mode, Exec::Sequential)
}

pub fn lsp_forward_with(
    x1: &Matrix,
    proj: &LspProjection,
    state: &KMeansState,
    window_size: usize,
    mode: LspMode,
    exec: Exec,
) -> Result<LspOutput> {
    if x1.cols() != proj.channels() {
        return Err(Error::shape(
            "lsp_forward",
            format!(
                "input has {} channels, projections expect {}",
                x1.cols(),
                proj.channels()
            ),
        ));
    }
    if state.dim() != proj.embed() {
        return Err(Error::shape(
            "lsp_forward",
            format!(
                "centroids have {} dims, projections {}",
                state.dim(),
                proj.embed()
            ),
        ));
    }
    counters::bump(|c| c.qk_projections += 1);
    let q = tensor::matmul_with(x1, &proj.w_q, exec)?;
    let k = tensor::matmul_with(x1, &proj.w_k, exec)?;
    lsp_from_qk(&q, &k, state, window_size, mode, exec)
}

/// A full attention block with a sparse pattern of its own:
/// `Y = X + W_o(sparse(Q, K, V))`, re-planned on every call.
pub fn sparse_nla_forward(
    x: &Matrix,
    w: &NlaWeights,
    state: &KMeansState,
    window_size: usize,
    exec: Exec,
) -> Result<Matrix> {
    let nla::Qkv { q, k, v } = nla::project_qkv_with(x, w, exec)?;
    let out = lsp_from_qk(&q, &k, state, window_size, LspMode::Inference, exec)?;
    drop((q, k));
    let o = sparse_attention_apply_with(&out.weights, &out.plan, &v, exec)?;
    drop((v, out));
    let mut y = tensor::matmul_with(&o, &w.w_o, exec)?;
    y.add_scaled(x, 1.0)?;
    y.ensure_finite("sparse attention output")?;
    Ok(y)
}

#[cfg(test)]
mod tests;
