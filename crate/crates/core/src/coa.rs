//! Collaborative attention: every layer reuses one set of sparse weights and
//! only learns a value projection.
//!
//! `O_m = X_m + β · A_s(X_m · W_m) · W_out`. `W_out` restores the channel count
//! when the embedding is narrower than the features and is omitted (identity)
//! otherwise.

use crate::error::{Error, Result};
use crate::lsp::{self, AttentionPlan, SharedWeights};
use crate::tensor::{self, Exec, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct CoaLayer {
    pub w_m: Matrix,
    pub w_out: Option<Matrix>,
    pub beta: f32,
}

impl CoaLayer {
    pub fn new(w_m: Matrix, w_out: Option<Matrix>, beta: f32) -> Result<Self> {
        let (c, e) = w_m.shape();
        match &w_out {
            Some(w) if w.shape() != (e, c) => {
                return Err(Error::shape(
                    "CoaLayer::new",
                    format!("w_out is {:?}, expected {:?}", w.shape(), (e, c)),
                ))
            }
            None if c != e => {
                return Err(Error::shape(
                    "CoaLayer::new",
                    format!("w_m maps {c} -> {e} channels, so w_out is required"),
                ))
            }
            _ => {}
        }
        if !beta.is_finite() || !w_m.is_finite() || w_out.as_ref().is_some_and(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "CoaLayer parameters must be finite".into(),
            ));
        }
        Ok(CoaLayer { w_m, w_out, beta })
    }

    pub fn channels(&self) -> usize {
        self.w_m.rows()
    }

    pub fn embed(&self) -> usize {
        self.w_m.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_m.len() + self.w_out.as_ref().map_or(0, Matrix::len) + 1
    }
}

pub fn coa_forward(
    x_m: &Matrix,
    layer: &CoaLayer,
    weights: &SharedWeights,
    plan: &AttentionPlan,
) -> Result<Matrix> {
    coa_forward_with(x_m, layer, weights, plan, Exec::Sequential)
}

pub fn coa_forward_with(
    x_m: &Matrix,
    layer: &CoaLayer,
    weights: &SharedWeights,
    plan: &AttentionPlan,
    exec: Exec,
) -> Result<Matrix> {
    if x_m.rows() != plan.n() {
        return Err(Error::shape(
            "coa_forward",
            format!("{} positions for a plan over {}", x_m.rows(), plan.n()),
        ));
    }
    if x_m.cols() != layer.channels() {
        return Err(Error::shape(
            "coa_forward",
            format!(
                "input has {} channels, layer expects {}",
                x_m.cols(),
                layer.channels()
            ),
        ));
    }
    let v = tensor::matmul_with(x_m, &layer.w_m, exec)?;
    let mut o = lsp::sparse_attention_apply_with(weights, plan, &v, exec)?;
    drop(v);
    if let Some(w_out) = &layer.w_out {
        o = tensor::matmul_with(&o, w_out, exec)?;
    }
    let mut y = x_m.clone();
    y.add_scaled(&o, layer.beta)?;
    y.ensure_finite("collaborative attention output")?;
    Ok(y)
}
