//! Dense non-local attention, the quadratic reference every sparse path is
//! checked against.
//!
//! `Y = softmax(Q·Kᵀ)·V·W_o + X` with `Q = X·W_q`, `K = X·W_k`, `V = X·W_v`.
//! No `1/√ĉ` temperature is applied, here or in the sparse kernels.

use rand::Rng;

use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::{self, Exec, Matrix};

/// Projection weights of one dense attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct NlaWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl NlaWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let (c, e) = w_q.shape();
        for (name, m, want) in [
            ("w_k", &w_k, (c, e)),
            ("w_v", &w_v, (c, e)),
            ("w_o", &w_o, (e, c)),
        ] {
            if m.shape() != want {
                return Err(Error::shape(
                    "NlaWeights::new",
                    format!("{name} is {:?}, expected {want:?}", m.shape()),
                ));
            }
        }
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        Ok(NlaWeights { w_q, w_k, w_v, w_o })
    }

    /// Uniform `[-s, s]` initialization with `s = 1/√fan_in`.
    pub fn synthesize(channels: usize, embed: usize, rng: &mut impl Rng) -> Self {
        NlaWeights {
            w_q: uniform(channels, embed, channels, rng),
            w_k: uniform(channels, embed, channels, rng),
            w_v: uniform(channels, embed, channels, rng),
            w_o: uniform(embed, channels, embed, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn embed(&self) -> usize {
        self.w_q.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len()
    }
}

/// `rows × cols` matrix drawn from `U[-1/√fan_in, 1/√fan_in]`.
pub fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let s = 1.0 / (fan_in.max(1) as f32).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-s..=s))
}

#[derive(Debug, Clone)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn project_qkv(x: &Matrix, w: &NlaWeights) -> Result<Qkv> {
    project_qkv_with(x, w, Exec::Sequential)
}

pub fn project_qkv_with(x: &Matrix, w: &NlaWeights, exec: Exec) -> Result<Qkv> {
    if x.cols() != w.channels() {
        return Err(Error::shape(
            "project_qkv",
            format!(
                "input has {} channels, weights expect {}",
                x.cols(),
                w.channels()
            ),
        ));
    }
    counters::bump(|c| c.qk_projections += 1);
    Ok(Qkv {
        q: tensor::matmul_with(x, &w.w_q, exec)?,
        k: tensor::matmul_with(x, &w.w_k, exec)?,
        v: tensor::matmul_with(x, &w.w_v, exec)?,
    })
}

/// The row-stochastic similarity `softmax(Q·Kᵀ)`, `n × n`.
pub fn similarity(q: &Matrix, k: &Matrix, exec: Exec) -> Result<Matrix> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return Err(Error::shape(
            "similarity",
            format!("q is {:?}, k is {:?}", q.shape(), k.shape()),
        ));
    }
    let mut a = tensor::matmul_nt_with(q, k, exec)?;
    a.ensure_finite("similarity logits")?;
    tensor::row_softmax_in_place(&mut a);
    Ok(a)
}

/// `softmax(Q·Kᵀ)·V`, the attention output before the channel-restoring
/// projection.
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix, exec: Exec) -> Result<Matrix> {
    if v.rows() != k.rows() {
        return Err(Error::shape(
            "dense_attention",
            format!("{} values for {} keys", v.rows(), k.rows()),
        ));
    }
    let a = similarity(q, k, exec)?;
    let o = tensor::matmul_with(&a, v, exec)?;
    drop(a);
    o.ensure_finite("attention output")?;
    Ok(o)
}

pub fn nla_forward(x: &Matrix, w: &NlaWeights) -> Result<Matrix> {
    nla_forward_with(x, w, Exec::Sequential)
}

pub fn nla_forward_with(x: &Matrix, w: &NlaWeights, exec: Exec) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "nla_forward needs at least one position".into(),
        ));
    }
    let Qkv { q, k, v } = project_qkv_with(x, w, exec)?;
    let o = dense_attention(&q, &k, &v, exec)?;
    drop((q, k, v));
    let mut y = tensor::matmul_with(&o, &w.w_o, exec)?;
    drop(o);
    y.add_scaled(x, 1.0)?;
    y.ensure_finite("output")?;
    Ok(y)
}

/// Gradients of `Σ d_out ⊙ softmax(Q·Kᵀ)·V` with respect to Q, K and V.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

pub fn attention_vjp(q: &Matrix, k: &Matrix, v: &Matrix, d_out: &Matrix) -> Result<AttentionGrads> {
    if q.shape() != k.shape() || v.rows() != k.rows() || d_out.shape() != (q.rows(), v.cols()) {
        return Err(Error::shape(
            "attention_vjp",
            format!(
                "q {:?}, k {:?}, v {:?}, d_out {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                d_out.shape()
            ),
        ));
    }
    let a = similarity(q, k, Exec::Sequential)?;
    let d_v = tensor::matmul(&a.transpose(), d_out)?;
    // dA' = d_out·Vᵀ, then back through the row softmax:
    // dS_ij = A'_ij (dA'_ij − Σ_l A'_il dA'_il).
    let mut d_s = tensor::matmul_nt(d_out, v)?;
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let inner: f64 = a_row
            .iter()
            .zip(d_s.row(i))
            .map(|(&p, &g)| p as f64 * g as f64)
            .sum();
        for (g, &p) in d_s.row_mut(i).iter_mut().zip(a_row) {
            *g = (p as f64 * (*g as f64 - inner)) as f32;
        }
    }
    let d_q = tensor::matmul(&d_s, k)?;
    let d_k = tensor::matmul(&d_s.transpose(), q)?;
    Ok(AttentionGrads { d_q, d_k, d_v })
}
