//! Dense row-major tensors and the handful of operations attention needs.
//!
//! Layout: a feature map of `height × width × channels` is stored pixel by
//! pixel in row-major order with channels contiguous, so flattening it into an
//! `n × channels` matrix (`n = height · width`) is a no-op on the buffer.
//! Values are f32; matmul and softmax accumulate in f64.

mod kernel;

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::counters;
use crate::error::{Error, Result};
use crate::memory;

/// Whether row- or window-level work may be spread over the rayon pool.
/// Outputs are bit-identical either way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

/// f32 storage that reports its size to [`memory`].
pub(crate) struct Buf(Vec<f32>);

impl Buf {
    pub(crate) fn new(v: Vec<f32>) -> Self {
        memory::on_alloc(v.len() * 4);
        Buf(v)
    }

    fn zeros(len: usize) -> Self {
        Buf::new(vec![0.0; len])
    }

    fn into_vec(mut self) -> Vec<f32> {
        let v = std::mem::take(&mut self.0);
        memory::on_free(v.len() * 4);
        v
    }
}

impl Drop for Buf {
    fn drop(&mut self) {
        memory::on_free(self.0.len() * 4);
    }
}

impl Clone for Buf {
    fn clone(&self) -> Self {
        Buf::new(self.0.clone())
    }
}

impl Deref for Buf {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for Buf {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

impl PartialEq for Buf {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Buf,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Matrix");
        d.field("rows", &self.rows).field("cols", &self.cols);
        if self.data.len() <= 64 {
            d.field("data", &&self.data[..]);
        }
        d.finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: Buf::zeros(rows * cols),
        }
    }

    /// Zero matrix whose allocation is checked against the memory budget first.
    pub fn try_zeros(rows: usize, cols: usize) -> Result<Self> {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument(format!("{rows}x{cols} matrix overflows")))?;
        memory::reserve(len.saturating_mul(4))?;
        let mut v = Vec::new();
        v.try_reserve_exact(len).map_err(|_| Error::OutOfMemory {
            requested: len.saturating_mul(4),
            budget: memory::budget().unwrap_or(usize::MAX),
        })?;
        v.resize(len, 0.0);
        Ok(Matrix {
            rows,
            cols,
            data: Buf::new(v),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            data: Buf::new(data),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix {
            rows,
            cols,
            data: Buf::new(data),
        }
    }

    /// Builds a matrix from equally sized rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data: Buf::new(data),
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data.into_vec()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let c = self.cols;
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, stage: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { stage })
        }
    }

    /// `self += beta · other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, beta: f32) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += beta * b;
        }
        Ok(())
    }

    /// Largest elementwise absolute difference; `f32::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        if self.shape() != other.shape() {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Number of stored scalars.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `height × width × channels` feature map.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Buf,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish()
    }
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "FeatureMap::new",
                format!(
                    "{} values for a {height}x{width}x{channels} map",
                    data.len()
                ),
            ));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data: Buf::new(data),
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: Buf::zeros(height * width * channels),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        FeatureMap {
            height,
            width,
            channels,
            data: Buf::new(data),
        }
    }

    /// Reinterprets an `n × c` matrix as a map; `n` must equal `height · width`.
    pub fn from_matrix(height: usize, width: usize, m: Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::shape(
                "FeatureMap::from_matrix",
                format!("{} rows for a {height}x{width} map", m.rows()),
            ));
        }
        let channels = m.cols();
        Ok(FeatureMap {
            height,
            width,
            channels,
            data: m.data,
        })
    }

    /// Flattens to `n × channels` without copying.
    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        self.clone().into_matrix()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial positions, `height · width`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A bijection on `[0, n)`; `forward[i]` is the source row of output row `i`
/// under [`gather_rows`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut seen = vec![false; n];
        for &i in &forward {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidPermutation(format!("index {i} repeated")));
            }
        }
        Ok(Permutation { forward })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            forward: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.forward.len()];
        for (i, &p) in self.forward.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { forward: inv }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Exec::Sequential)
}

pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::try_zeros(a.rows, b.cols)?;
    kernel::gemm_nn(
        &a.data,
        &b.data,
        a.rows,
        b.cols,
        a.cols,
        &mut out.data,
        exec,
    );
    Ok(out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_nt_with(a, b, Exec::Sequential)
}

pub fn matmul_nt_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::try_zeros(a.rows, b.rows)?;
    kernel::gemm_nt(
        &a.data,
        &b.data,
        a.rows,
        b.rows,
        a.cols,
        &mut out.data,
        exec,
    );
    Ok(out)
}

/// Per-pixel linear map, equivalent to a 1×1 convolution on the unflattened map.
pub fn linear_map(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols != w.rows {
        return Err(Error::shape(
            "linear_map",
            format!("input has {} channels, weight expects {}", x.cols, w.rows),
        ));
    }
    matmul(x, w)
}

/// Numerically stable softmax of one row, in place.
///
/// `-inf` entries are masked and receive exactly zero weight. A row with no
/// finite entry becomes all zeros.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    row_softmax_in_place(&mut out);
    out
}

pub fn row_softmax_in_place(a: &mut Matrix) {
    let cols = a.cols;
    if cols == 0 {
        return;
    }
    for row in a.data.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

/// Scales each row to unit L2 norm. Rows with norm below `eps` are returned
/// unchanged.
pub fn l2_normalize_rows(a: &Matrix, eps: f32) -> Matrix {
    let mut out = a.clone();
    let cols = out.cols;
    if cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(cols) {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm >= eps as f64 {
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
    out
}

/// Output row `i` is input row `p[i]`.
pub fn gather_rows(a: &Matrix, p: &Permutation) -> Result<Matrix> {
    if p.len() != a.rows {
        return Err(Error::shape(
            "gather_rows",
            format!("permutation of {} for {} rows", p.len(), a.rows),
        ));
    }
    counters::bump(|c| c.gathers += 1);
    let mut out = Matrix::zeros(a.rows, a.cols);
    for (i, &src) in p.forward.iter().enumerate() {
        if src >= a.rows {
            return Err(Error::IndexOutOfRange {
                index: src,
                len: a.rows,
            });
        }
        out.row_mut(i).copy_from_slice(a.row(src));
    }
    Ok(out)
}

/// Output row `p[i]` is input row `i`; the exact inverse of [`gather_rows`].
pub fn scatter_rows(a: &Matrix, p: &Permutation) -> Result<Matrix> {
    if p.len() != a.rows {
        return Err(Error::shape(
            "scatter_rows",
            format!("permutation of {} for {} rows", p.len(), a.rows),
        ));
    }
    counters::bump(|c| c.scatters += 1);
    let mut out = Matrix::zeros(a.rows, a.cols);
    for (i, &dst) in p.forward.iter().enumerate() {
        if dst >= a.rows {
            return Err(Error::IndexOutOfRange {
                index: dst,
                len: a.rows,
            });
        }
        out.row_mut(dst).copy_from_slice(a.row(i));
    }
    Ok(out)
}
