//! Register-tiled matrix product with 64-bit accumulation.
//!
//! The right-hand operand is packed into column strips of `NR` and the product
//! is built from `MR × NR` tiles held in f64 registers. Every output element is
//! the plain sequential sum over `k`, so results are bit-identical across
//! tilings, row partitions and thread counts.

use rayon::prelude::*;

use super::Exec;

const MR: usize = 8;
const NR: usize = 16;
// Depth beyond which partial sums are kept in memory between k-blocks.
const KC: usize = 512;
// Target footprint of the packed strips reused across one sweep of A rows.
const STRIP_BLOCK_BYTES: usize = 256 * 1024;

/// Packs `b` into `ceil(n / NR)` strips of `k × NR`, zero-padding ragged
/// columns. `col(j, p)` reads logical element `(p, j)`.
fn pack(n: usize, k: usize, col: impl Fn(usize, usize) -> f32) -> Vec<f32> {
    let strips = n.div_ceil(NR);
    let mut packed = vec![0f32; strips * k * NR];
    for s in 0..strips {
        let strip = &mut packed[s * k * NR..(s + 1) * k * NR];
        let width = NR.min(n - s * NR);
        for (p, dst) in strip.chunks_exact_mut(NR).enumerate() {
            for (c, d) in dst.iter_mut().take(width).enumerate() {
                *d = col(s * NR + c, p);
            }
        }
    }
    packed
}

/// Continues the running sums in `acc` over `a[r][p] * strip[p][c]` for all
/// `p` in the (already sliced) range.
#[inline(always)]
fn tile<const R: usize>(acc: &mut [[f64; NR]; R], a: [&[f32]; R], strip: &[f32]) {
    let k = strip.len() / NR;
    let a = a.map(|r| &r[..k]);
    for (p, b) in strip.chunks_exact(NR).enumerate() {
        let b: &[f32; NR] = b.try_into().unwrap();
        let bv = b.map(|v| v as f64);
        for r in 0..R {
            let av = a[r][p] as f64;
            for c in 0..NR {
                acc[r][c] += av * bv[c];
            }
        }
    }
}

#[inline(always)]
fn store<const R: usize>(acc: &[[f64; NR]; R], out: &mut [f32], n: usize, i: usize, j: usize) {
    let width = NR.min(n - j);
    for (r, row) in acc.iter().enumerate() {
        let dst = &mut out[(i + r) * n + j..(i + r) * n + j + width];
        for (d, &v) in dst.iter_mut().zip(row.iter()) {
            *d = v as f32;
        }
    }
}

/// Rows `[row0, row0 + out.len() / n)` of the product.
fn rows(a: &[f32], packed: &[f32], n: usize, k: usize, row0: usize, out: &mut [f32]) {
    if k <= KC {
        rows_shallow(a, packed, n, k, row0, out)
    } else {
        rows_deep(a, packed, n, k, row0, out)
    }
}

/// Deep products: sweep `k` in blocks so each block of packed strips stays
/// cache resident across all rows, carrying f64 partial sums in memory.
fn rows_deep(a: &[f32], packed: &[f32], n: usize, k: usize, row0: usize, out: &mut [f32]) {
    let m_local = out.len() / n;
    let strips = n.div_ceil(NR);
    let mut partial = vec![[0f64; NR]; m_local * strips];
    let a_row = |i: usize, k0: usize, k1: usize| &a[(row0 + i) * k + k0..(row0 + i) * k + k1];
    let strip = |s: usize, k0: usize, k1: usize| &packed[(s * k + k0) * NR..(s * k + k1) * NR];

    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + KC).min(k);
        let mut i = 0;
        while i + MR <= m_local {
            let ar: [&[f32]; MR] = std::array::from_fn(|r| a_row(i + r, k0, k1));
            for s in 0..strips {
                let mut acc: [[f64; NR]; MR] =
                    std::array::from_fn(|r| partial[(i + r) * strips + s]);
                tile::<MR>(&mut acc, ar, strip(s, k0, k1));
                for (r, row) in acc.iter().enumerate() {
                    partial[(i + r) * strips + s] = *row;
                }
            }
            i += MR;
        }
        while i < m_local {
            for s in 0..strips {
                let mut acc = [partial[i * strips + s]];
                tile::<1>(&mut acc, [a_row(i, k0, k1)], strip(s, k0, k1));
                partial[i * strips + s] = acc[0];
            }
            i += 1;
        }
        k0 = k1;
    }
    for i in 0..m_local {
        for s in 0..strips {
            store(&[partial[i * strips + s]], out, n, i, s * NR);
        }
    }
}

fn rows_shallow(a: &[f32], packed: &[f32], n: usize, k: usize, row0: usize, out: &mut [f32]) {
    let m_local = out.len() / n;
    let strips = n.div_ceil(NR);
    let per_block = (STRIP_BLOCK_BYTES / (4 * NR * k.max(1))).max(1);
    let a_row = |i: usize| &a[(row0 + i) * k..(row0 + i + 1) * k];
    let strip = |s: usize| &packed[s * k * NR..(s + 1) * k * NR];

    let mut s0 = 0;
    while s0 < strips {
        let s1 = (s0 + per_block).min(strips);
        let mut i = 0;
        while i + MR <= m_local {
            let ar: [&[f32]; MR] = std::array::from_fn(|r| a_row(i + r));
            for s in s0..s1 {
                let mut acc = [[0f64; NR]; MR];
                tile::<MR>(&mut acc, ar, strip(s));
                store(&acc, out, n, i, s * NR);
            }
            i += MR;
        }
        while i < m_local {
            for s in s0..s1 {
                let mut acc = [[0f64; NR]; 1];
                tile::<1>(&mut acc, [a_row(i)], strip(s));
                store(&acc, out, n, i, s * NR);
            }
            i += 1;
        }
        s0 = s1;
    }
}

fn run(a: &[f32], packed: &[f32], m: usize, n: usize, k: usize, out: &mut [f32], exec: Exec) {
    if m == 0 || n == 0 {
        return;
    }
    match exec {
        Exec::Sequential => rows(a, packed, n, k, 0, out),
        Exec::Parallel => {
            let per_task = (m / (4 * rayon::current_num_threads())).clamp(MR, 512) / MR * MR;
            out.par_chunks_mut(per_task * n)
                .enumerate()
                .for_each(|(t, chunk)| rows(a, packed, n, k, t * per_task, chunk));
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, all row-major.
pub(crate) fn gemm_nn(
    a: &[f32],
    b: &[f32],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [f32],
    exec: Exec,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let packed = pack(n, k, |j, p| b[p * n + j]);
    run(a, &packed, m, n, k, out, exec);
}

/// `out (m×n) = a (m×k) · bᵀ` where `b` is stored `n×k` row-major.
pub(crate) fn gemm_nt(
    a: &[f32],
    b: &[f32],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [f32],
    exec: Exec,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let packed = pack(n, k, |j, p| b[j * k + p]);
    run(a, &packed, m, n, k, out, exec);
}
