//! Online spherical k-means over normalized queries and keys.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Centroids may drift this far from unit norm before a state is rejected.
const UNIT_TOLERANCE: f64 = 1e-4;
const NORM_EPS: f64 = 1e-12;

/// `k` unit centroids plus the EMA decay used to move them.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansState {
    centroids: Matrix,
    decay: f32,
    assignment_counts: Vec<u64>,
}

impl KMeansState {
    /// Wraps existing centroids, which must already be unit rows.
    pub fn new(centroids: Matrix, decay: f32) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(Error::InvalidArgument(
                "k-means needs at least one centroid".into(),
            ));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay {decay} outside (0, 1)"
            )));
        }
        for i in 0..centroids.rows() {
            let norm = row_norm(centroids.row(i));
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "centroid {i} has norm {norm}, expected 1"
                )));
            }
        }
        let k = centroids.rows();
        Ok(KMeansState {
            centroids,
            decay,
            assignment_counts: vec![0; k],
        })
    }

    /// Centroids drawn uniformly from the unit sphere.
    pub fn random(k: usize, dim: usize, decay: f32, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "centroid dimension must be positive".into(),
            ));
        }
        let raw = Matrix::from_fn(k, dim, |_, _| rng.sample::<f32, _>(StandardNormal));
        KMeansState::new(tensor::l2_normalize_rows(&raw, 1e-12), decay)
    }

    /// Seeds centroids with `k` distinct rows of `points` (normalized first),
    /// chosen by a seeded RNG. When fewer than `k` usable rows exist the
    /// remainder are random unit vectors.
    pub fn from_points(points: &Matrix, k: usize, decay: f32, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "k-means needs at least one centroid".into(),
            ));
        }
        let dim = points.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normalized = tensor::l2_normalize_rows(points, 1e-12);
        let usable: Vec<usize> = (0..normalized.rows())
            .filter(|&i| (row_norm(normalized.row(i)) - 1.0).abs() <= UNIT_TOLERANCE)
            .collect();
        let take = k.min(usable.len());
        let chosen: Vec<usize> = index::sample(&mut rng, usable.len(), take)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        let filler = KMeansState::random(k - take + 1, dim, decay, &mut rng)?;
        let centroids = Matrix::from_fn(k, dim, |i, j| match chosen.get(i) {
            Some(&src) => normalized.get(src, j),
            None => filler.centroids.get(i - take, j),
        });
        KMeansState::new(centroids, decay)
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn decay(&self) -> f32 {
        self.decay
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    /// Queries plus keys assigned to each centroid by the latest update.
    pub fn assignment_counts(&self) -> &[u64] {
        &self.assignment_counts
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Index of the centroid with the largest dot product for every row of
/// `points`; ties go to the lowest index. On unit vectors this is the nearest
/// centroid in Euclidean distance.
pub fn assign_clusters(points: &Matrix, state: &KMeansState) -> Result<Vec<usize>> {
    if state.k() == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs at least one centroid".into(),
        ));
    }
    if points.cols() != state.dim() {
        return Err(Error::shape(
            "assign_clusters",
            format!(
                "points have {} dims, centroids {}",
                points.cols(),
                state.dim()
            ),
        ));
    }
    let scores = tensor::matmul_nt(points, &state.centroids)?;
    Ok((0..scores.rows())
        .map(|i| {
            let mut best = 0;
            let row = scores.row(i);
            for (c, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// One EMA step before re-normalization:
/// `u ← λ·u + (1−λ)/2·Σ Qᵢ + (1−λ)/2·Σ Kⱼ` over the members of each cluster.
/// Rows of clusters with no members are returned as they were.
pub fn ema_step(
    state: &KMeansState,
    q: &Matrix,
    k_mat: &Matrix,
    labels_q: &[usize],
    labels_k: &[usize],
) -> Result<(Matrix, Vec<u64>)> {
    let dim = state.dim();
    let kc = state.k();
    for (name, m, labels) in [("q", q, labels_q), ("k", k_mat, labels_k)] {
        if m.cols() != dim || m.rows() != labels.len() {
            return Err(Error::shape(
                "update_centroids",
                format!(
                    "{name} is {:?} with {} labels, centroids are {kc}x{dim}",
                    m.shape(),
                    labels.len()
                ),
            ));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite {
                stage: "update_centroids input",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kc) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: kc,
            });
        }
    }

    let mut sums = vec![0f64; kc * dim];
    let mut counts = vec![0u64; kc];
    for (m, labels) in [(q, labels_q), (k_mat, labels_k)] {
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(m.row(i)) {
                *s += v as f64;
            }
        }
    }

    let lambda = state.decay as f64;
    let half = (1.0 - lambda) / 2.0;
    let mut out = state.centroids.clone();
    for c in 0..kc {
        if counts[c] == 0 {
            continue;
        }
        for (u, &s) in out.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
            *u = (lambda * *u as f64 + half * s) as f32;
        }
    }
    Ok((out, counts))
}

/// EMA update followed by projection back onto the unit sphere.
///
/// Only clusters with members move. A cluster whose EMA collapses to the
/// origin keeps its previous centroid.
pub fn update_centroids(
    state: &KMeansState,
    q: &Matrix,
    k_mat: &Matrix,
    labels_q: &[usize],
    labels_k: &[usize],
) -> Result<KMeansState> {
    let (mut raw, counts) = ema_step(state, q, k_mat, labels_q, labels_k)?;
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let norm = row_norm(raw.row(c));
        if norm < NORM_EPS {
            raw.row_mut(c).copy_from_slice(state.centroids.row(c));
            continue;
        }
        for v in raw.row_mut(c) {
            *v = (*v as f64 / norm) as f32;
        }
    }
    raw.ensure_finite("update_centroids")?;
    Ok(KMeansState {
        centroids: raw,
        decay: state.decay,
        assignment_counts: counts,
    })
}
