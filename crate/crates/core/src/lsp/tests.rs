use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nla;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn one_cluster(dim: usize) -> KMeansState {
    let mut c = vec![0.0; dim];
    c[0] = 1.0;
    KMeansState::new(Matrix::from_vec(1, dim, c).unwrap(), DEFAULT_DECAY).unwrap()
}

#[test]
fn single_window_weights_equal_dense_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (q, k) = (random(11, 4, &mut rng), random(11, 4, &mut rng));
    let plan = build_plan(&[0; 11], 16, 11).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    let dense = nla::similarity(&q, &k, Exec::Sequential).unwrap();
    let block = w.block(0);
    for i in 0..11 {
        for j in 0..16 {
            let expected = if j < 11 { dense.get(i, j) } else { 0.0 };
            assert!((block.get(i, j) - expected).abs() <= 1e-6);
        }
    }
}

#[test]
fn pad_keys_get_exactly_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, k) = (random(5, 3, &mut rng), random(5, 3, &mut rng));
    let plan = build_plan(&[0, 1, 0, 1, 0], 4, 5).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    // Window 1 spans slots 0..8; slots 5, 6 and 7 are pads.
    let b = w.block(1);
    assert_eq!(b.cols(), 8);
    for r in 0..4 {
        for c in 5..8 {
            assert_eq!(b.get(r, c), 0.0);
        }
        let s: f64 = b.row(r).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let q = Matrix::from_fn(8, 3, |i, j| (i + j) as f32 * 0.3);
    let k = Matrix::from_fn(8, 3, |_, j| j as f32 - 1.0);
    let plan = build_plan(&[0; 8], 4, 8).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    assert!(w
        .block(0)
        .as_slice()
        .iter()
        .all(|&v| (v - 0.25).abs() < 1e-7));
    assert!(w
        .block(1)
        .as_slice()
        .iter()
        .all(|&v| (v - 0.125).abs() < 1e-7));
}

#[test]
fn single_window_apply_equals_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (q, k, v) = (
        random(13, 4, &mut rng),
        random(13, 4, &mut rng),
        random(13, 5, &mut rng),
    );
    let plan = build_plan(&[0; 13], 13, 13).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    let sparse = sparse_attention_apply(&w, &plan, &v).unwrap();
    let dense = nla::dense_attention(&q, &k, &v, Exec::Sequential).unwrap();
    assert!(sparse.max_abs_diff(&dense) <= 1e-6);
}

#[test]
fn zero_values_give_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (q, k) = (random(9, 2, &mut rng), random(9, 2, &mut rng));
    let plan = build_plan(&[2, 0, 1, 1, 0, 2, 2, 0, 1], 3, 9).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    let out = sparse_attention_apply(&w, &plan, &Matrix::zeros(9, 4)).unwrap();
    assert_eq!(out, Matrix::zeros(9, 4));
}

#[test]
fn one_hot_weights_copy_values() {
    // Orthonormal rows scaled so exp(-200) underflows: every query sees only itself.
    let n = 6;
    let q = Matrix::from_fn(n, n, |i, j| if i == j { 200.0 } else { 0.0 });
    let k = Matrix::identity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = random(n, 3, &mut rng);
    let plan = build_plan(&[1, 0, 1, 0, 2, 2], 2, n).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    let out = sparse_attention_apply(&w, &plan, &v).unwrap();
    assert_eq!(out, v);
}

#[test]
fn apply_rejects_mismatched_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (q, k) = (random(8, 2, &mut rng), random(8, 2, &mut rng));
    let plan = build_plan(&[0; 8], 4, 8).unwrap();
    let w = sparse_attention_weights(&q, &k, &plan).unwrap();
    let other = build_plan(&[0; 8], 2, 8).unwrap();
    assert!(sparse_attention_apply(&w, &other, &random(8, 2, &mut rng)).is_err());
    assert!(sparse_attention_apply(&w, &plan, &random(7, 2, &mut rng)).is_err());
    assert!(sparse_attention_weights(&q, &random(7, 2, &mut rng), &plan).is_err());
}

#[test]
fn inference_leaves_state_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(40, 6, &mut rng);
    let proj = LspProjection::new(random(6, 4, &mut rng), random(6, 4, &mut rng)).unwrap();
    let state = KMeansState::random(5, 4, DEFAULT_DECAY, &mut rng).unwrap();
    let out = lsp_forward(&x, &proj, &state, 8, LspMode::Inference).unwrap();
    assert_eq!(out.state, state);
    let trained = lsp_forward(&x, &proj, &state, 8, LspMode::Train).unwrap();
    assert_ne!(trained.state.centroids(), state.centroids());
    assert_eq!(trained.state.assignment_counts().iter().sum::<u64>(), 80);
}

#[test]
fn one_cluster_keeps_position_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(20, 6, &mut rng);
    let proj = LspProjection::new(random(6, 4, &mut rng), random(6, 4, &mut rng)).unwrap();
    let out = lsp_forward(&x, &proj, &one_cluster(4), 8, LspMode::Inference).unwrap();
    assert_eq!(out.plan.perm(), &crate::tensor::Permutation::identity(20));
    assert_eq!(out.plan.num_windows(), 3);
}

#[test]
fn end_to_end_matches_dense_with_one_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(50, 6, &mut rng);
    let w = nla::NlaWeights::synthesize(6, 4, &mut rng);
    let proj = LspProjection::new(w.w_q.clone(), w.w_k.clone()).unwrap();
    let out = lsp_forward(&x, &proj, &one_cluster(4), 64, LspMode::Inference).unwrap();
    let v = tensor::matmul(&x, &w.w_v).unwrap();
    let sparse = sparse_attention_apply(&out.weights, &out.plan, &v).unwrap();
    let nla::Qkv { q, k, v } = nla::project_qkv(&x, &w).unwrap();
    let dense = nla::dense_attention(&q, &k, &v, Exec::Sequential).unwrap();
    assert!(sparse.max_abs_diff(&dense) <= 1e-5);
}

#[test]
fn sparse_nla_layer_matches_dense_nla_with_one_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random(30, 5, &mut rng);
    let w = nla::NlaWeights::synthesize(5, 5, &mut rng);
    let sparse = sparse_nla_forward(&x, &w, &one_cluster(5), 30, Exec::Sequential).unwrap();
    let dense = nla::nla_forward(&x, &w).unwrap();
    assert!(sparse.max_abs_diff(&dense) <= 1e-5);
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tensor::l2_normalize_rows(&random(rows, cols, &mut rng), NORMALIZE_EPS)
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unit_sphere_distance_identity(seed in any::<u64>(), dim in 1usize..32) {
        let q = unit_rows(16, dim, seed);
        let k = unit_rows(16, dim, seed ^ 0x9e37);
        for i in 0..16 {
            let d = dist2(q.row(i), k.row(i));
            prop_assert!((d - (2.0 - 2.0 * dot64(q.row(i), k.row(i)))).abs() <= 1e-6);
        }
    }

    #[test]
    fn same_cluster_pairs_respect_the_coherence_bound(seed in any::<u64>(), k in 1usize..6) {
        let q = unit_rows(60, 3, seed);
        let kk = unit_rows(60, 3, seed.wrapping_add(1));
        let state = KMeansState::from_points(&q, k, DEFAULT_DECAY, seed).unwrap();
        let lq = assign_clusters(&q, &state).unwrap();
        let lk = assign_clusters(&kk, &state).unwrap();
        let state = update_centroids(&state, &q, &kk, &lq, &lk).unwrap();
        let lq = assign_clusters(&q, &state).unwrap();
        let lk = assign_clusters(&kk, &state).unwrap();
        let eps = (0..60)
            .map(|i| dist2(q.row(i), state.centroids().row(lq[i])).sqrt())
            .chain((0..60).map(|j| dist2(kk.row(j), state.centroids().row(lk[j])).sqrt()))
            .fold(0.0, f64::max);
        for i in 0..60 {
            for j in 0..60 {
                if lq[i] == lk[j] {
                    prop_assert!(dot64(q.row(i), kk.row(j)) > 1.0 - 2.0 * eps * eps);
                }
            }
        }
    }

    #[test]
    fn plan_invariants(labels in prop::collection::vec(0usize..7, 1..300), ws in 1usize..40) {
        let n = labels.len();
        let plan = build_plan(&labels, ws, n).unwrap();
        let mut seen = vec![false; n];
        for &p in plan.perm().as_slice() {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        prop_assert!(plan.sorted_labels().windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(plan.num_windows() * ws, n + plan.pad_count());
        prop_assert!(plan.pad_count() < ws);
        for w in 0..plan.num_windows() {
            for slot in plan.window(w) {
                if !plan.is_pad(slot) {
                    let attended = plan.span(w).len();
                    prop_assert!(attended >= ws && attended <= 2 * ws);
                }
            }
        }
    }

    #[test]
    fn one_cluster_full_window_matches_dense(seed in any::<u64>(), n in 1usize..128, dim in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random(n, dim, &mut rng), random(n, dim, &mut rng), random(n, dim, &mut rng));
        let ws = n + rng.gen_range(0..8);
        let out = lsp_from_qk(&q, &k, &one_cluster(dim), ws, LspMode::Inference, Exec::Sequential).unwrap();
        let sparse = sparse_attention_apply(&out.weights, &out.plan, &v).unwrap();
        let dense = nla::dense_attention(&q, &k, &v, Exec::Sequential).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) <= 1e-5);
    }

    #[test]
    fn ema_keeps_centroids_on_the_sphere(seed in any::<u64>(), rounds in 1usize..20) {
        let mut state = KMeansState::from_points(&unit_rows(30, 5, seed), 4, 0.9, seed).unwrap();
        for r in 0..rounds {
            let q = unit_rows(30, 5, seed.wrapping_add(r as u64 * 2 + 1));
            let k = unit_rows(30, 5, seed.wrapping_add(r as u64 * 2 + 2));
            let lq = assign_clusters(&q, &state).unwrap();
            let lk = assign_clusters(&k, &state).unwrap();
            state = update_centroids(&state, &q, &k, &lq, &lk).unwrap();
        }
        for i in 0..state.k() {
            let norm = dot64(state.centroids().row(i), state.centroids().row(i)).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn parallel_windows_are_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..200);
        let (q, k, v) = (random(n, 6, &mut rng), random(n, 6, &mut rng), random(n, 6, &mut rng));
        let state = KMeansState::random(4, 6, DEFAULT_DECAY, &mut rng).unwrap();
        let a = lsp_from_qk(&q, &k, &state, 16, LspMode::Train, Exec::Sequential).unwrap();
        let b = lsp_from_qk(&q, &k, &state, 16, LspMode::Train, Exec::Parallel).unwrap();
        prop_assert_eq!(&a.plan, &b.plan);
        prop_assert_eq!(&a.weights, &b.weights);
        prop_assert_eq!(&a.state, &b.state);
        let oa = sparse_attention_apply_with(&a.weights, &a.plan, &v, Exec::Sequential).unwrap();
        let ob = sparse_attention_apply_with(&b.weights, &b.plan, &v, Exec::Parallel).unwrap();
        prop_assert!(oa.as_slice().iter().zip(ob.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
