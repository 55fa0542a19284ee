//! Quick invariant checks run by `lcoa selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{psnr_y, Image};
use crate::counters;
use crate::lsp::{self, KMeansState, LspMode};
use crate::network::{
    conv_path_forward, lcoan_forward, ModelWeights, NetConfig, SrMode, TensorBundle,
};
use crate::nla;
use crate::tensor::{self, Exec, Matrix, Permutation};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

type Outcome = Result<(), String>;
type CheckFn = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn matmul_matches_naive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(13, 37, &mut rng), random(37, 19, &mut rng));
    let c = tensor::matmul(&a, &b).map_err(|e| e.to_string())?;
    let naive = Matrix::from_fn(13, 19, |i, j| {
        (0..37)
            .map(|k| a.get(i, k) as f64 * b.get(k, j) as f64)
            .sum::<f64>() as f32
    });
    let d = c.max_abs_diff(&naive);
    ensure(d <= 1e-6, || format!("max diff {d}"))
}

fn softmax_rows_sum_to_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = tensor::row_softmax(&random(8, 50, &mut rng));
    for i in 0..s.rows() {
        let sum: f64 = s.row(i).iter().map(|&v| v as f64).sum();
        ensure((sum - 1.0).abs() <= 1e-6, || {
            format!("row {i} sums to {sum}")
        })?;
    }
    Ok(())
}

fn gather_scatter_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random(20, 3, &mut rng);
    let mut order: Vec<usize> = (0..20).collect();
    order.reverse();
    order.swap(3, 11);
    let p = Permutation::new(order).map_err(|e| e.to_string())?;
    let back = tensor::gather_rows(&m, &p)
        .and_then(|g| tensor::scatter_rows(&g, &p))
        .map_err(|e| e.to_string())?;
    ensure(back == m, || "scatter(gather(x)) != x".into())
}

fn one_cluster_matches_dense() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 60;
    let (q, k, v) = (
        random(n, 8, &mut rng),
        random(n, 8, &mut rng),
        random(n, 8, &mut rng),
    );
    let mut c = vec![0.0; 8];
    c[0] = 1.0;
    let state = KMeansState::new(Matrix::from_rows(&[c]), 0.999).map_err(|e| e.to_string())?;
    let s = lsp::lsp_from_qk(&q, &k, &state, n, LspMode::Inference, Exec::Sequential)
        .map_err(|e| e.to_string())?;
    let sparse = lsp::sparse_attention_apply(&s.weights, &s.plan, &v).map_err(|e| e.to_string())?;
    let dense = nla::dense_attention(&q, &k, &v, Exec::Sequential).map_err(|e| e.to_string())?;
    let d = sparse.max_abs_diff(&dense);
    ensure(d <= 1e-5, || format!("max diff {d}"))
}

fn unit_sphere_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = tensor::l2_normalize_rows(&random(200, 16, &mut rng), 1e-12);
    let b = tensor::l2_normalize_rows(&random(200, 16, &mut rng), 1e-12);
    for i in 0..200 {
        let (x, y) = (a.row(i), b.row(i));
        let d2: f64 = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum();
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        ensure((d2 - (2.0 - 2.0 * dot)).abs() <= 1e-6, || {
            format!("pair {i}: {d2} vs {}", 2.0 - 2.0 * dot)
        })?;
    }
    Ok(())
}

fn ema_hand_trace() -> Outcome {
    let state = KMeansState::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), 0.999)
        .map_err(|e| e.to_string())?;
    let q = Matrix::from_rows(&[[0.0, 1.0]]);
    let k = Matrix::zeros(0, 2);
    let (raw, _) = lsp::ema_step(&state, &q, &k, &[0], &[]).map_err(|e| e.to_string())?;
    let (x, y) = (raw.get(0, 0) as f64, raw.get(0, 1) as f64);
    ensure(
        (x - 0.999).abs() <= 1e-7 && (y - 0.0005).abs() <= 1e-7,
        || format!("got [{x}, {y}]"),
    )
}

fn zero_beta_is_conv_path() -> Outcome {
    let cfg = NetConfig {
        num_fau: 3,
        channels: 8,
        embed: 8,
        clusters: 4,
        window_size: 16,
        ..NetConfig::with_scale(2)
    };
    let mut w = ModelWeights::synthesize(&cfg, 6).map_err(|e| e.to_string())?;
    w.set_beta(0.0);
    let lr = Image::random(10, 10, 7).to_feature_map();
    let before = counters::snapshot();
    let sr = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).map_err(|e| e.to_string())?;
    let plans = counters::snapshot().since(&before).plan_builds;
    let conv = conv_path_forward(&lr, &w, &cfg, Exec::Sequential).map_err(|e| e.to_string())?;
    ensure(plans == 1, || format!("{plans} plans built"))?;
    let same = sr
        .image
        .as_slice()
        .iter()
        .zip(conv.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "outputs differ".into())
}

fn weight_bundle_round_trip() -> Outcome {
    let cfg = NetConfig {
        num_fau: 2,
        channels: 4,
        embed: 4,
        clusters: 3,
        window_size: 8,
        ..NetConfig::with_scale(4)
    };
    let w = ModelWeights::synthesize(&cfg, 8).map_err(|e| e.to_string())?;
    let bytes = w.to_bundle().to_bytes();
    let back = TensorBundle::from_bytes(&bytes)
        .and_then(|b| ModelWeights::from_bundle(&b))
        .map_err(|e| e.to_string())?;
    ensure(back == w, || "weights differ after round trip".into())
}

fn ppm_and_psnr() -> Outcome {
    let img = Image::random(5, 7, 9);
    let back = Image::decode_ppm(&img.encode_ppm()).map_err(|e| e.to_string())?;
    ensure(back == img, || "PPM round trip differs".into())?;
    let a = Image::new(2, 2, vec![10; 12]).map_err(|e| e.to_string())?;
    let b = Image::new(2, 2, vec![11; 12]).map_err(|e| e.to_string())?;
    let p = psnr_y(&a, &b).map_err(|e| e.to_string())?;
    ensure((p - 10.0 * 65025f64.log10()).abs() <= 1e-9, || {
        format!("psnr {p}")
    })
}

fn vjp_matches_finite_differences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let to64 = |m: &Matrix| m.as_slice().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (q, k, v, g) = (
        random(4, 3, &mut rng),
        random(4, 3, &mut rng),
        random(4, 3, &mut rng),
        random(4, 3, &mut rng),
    );
    let grads = nla::attention_vjp(&q, &k, &v, &g).map_err(|e| e.to_string())?;
    let objective = |q: &[f64]| -> f64 {
        let (kk, vv, gg) = (to64(&k), to64(&v), to64(&g));
        let mut total = 0.0;
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|c| q[i * 3 + c] * kk[j * 3 + c]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..3 {
                let o: f64 = (0..4).map(|j| e[j] / s * vv[j * 3 + c]).sum();
                total += o * gg[i * 3 + c];
            }
        }
        total
    };
    let base = to64(&q);
    let h = 1e-5;
    for idx in 0..base.len() {
        let (mut up, mut down) = (base.clone(), base.clone());
        up[idx] += h;
        down[idx] -= h;
        let fd = (objective(&up) - objective(&down)) / (2.0 * h);
        let an = grads.d_q.as_slice()[idx] as f64;
        ensure(
            (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-2),
            || format!("d_q[{idx}]: analytic {an}, numeric {fd}"),
        )?;
    }
    Ok(())
}

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 10] = [
        ("matmul matches naive product", matmul_matches_naive),
        ("softmax rows sum to one", softmax_rows_sum_to_one),
        ("gather/scatter round trip", gather_scatter_round_trip),
        (
            "one cluster, full window equals dense attention",
            one_cluster_matches_dense,
        ),
        ("unit-sphere distance identity", unit_sphere_identity),
        ("EMA centroid hand trace", ema_hand_trace),
        (
            "beta = 0 network equals conv path, one plan",
            zero_beta_is_conv_path,
        ),
        ("weight bundle round trip", weight_bundle_round_trip),
        ("PPM round trip and luma PSNR", ppm_and_psnr),
        (
            "attention VJP vs finite differences",
            vjp_matches_finite_differences,
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
