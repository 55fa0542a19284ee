use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{psnr_y, Image};
use crate::coa::{coa_forward_with, CoaLayer};
use crate::counters;
use crate::error::{Error, Result};
use crate::lsp::{self, KMeansState, LspMode, LspProjection};
use crate::memory;
use crate::network::{conv2d_3x3_with, pixel_shuffle, Conv3x3};
use crate::nla::{self, NlaWeights};
use crate::tensor::{self, Exec, FeatureMap, Matrix};

pub const CSV_HEADER: &str = "mode,n,h,w,layers,wall_time_s,peak_alloc_bytes,psnr_db";

// Sub-pixel factor of the benchmark network's reconstruction.
const BENCH_SCALE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMode {
    /// Dense attention in every layer.
    Nla,
    /// Sparse attention with its own plan and weights in every layer.
    Lsp,
    /// One plan and one set of sparse weights shared by every layer.
    Lcoa,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Nla, BenchMode::Lsp, BenchMode::Lcoa];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Nla => "nla",
            BenchMode::Lsp => "lsp",
            BenchMode::Lcoa => "lcoa",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nla" => Ok(BenchMode::Nla),
            "lsp" => Ok(BenchMode::Lsp),
            "lcoa" => Ok(BenchMode::Lcoa),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}`, expected nla, lsp or lcoa"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Input size when no image is given.
    pub height: usize,
    pub width: usize,
    pub input: Option<Image>,
    pub channels: usize,
    pub layers: usize,
    pub clusters: usize,
    pub window_size: usize,
    pub decay: f32,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    pub exec: Exec,
    /// Run the dense stack once, untimed, to score sparse outputs even when
    /// `nla` is not among the benchmarked modes.
    pub psnr: bool,
    /// Tensor byte budget; a mode that exceeds it yields a failed row.
    pub mem_limit: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: 64,
            width: 64,
            input: None,
            channels: 128,
            layers: 10,
            clusters: lsp::DEFAULT_CLUSTERS,
            window_size: lsp::DEFAULT_WINDOW,
            decay: lsp::DEFAULT_DECAY,
            warmup: 1,
            repeats: 5,
            seed: 0,
            exec: Exec::Sequential,
            psnr: false,
            mem_limit: None,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("layers", self.layers),
            ("clusters", self.clusters),
            ("window", self.window_size),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.input.is_none() && (self.height == 0 || self.width == 0) {
            return Err(Error::InvalidArgument(
                "height and width must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_image(&self) -> Image {
        self.input
            .clone()
            .unwrap_or_else(|| Image::random(self.height, self.width, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub layers: usize,
    /// Median over the timed repeats; absent for a failed run.
    pub wall_time_s: Option<f64>,
    pub peak_alloc_bytes: Option<usize>,
    /// Luma PSNR against the dense stack's output.
    pub psnr_db: Option<f64>,
    /// Plans built per forward pass.
    pub plan_builds: u64,
    pub failure: Option<String>,
}

impl BenchRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            self.n,
            self.h,
            self.w,
            self.layers,
            opt(self.wall_time_s.map(|t| format!("{t:.6}"))),
            opt(self.peak_alloc_bytes.map(|b| b.to_string())),
            opt(self.psnr_db.map(|p| format!("{p:.4}"))),
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv(records))?;
    Ok(())
}

enum Body {
    Nla(Vec<NlaWeights>),
    Lsp(Vec<(NlaWeights, KMeansState)>),
    Lcoa {
        proj: LspProjection,
        state: KMeansState,
        layers: Vec<CoaLayer>,
    },
}

/// Head conv, a stack of attention layers and a sub-pixel tail; no
/// convolutions between the attention layers, so the three modes differ only
/// in how attention is computed.
///
/// All modes draw the same per-layer `W_q, W_k, W_v, W_o` from the seed. The
/// collaborative stack plans with layer 0's `W_q, W_k`; each layer's value
/// projection is `W_v·W_o`, which equals projecting after the weighted sum.
pub struct BenchNetwork {
    head: Conv3x3,
    tail: Conv3x3,
    body: Body,
    window_size: usize,
}

impl BenchNetwork {
    /// Builds the weights for `mode`. Sparse modes seed their centroids from
    /// the queries `lr` produces, in an untimed pass.
    pub fn build(cfg: &BenchConfig, mode: BenchMode, lr: &FeatureMap) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_be7c);
        let head = Conv3x3::synthesize(3, c, &mut rng);
        let tail = Conv3x3::synthesize(c, 3 * BENCH_SCALE * BENCH_SCALE, &mut rng);
        let attn: Vec<NlaWeights> = (0..cfg.layers)
            .map(|_| NlaWeights::synthesize(c, c, &mut rng))
            .collect();
        let seed_state = |q: &Matrix, layer: usize| {
            KMeansState::from_points(
                q,
                cfg.clusters,
                cfg.decay,
                cfg.seed.wrapping_add(layer as u64),
            )
        };
        let body = match mode {
            BenchMode::Nla => Body::Nla(attn),
            BenchMode::Lsp => {
                let mut x = conv2d_3x3_with(lr, &head, cfg.exec)?.into_matrix();
                let mut layers = Vec::with_capacity(attn.len());
                for (l, w) in attn.into_iter().enumerate() {
                    let state = seed_state(&tensor::matmul_with(&x, &w.w_q, cfg.exec)?, l)?;
                    x = lsp::sparse_nla_forward(&x, &w, &state, cfg.window_size, cfg.exec)?;
                    layers.push((w, state));
                }
                Body::Lsp(layers)
            }
            BenchMode::Lcoa => {
                let mut attn = attn.into_iter();
                let first = attn.next().expect("at least one layer");
                let x1 = conv2d_3x3_with(lr, &head, cfg.exec)?.into_matrix();
                let state = seed_state(&tensor::matmul_with(&x1, &first.w_q, cfg.exec)?, 0)?;
                let proj = LspProjection::new(first.w_q, first.w_k)?;
                let layers = std::iter::once((first.w_v, first.w_o))
                    .chain(attn.map(|w| (w.w_v, w.w_o)))
                    .map(|(w_v, w_o)| CoaLayer::new(tensor::matmul(&w_v, &w_o)?, None, 1.0))
                    .collect::<Result<_>>()?;
                Body::Lcoa {
                    proj,
                    state,
                    layers,
                }
            }
        };
        Ok(BenchNetwork {
            head,
            tail,
            body,
            window_size: cfg.window_size,
        })
    }

    pub fn forward(&self, lr: &FeatureMap, exec: Exec) -> Result<FeatureMap> {
        let (h, w) = (lr.height(), lr.width());
        let mut x = conv2d_3x3_with(lr, &self.head, exec)?.into_matrix();
        match &self.body {
            Body::Nla(layers) => {
                for lw in layers {
                    x = nla::nla_forward_with(&x, lw, exec)?;
                }
            }
            Body::Lsp(layers) => {
                for (lw, state) in layers {
                    x = lsp::sparse_nla_forward(&x, lw, state, self.window_size, exec)?;
                }
            }
            Body::Lcoa {
                proj,
                state,
                layers,
            } => {
                let shared = lsp::lsp_forward_with(
                    &x,
                    proj,
                    state,
                    self.window_size,
                    LspMode::Inference,
                    exec,
                )?;
                for layer in layers {
                    x = coa_forward_with(&x, layer, &shared.weights, &shared.plan, exec)?;
                }
            }
        }
        let x = FeatureMap::from_matrix(h, w, x)?;
        pixel_shuffle(&conv2d_3x3_with(&x, &self.tail, exec)?, BENCH_SCALE)
    }
}

/// Restores the previous budget when dropped.
struct BudgetGuard(Option<usize>);

impl BudgetGuard {
    fn set(limit: Option<usize>) -> Self {
        let old = memory::budget();
        memory::set_budget(limit);
        BudgetGuard(old)
    }
}

impl Drop for BudgetGuard {
    fn drop(&mut self) {
        memory::set_budget(self.0);
    }
}

struct Measured {
    wall_time_s: f64,
    peak_alloc_bytes: usize,
    plan_builds: u64,
    output: Image,
}

fn measure(cfg: &BenchConfig, mode: BenchMode, lr: &FeatureMap) -> Result<Measured> {
    let _guard = BudgetGuard::set(cfg.mem_limit);
    let net = BenchNetwork::build(cfg, mode, lr)?;
    for _ in 0..cfg.warmup {
        net.forward(lr, cfg.exec)?;
    }
    let before = counters::snapshot();
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut peak = 0;
    let mut output = None;
    for _ in 0..cfg.repeats {
        drop(output.take());
        memory::reset_peak();
        let start = Instant::now();
        let out = net.forward(lr, cfg.exec)?;
        times.push(start.elapsed().as_secs_f64());
        peak = peak.max(memory::peak_bytes());
        output = Some(out);
    }
    let plans = counters::snapshot().since(&before).plan_builds;
    Ok(Measured {
        wall_time_s: median(&mut times),
        peak_alloc_bytes: peak,
        plan_builds: plans / cfg.repeats as u64,
        output: Image::from_feature_map(&output.expect("at least one repeat"))?,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times each mode on the same input and weights. Sparse modes get a PSNR
/// against the dense output whenever one is available. Running out of the
/// memory budget produces a failed row; other errors abort.
pub fn run_benchmark(cfg: &BenchConfig, modes: &[BenchMode]) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let img = cfg.lr_image();
    let lr = img.to_feature_map();
    let (h, w) = (img.height(), img.width());
    let mut records = Vec::with_capacity(modes.len());
    let mut outputs = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut rec = BenchRecord {
            mode,
            n: h * w,
            h,
            w,
            layers: cfg.layers,
            wall_time_s: None,
            peak_alloc_bytes: None,
            psnr_db: None,
            plan_builds: 0,
            failure: None,
        };
        match measure(cfg, mode, &lr) {
            Ok(m) => {
                rec.wall_time_s = Some(m.wall_time_s);
                rec.peak_alloc_bytes = Some(m.peak_alloc_bytes);
                rec.plan_builds = m.plan_builds;
                outputs.push(Some(m.output));
            }
            Err(e @ Error::OutOfMemory { .. }) => {
                rec.failure = Some(e.to_string());
                outputs.push(None);
            }
            Err(e) => return Err(e),
        }
        records.push(rec);
    }

    let mut oracle = modes
        .iter()
        .zip(&outputs)
        .find(|(m, o)| **m == BenchMode::Nla && o.is_some())
        .and_then(|(_, o)| o.clone());
    let wants_oracle = modes.iter().any(|&m| m != BenchMode::Nla);
    if oracle.is_none() && cfg.psnr && wants_oracle {
        let _guard = BudgetGuard::set(cfg.mem_limit);
        let net = BenchNetwork::build(cfg, BenchMode::Nla, &lr)?;
        match net.forward(&lr, cfg.exec) {
            Ok(out) => oracle = Some(Image::from_feature_map(&out)?),
            Err(Error::OutOfMemory { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if let Some(oracle) = oracle {
        for (rec, out) in records.iter_mut().zip(&outputs) {
            if let (BenchMode::Lsp | BenchMode::Lcoa, Some(out)) = (rec.mode, out) {
                rec.psnr_db = Some(psnr_y(out, &oracle)?);
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Dense,
    /// Cluster, plan, build windowed weights and apply them.
    Sparse,
}

/// Median wall time of a single attention operation on random `n × c`
/// queries, keys and values.
pub fn time_attention(
    kind: AttentionKind,
    n: usize,
    c: usize,
    clusters: usize,
    window_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = || Matrix::from_fn(n, c, |_, _| rng.gen_range(-1.0f32..1.0));
    let (q, k, v) = (random(), random(), random());
    let state = KMeansState::from_points(&q, clusters, lsp::DEFAULT_DECAY, seed)?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = match kind {
            AttentionKind::Dense => nla::dense_attention(&q, &k, &v, Exec::Sequential)?,
            AttentionKind::Sparse => {
                let s = lsp::lsp_from_qk(
                    &q,
                    &k,
                    &state,
                    window_size,
                    LspMode::Inference,
                    Exec::Sequential,
                )?;
                lsp::sparse_attention_apply(&s.weights, &s.plan, &v)?
            }
        };
        times.push(start.elapsed().as_secs_f64());
        drop(out);
    }
    Ok(median(&mut times))
}
