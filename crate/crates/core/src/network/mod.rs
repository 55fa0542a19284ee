//! Forward-only super-resolution network.
//!
//! ```text
//! LR (h×w×3) → head conv (→c) ──► X₁ ──► sparse pattern, once
//!                                 │
//!        FAU × N: conv → ReLU → conv → +skip → CoA(shared A_s)
//!                                 │
//!        [scale 4: conv c→4c, shuffle ×2]
//!        tail conv (→3·r²) → shuffle ×r → HR (h·s × w·s × 3)
//! ```

mod conv;
mod format;

pub use conv::{conv2d_3x3, conv2d_3x3_with, pixel_shuffle, relu_in_place, Conv3x3};
pub use format::{Tensor, TensorBundle, MAGIC, VERSION};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coa::{coa_forward_with, CoaLayer};
use crate::error::{Error, Result};
use crate::lsp::{self, KMeansState, LspMode, LspProjection};
use crate::nla::uniform;
use crate::tensor::{Exec, FeatureMap, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub num_fau: usize,
    pub channels: usize,
    /// Width of the query/key/value embedding; equal to `channels` by default.
    pub embed: usize,
    pub scale: usize,
    pub clusters: usize,
    pub window_size: usize,
    pub decay: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_fau: 10,
            channels: 128,
            embed: 128,
            scale: 2,
            clusters: lsp::DEFAULT_CLUSTERS,
            window_size: lsp::DEFAULT_WINDOW,
            decay: lsp::DEFAULT_DECAY,
        }
    }
}

impl NetConfig {
    pub fn with_scale(scale: usize) -> Self {
        NetConfig {
            scale,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            return Err(Error::InvalidArgument(format!(
                "scale {} not in {{2, 3, 4}}",
                self.scale
            )));
        }
        for (name, v) in [
            ("num_fau", self.num_fau),
            ("channels", self.channels),
            ("embed", self.embed),
            ("clusters", self.clusters),
            ("window_size", self.window_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay {} outside (0, 1)",
                self.decay
            )));
        }
        Ok(())
    }

    /// Shuffle factor applied after the tail conv.
    fn tail_factor(&self) -> usize {
        if self.scale == 4 {
            2
        } else {
            self.scale
        }
    }

    /// Reads the architecture back out of a set of weights.
    pub fn from_weights(w: &ModelWeights, scale: usize) -> Self {
        NetConfig {
            num_fau: w.faus.len(),
            channels: w.head.out_channels(),
            embed: w.lsp.embed(),
            scale,
            clusters: w.kmeans.k(),
            window_size: w.window_size,
            decay: w.kmeans.decay(),
        }
    }
}

/// Feature Aggregation Unit: a residual conv block followed by collaborative
/// attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Fau {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub coa: CoaLayer,
}

impl Fau {
    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.coa.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub head: Conv3x3,
    pub faus: Vec<Fau>,
    pub lsp: LspProjection,
    pub kmeans: KMeansState,
    pub window_size: usize,
    /// Present only for scale 4.
    pub upsampler: Option<Conv3x3>,
    pub tail: Conv3x3,
}

impl ModelWeights {
    /// Seeded uniform initialization in `[-1/√fan_in, 1/√fan_in]`, β = 1 in
    /// every FAU and centroids drawn uniformly from the sphere.
    pub fn synthesize(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, e) = (cfg.channels, cfg.embed);
        let head = Conv3x3::synthesize(3, c, &mut rng);
        let faus = (0..cfg.num_fau)
            .map(|_| {
                let conv1 = Conv3x3::synthesize(c, c, &mut rng);
                let conv2 = Conv3x3::synthesize(c, c, &mut rng);
                let w_m = uniform(c, e, c, &mut rng);
                let w_out = (e != c).then(|| uniform(e, c, e, &mut rng));
                let coa = CoaLayer::new(w_m, w_out, 1.0)?;
                Ok(Fau { conv1, conv2, coa })
            })
            .collect::<Result<Vec<_>>>()?;
        let lsp = LspProjection::new(uniform(c, e, c, &mut rng), uniform(c, e, c, &mut rng))?;
        let kmeans = KMeansState::random(cfg.clusters, e, cfg.decay, &mut rng)?;
        let upsampler = (cfg.scale == 4).then(|| Conv3x3::synthesize(c, 4 * c, &mut rng));
        let r = cfg.tail_factor();
        let tail = Conv3x3::synthesize(c, 3 * r * r, &mut rng);
        Ok(ModelWeights {
            head,
            faus,
            lsp,
            kmeans,
            window_size: cfg.window_size,
            upsampler,
            tail,
        })
    }

    /// Re-seeds the centroids from the queries of `lr`'s shallow features.
    pub fn seed_centroids(&mut self, lr: &FeatureMap, seed: u64) -> Result<()> {
        let x1 = conv2d_3x3(lr, &self.head)?.into_matrix();
        let q = crate::tensor::matmul(&x1, &self.lsp.w_q)?;
        self.kmeans = KMeansState::from_points(&q, self.kmeans.k(), self.kmeans.decay(), seed)?;
        Ok(())
    }

    pub fn set_beta(&mut self, beta: f32) {
        for f in &mut self.faus {
            f.coa.beta = beta;
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count()
            + self.faus.iter().map(|f| f.coa.param_count()).sum::<usize>()
            + self.lsp.w_q.len()
            + self.lsp.w_k.len()
            + self.kmeans.centroids().len()
    }

    /// Parameters of the same backbone with a full dense attention block
    /// (`W_q`, `W_k`, `W_v`, `W_o`) in every FAU instead of CoA.
    pub fn nla_variant_param_count(&self) -> usize {
        let (c, e) = (self.lsp.channels(), self.lsp.embed());
        self.conv_param_count() + self.faus.len() * 4 * c * e
    }

    fn conv_param_count(&self) -> usize {
        self.head.param_count()
            + self
                .faus
                .iter()
                .map(|f| f.conv1.param_count() + f.conv2.param_count())
                .sum::<usize>()
            + self.upsampler.as_ref().map_or(0, Conv3x3::param_count)
            + self.tail.param_count()
    }

    /// Checks every tensor against `cfg`, naming the first one that disagrees.
    pub fn validate(&self, cfg: &NetConfig) -> Result<()> {
        cfg.validate()?;
        let (c, e) = (cfg.channels, cfg.embed);
        let mismatch =
            |tensor: String, detail: String| Err(Error::ConfigMismatch { tensor, detail });
        let check_conv = |name: &str, conv: &Conv3x3, cin: usize, cout: usize| {
            if conv.in_channels() != cin || conv.out_channels() != cout {
                return mismatch(
                    format!("{name}.weight"),
                    format!(
                        "{}→{} channels, config needs {cin}→{cout}",
                        conv.in_channels(),
                        conv.out_channels()
                    ),
                );
            }
            Ok(())
        };
        check_conv("head", &self.head, 3, c)?;
        if self.faus.len() != cfg.num_fau {
            return mismatch(
                format!("fau.{}", self.faus.len().min(cfg.num_fau)),
                format!("{} FAUs, config needs {}", self.faus.len(), cfg.num_fau),
            );
        }
        for (i, f) in self.faus.iter().enumerate() {
            check_conv(&format!("fau.{i}.conv1"), &f.conv1, c, c)?;
            check_conv(&format!("fau.{i}.conv2"), &f.conv2, c, c)?;
            if f.coa.w_m.shape() != (c, e) {
                return mismatch(
                    format!("fau.{i}.coa.w_m"),
                    format!("{:?}, config needs {:?}", f.coa.w_m.shape(), (c, e)),
                );
            }
        }
        for (name, m) in [("lsp.w_q", &self.lsp.w_q), ("lsp.w_k", &self.lsp.w_k)] {
            if m.shape() != (c, e) {
                return mismatch(
                    name.into(),
                    format!("{:?}, config needs {:?}", m.shape(), (c, e)),
                );
            }
        }
        if self.kmeans.centroids().shape() != (cfg.clusters, e) {
            return mismatch(
                "lsp.centroids".into(),
                format!(
                    "{:?}, config needs {:?}",
                    self.kmeans.centroids().shape(),
                    (cfg.clusters, e)
                ),
            );
        }
        if self.window_size != cfg.window_size {
            return mismatch(
                "lsp.window_size".into(),
                format!("{}, config needs {}", self.window_size, cfg.window_size),
            );
        }
        match (&self.upsampler, cfg.scale) {
            (Some(up), 4) => check_conv("up", up, c, 4 * c)?,
            (None, 4) => return mismatch("up.weight".into(), "scale 4 needs an upsampler".into()),
            (Some(_), s) => {
                return mismatch("up.weight".into(), format!("unexpected at scale {s}"))
            }
            (None, _) => {}
        }
        let r = cfg.tail_factor();
        check_conv("tail", &self.tail, c, 3 * r * r)
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = Bundler::default();
        b.conv("head", &self.head);
        for (i, f) in self.faus.iter().enumerate() {
            b.conv(&format!("fau.{i}.conv1"), &f.conv1);
            b.conv(&format!("fau.{i}.conv2"), &f.conv2);
            b.matrix(format!("fau.{i}.coa.w_m"), &f.coa.w_m);
            if let Some(w) = &f.coa.w_out {
                b.matrix(format!("fau.{i}.coa.w_out"), w);
            }
            b.scalar(format!("fau.{i}.coa.beta"), f.coa.beta);
        }
        b.matrix("lsp.w_q".into(), &self.lsp.w_q);
        b.matrix("lsp.w_k".into(), &self.lsp.w_k);
        b.matrix("lsp.centroids".into(), self.kmeans.centroids());
        b.scalar("lsp.decay".into(), self.kmeans.decay());
        b.scalar("lsp.window_size".into(), self.window_size as f32);
        if let Some(up) = &self.upsampler {
            b.conv("up", up);
        }
        b.conv("tail", &self.tail);
        b.0
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let head = read_conv(b, "head")?;
        let mut faus = Vec::new();
        while b.contains(&format!("fau.{}.conv1.weight", faus.len())) {
            let i = faus.len();
            let conv1 = read_conv(b, &format!("fau.{i}.conv1"))?;
            let conv2 = read_conv(b, &format!("fau.{i}.conv2"))?;
            let w_m = read_matrix(b, &format!("fau.{i}.coa.w_m"))?;
            let out_name = format!("fau.{i}.coa.w_out");
            let w_out = if b.contains(&out_name) {
                Some(read_matrix(b, &out_name)?)
            } else {
                None
            };
            let beta = read_scalar(b, &format!("fau.{i}.coa.beta"))?;
            let coa = CoaLayer::new(w_m, w_out, beta).map_err(|e| Error::ConfigMismatch {
                tensor: format!("fau.{i}.coa"),
                detail: e.to_string(),
            })?;
            faus.push(Fau { conv1, conv2, coa });
        }
        let lsp = LspProjection::new(read_matrix(b, "lsp.w_q")?, read_matrix(b, "lsp.w_k")?)
            .map_err(|e| Error::ConfigMismatch {
                tensor: "lsp.w_k".into(),
                detail: e.to_string(),
            })?;
        let decay = read_scalar(b, "lsp.decay")?;
        let kmeans = KMeansState::new(read_matrix(b, "lsp.centroids")?, decay).map_err(|e| {
            Error::ConfigMismatch {
                tensor: "lsp.centroids".into(),
                detail: e.to_string(),
            }
        })?;
        let ws = read_scalar(b, "lsp.window_size")?;
        if !(ws >= 1.0 && ws.fract() == 0.0 && ws <= 16_777_216.0) {
            return Err(Error::ConfigMismatch {
                tensor: "lsp.window_size".into(),
                detail: format!("{ws} is not a positive integer"),
            });
        }
        let upsampler = if b.contains("up.weight") {
            Some(read_conv(b, "up")?)
        } else {
            None
        };
        let tail = read_conv(b, "tail")?;
        if let Some((stray, _)) = b
            .iter()
            .find(|(n, _)| !ModelWeights::is_known_name(n, faus.len()))
        {
            return Err(Error::ConfigMismatch {
                tensor: stray.to_string(),
                detail: "unexpected tensor".into(),
            });
        }
        Ok(ModelWeights {
            head,
            faus,
            lsp,
            kmeans,
            window_size: ws as usize,
            upsampler,
            tail,
        })
    }

    fn is_known_name(name: &str, num_fau: usize) -> bool {
        const FIXED: [&str; 11] = [
            "head.weight",
            "head.bias",
            "lsp.w_q",
            "lsp.w_k",
            "lsp.centroids",
            "lsp.decay",
            "lsp.window_size",
            "up.weight",
            "up.bias",
            "tail.weight",
            "tail.bias",
        ];
        if FIXED.contains(&name) {
            return true;
        }
        let Some(rest) = name.strip_prefix("fau.") else {
            return false;
        };
        let Some((idx, field)) = rest.split_once('.') else {
            return false;
        };
        idx.parse::<usize>().is_ok_and(|i| i < num_fau)
            && matches!(
                field,
                "conv1.weight"
                    | "conv1.bias"
                    | "conv2.weight"
                    | "conv2.bias"
                    | "coa.w_m"
                    | "coa.w_out"
                    | "coa.beta"
            )
    }
}

#[derive(Default)]
struct Bundler(TensorBundle);

impl Bundler {
    fn push(&mut self, name: String, dims: Vec<usize>, data: Vec<f32>) {
        // Names are generated from distinct fields, so duplicates cannot occur.
        self.0
            .insert(name, Tensor { dims, data })
            .expect("unique tensor names");
    }

    fn conv(&mut self, name: &str, conv: &Conv3x3) {
        let (o, i) = (conv.out_channels(), conv.in_channels());
        self.push(
            format!("{name}.weight"),
            vec![o, 3, 3, i],
            conv.weight.as_slice().to_vec(),
        );
        self.push(format!("{name}.bias"), vec![o], conv.bias.clone());
    }

    fn matrix(&mut self, name: String, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    fn scalar(&mut self, name: String, v: f32) {
        self.push(name, Vec::new(), vec![v]);
    }
}

fn expect_rank<'a>(b: &'a TensorBundle, name: &str, rank: usize) -> Result<&'a Tensor> {
    let t = b.get(name)?;
    if t.dims.len() != rank {
        return Err(Error::DimensionMismatch {
            tensor: name.to_string(),
            expected: vec![0; rank],
            found: t.dims.clone(),
        });
    }
    Ok(t)
}

fn read_matrix(b: &TensorBundle, name: &str) -> Result<Matrix> {
    let t = expect_rank(b, name, 2)?;
    Matrix::from_vec(t.dims[0], t.dims[1], t.data.clone())
}

fn read_scalar(b: &TensorBundle, name: &str) -> Result<f32> {
    Ok(expect_rank(b, name, 0)?.data[0])
}

fn read_conv(b: &TensorBundle, name: &str) -> Result<Conv3x3> {
    let wname = format!("{name}.weight");
    let w = expect_rank(b, &wname, 4)?;
    let (o, i) = (w.dims[0], w.dims[3]);
    if w.dims[1] != 3 || w.dims[2] != 3 {
        return Err(Error::DimensionMismatch {
            tensor: wname,
            expected: vec![o, 3, 3, i],
            found: w.dims.clone(),
        });
    }
    let bname = format!("{name}.bias");
    let bias = expect_rank(b, &bname, 1)?;
    if bias.dims[0] != o {
        return Err(Error::DimensionMismatch {
            tensor: bname,
            expected: vec![o],
            found: bias.dims.clone(),
        });
    }
    Conv3x3::new(
        Matrix::from_vec(o, 9 * i, w.data.clone())?,
        bias.data.clone(),
        i,
    )
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    w.to_bundle().save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    ModelWeights::from_bundle(&TensorBundle::load(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SrMode {
    #[default]
    Inference,
    /// Also moves the centroids with this image's queries and keys.
    Calibrate,
}

#[derive(Debug, Clone)]
pub struct SrOutput {
    pub image: FeatureMap,
    /// Updated k-means state, in calibrate mode only.
    pub calibrated: Option<KMeansState>,
}

pub fn lcoan_forward(
    lr: &FeatureMap,
    weights: &ModelWeights,
    cfg: &NetConfig,
    mode: SrMode,
) -> Result<SrOutput> {
    lcoan_forward_with(lr, weights, cfg, mode, Exec::Sequential)
}

pub fn lcoan_forward_with(
    lr: &FeatureMap,
    weights: &ModelWeights,
    cfg: &NetConfig,
    mode: SrMode,
    exec: Exec,
) -> Result<SrOutput> {
    check_input(lr, weights, cfg)?;
    let (h, w) = (lr.height(), lr.width());
    let x1 = conv2d_3x3_with(lr, &weights.head, exec)?;
    let lsp_mode = match mode {
        SrMode::Inference => LspMode::Inference,
        SrMode::Calibrate => LspMode::Train,
    };
    let shared = lsp::lsp_forward_with(
        &x1.to_matrix(),
        &weights.lsp,
        &weights.kmeans,
        weights.window_size,
        lsp_mode,
        exec,
    )?;
    let mut x = x1;
    for fau in &weights.faus {
        let r = residual_block(&x, fau, exec)?.into_matrix();
        let y = coa_forward_with(&r, &fau.coa, &shared.weights, &shared.plan, exec)?;
        x = FeatureMap::from_matrix(h, w, y)?;
    }
    let image = reconstruct(x, weights, cfg, exec)?;
    Ok(SrOutput {
        image,
        calibrated: (mode == SrMode::Calibrate).then_some(shared.state),
    })
}

/// The network with every attention application removed.
pub fn conv_path_forward(
    lr: &FeatureMap,
    weights: &ModelWeights,
    cfg: &NetConfig,
    exec: Exec,
) -> Result<FeatureMap> {
    check_input(lr, weights, cfg)?;
    let mut x = conv2d_3x3_with(lr, &weights.head, exec)?;
    for fau in &weights.faus {
        x = residual_block(&x, fau, exec)?;
    }
    reconstruct(x, weights, cfg, exec)
}

fn check_input(lr: &FeatureMap, weights: &ModelWeights, cfg: &NetConfig) -> Result<()> {
    weights.validate(cfg)?;
    if lr.channels() != 3 || lr.positions() == 0 {
        return Err(Error::shape(
            "lcoan_forward",
            format!(
                "input is {}x{}x{}, expected a non-empty RGB map",
                lr.height(),
                lr.width(),
                lr.channels()
            ),
        ));
    }
    Ok(())
}

fn residual_block(x: &FeatureMap, fau: &Fau, exec: Exec) -> Result<FeatureMap> {
    let mut t = conv2d_3x3_with(x, &fau.conv1, exec)?;
    relu_in_place(&mut t);
    let mut r = conv2d_3x3_with(&t, &fau.conv2, exec)?;
    drop(t);
    for (a, &b) in r.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a += b;
    }
    Ok(r)
}

fn reconstruct(
    mut x: FeatureMap,
    weights: &ModelWeights,
    cfg: &NetConfig,
    exec: Exec,
) -> Result<FeatureMap> {
    if let Some(up) = &weights.upsampler {
        x = pixel_shuffle(&conv2d_3x3_with(&x, up, exec)?, 2)?;
    }
    let out = pixel_shuffle(
        &conv2d_3x3_with(&x, &weights.tail, exec)?,
        cfg.tail_factor(),
    )?;
    if !out.is_finite() {
        return Err(Error::NonFinite {
            stage: "reconstruction",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
