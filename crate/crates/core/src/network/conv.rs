//! 3×3 same-padded convolution and sub-pixel shuffling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nla::uniform;
use crate::tensor::{self, Exec, FeatureMap, Matrix};

// Pixels per im2col chunk; keeps the patch buffer small next to the features.
const CHUNK_PIXELS: usize = 512;

/// 3×3 kernel stored `out × (3·3·in)` with taps ordered `(ky, kx, in)`, plus a
/// per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Matrix,
    pub bias: Vec<f32>,
    in_channels: usize,
}

impl Conv3x3 {
    pub fn new(weight: Matrix, bias: Vec<f32>, in_channels: usize) -> Result<Self> {
        if weight.cols() != 9 * in_channels || bias.len() != weight.rows() {
            return Err(Error::shape(
                "Conv3x3::new",
                format!(
                    "weight {:?} and {} biases for {in_channels} input channels",
                    weight.shape(),
                    bias.len()
                ),
            ));
        }
        Ok(Conv3x3 {
            weight,
            bias,
            in_channels,
        })
    }

    pub fn synthesize(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 9 * in_channels;
        let weight = uniform(out_channels, fan_in, fan_in, rng);
        let s = 1.0 / (fan_in as f32).sqrt();
        let bias = (0..out_channels).map(|_| rng.gen_range(-s..=s)).collect();
        Conv3x3 {
            weight,
            bias,
            in_channels,
        }
    }

    /// Passes input channel `i` through to output channel `i` unchanged.
    pub fn identity(channels: usize) -> Self {
        let weight = Matrix::from_fn(channels, 9 * channels, |o, t| {
            if t == 4 * channels + o {
                1.0
            } else {
                0.0
            }
        });
        Conv3x3 {
            weight,
            bias: vec![0.0; channels],
            in_channels: channels,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv3x3 {
            weight: Matrix::zeros(out_channels, 9 * in_channels),
            bias: vec![0.0; out_channels],
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Cross-correlation with zero padding of one pixel on every side.
pub fn conv2d_3x3(x: &FeatureMap, conv: &Conv3x3) -> Result<FeatureMap> {
    conv2d_3x3_with(x, conv, Exec::Sequential)
}

pub fn conv2d_3x3_with(x: &FeatureMap, conv: &Conv3x3, exec: Exec) -> Result<FeatureMap> {
    let cin = x.channels();
    if cin != conv.in_channels {
        return Err(Error::shape(
            "conv2d_3x3",
            format!(
                "input has {cin} channels, kernel expects {}",
                conv.in_channels
            ),
        ));
    }
    let (h, w) = (x.height(), x.width());
    let cout = conv.out_channels();
    let n = h * w;
    let mut out = FeatureMap::zeros(h, w, cout);
    let src = x.as_slice();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_PIXELS).min(n);
        let mut patches = Matrix::zeros(end - start, 9 * cin);
        for p in start..end {
            let (y, xx) = (p / w, p % w);
            let row = patches.row_mut(p - start);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let o = ((sy as usize) * w + sx as usize) * cin;
                    let t = (ky * 3 + kx) * cin;
                    row[t..t + cin].copy_from_slice(&src[o..o + cin]);
                }
            }
        }
        let y = tensor::matmul_nt_with(&patches, &conv.weight, exec)?;
        let dst = &mut out.as_mut_slice()[start * cout..end * cout];
        for (d, (&v, &b)) in dst
            .iter_mut()
            .zip(y.as_slice().iter().zip(conv.bias.iter().cycle()))
        {
            *d = v + b;
        }
        start = end;
    }
    Ok(out)
}

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in x.as_mut_slice() {
        *v = v.max(0.0);
    }
}

/// Rearranges `h × w × (c·r²)` into `(h·r) × (w·r) × c`.
///
/// Input channel `c·r² + dy·r + dx` of pixel `(y, x)` lands in channel `c` of
/// output pixel `(y·r + dy, x·r + dx)`.
pub fn pixel_shuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || !x.channels().is_multiple_of(r * r) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by r² = {}", x.channels(), r * r),
        ));
    }
    let c = x.channels() / (r * r);
    Ok(FeatureMap::from_fn(
        x.height() * r,
        x.width() * r,
        c,
        |oy, ox, oc| {
            let (y, dy) = (oy / r, oy % r);
            let (xx, dx) = (ox / r, ox % r);
            x.get(y, xx, oc * r * r + dy * r + dx)
        },
    ))
}
