//! 8-bit RGB images, binary PPM (P6) and luma PSNR.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Returned for identical images, where the ratio is unbounded.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    rgb: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::shape(
                "Image::new",
                format!("{} bytes for a {height}x{width} RGB image", rgb.len()),
            ));
        }
        Ok(Image { height, width, rgb })
    }

    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = (0..3 * height * width).map(|_| rng.gen()).collect();
        Image { height, width, rgb }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let data = self.rgb.iter().map(|&v| v as f32 / 255.0).collect();
        FeatureMap::new(self.height, self.width, 3, data).expect("length checked on construction")
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level. NaN maps to 0.
    pub fn from_feature_map(x: &FeatureMap) -> Result<Self> {
        if x.channels() != 3 {
            return Err(Error::shape(
                "Image::from_feature_map",
                format!("{} channels, expected 3", x.channels()),
            ));
        }
        let rgb = x
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image::new(x.height(), x.width(), rgb)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut h = Header { bytes, pos: 0 };
        let magic = h.token()?;
        if magic != b"P6" {
            return Err(Error::PpmMagic(String::from_utf8_lossy(magic).into_owned()));
        }
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if maxval != 255 {
            return Err(Error::PpmDepth(maxval));
        }
        match bytes.get(h.pos) {
            Some(b) if b.is_ascii_whitespace() => h.pos += 1,
            _ => return Err(Error::PpmHeader("missing whitespace after maxval".into())),
        }
        let expected = 3 * width as usize * height as usize;
        let body = &bytes[h.pos..];
        if body.len() < expected {
            return Err(Error::PpmShortBody {
                expected,
                found: body.len(),
            });
        }
        Image::new(height as usize, width as usize, body[..expected].to_vec())
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PpmHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| {
                Error::PpmHeader(format!("bad {what} {:?}", String::from_utf8_lossy(tok)))
            })
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    Image::decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, image.encode_ppm())?;
    Ok(())
}

/// BT.601 luma `0.299 R + 0.587 G + 0.114 B` on 8-bit values.
fn luma(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// PSNR of the luma planes in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr_y(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "psnr_y",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    let n = a.height * a.width;
    if n == 0 {
        return Err(Error::InvalidArgument("psnr_y of empty images".into()));
    }
    let sse: f64 = a
        .rgb
        .chunks_exact(3)
        .zip(b.rgb.chunks_exact(3))
        .map(|(p, q)| {
            let d = luma([p[0], p[1], p[2]]) - luma([q[0], q[1], q[2]]);
            d * d
        })
        .sum();
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}
