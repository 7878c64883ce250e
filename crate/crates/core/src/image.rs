//! Grayscale image representation, binary PGM (P5) i/o, noise synthesis and
//! quality metrics.
//!
//! Intensities are kept as `f64` for the whole pipeline; they are quantized
//! (rounded half away from zero, clamped to `[0, 255]`) only when a file is
//! written.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major grayscale image with real-valued intensities.
///
/// Values loaded from 8-bit files lie in `[0, 255]`; intermediate images may
/// leave that range and are clamped only on save.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::BadImageShape {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    /// Loads a binary PGM ("P5") file with maxval 255.
    ///
    /// Header tokens can be separated by any whitespace and `#` comments.
    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes, path)
    }

    /// Writes a binary PGM ("P5", maxval 255) file.
    ///
    /// Each sample is rounded half away from zero and clamped to `[0, 255]`.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(32 + self.data.len());
        out.extend_from_slice(format!("P5\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend(self.data.iter().map(|&v| quantize(v)));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Returns a copy with every sample clamped to `[0, 255]`.
    pub fn clamped(&self) -> Self {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v.clamp(0.0, 255.0)).collect(),
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    // f64::round rounds half away from zero.
    v.round().clamp(0.0, 255.0) as u8
}

/// Additive white Gaussian noise specification.
///
/// `sigma` is the noise standard deviation on the `[0, 255]` intensity scale.
/// The generator is ChaCha12 seeded from `seed`; the deterministic-per-seed
/// contract holds within one build of this crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidSigma(sigma));
        }
        Ok(NoiseSpec { sigma, seed })
    }
}

/// Adds i.i.d. Gaussian noise `sigma * g` to every sample.
///
/// The result is not clamped; deterministic for a fixed seed.
pub fn add_awgn(img: &GrayImage, noise: &NoiseSpec) -> GrayImage {
    let mut rng = ChaCha12Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = img
        .data
        .iter()
        .map(|&v| v + noise.sigma * normal.sample(&mut rng))
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Peak signal-to-noise ratio in decibels, peak value 255.
///
/// Both images are clamped to `[0, 255]` before the mean squared error is
/// taken. Identical images yield `f64::INFINITY`.
pub fn psnr(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    if reference.width != test.width || reference.height != test.height {
        return Err(Error::DimensionMismatch(
            reference.width,
            reference.height,
            test.width,
            test.height,
        ));
    }
    let mse = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(&a, &b)| {
            let d = a.clamp(0.0, 255.0) - b.clamp(0.0, 255.0);
            d * d
        })
        .sum::<f64>()
        / reference.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let malformed = |detail: &str| Error::PgmMalformedHeader {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = bytes
            .iter()
            .take(2)
            .map(|&b| b as char)
            .collect::<String>();
        return Err(Error::PgmBadMagic {
            path: path.to_path_buf(),
            found,
        });
    }

    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        pos = skip_header_filler(bytes, pos).ok_or_else(|| malformed("unexpected end of header"))?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(malformed("expected a decimal header token"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = token
            .parse::<u64>()
            .map_err(|_| malformed("header token out of range"))?;
    }
    let [width, height, maxval] = fields;

    if maxval != 255 {
        return Err(Error::PgmUnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero width or height"));
    }

    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing whitespace before raster"));
    }
    pos += 1;

    let expected = (width * height) as usize;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::PgmTruncatedRaster {
            path: path.to_path_buf(),
            expected,
            found: raster.len(),
        });
    }
    let data = raster[..expected].iter().map(|&b| b as f64).collect();
    GrayImage::new(width as usize, height as usize, data)
}

/// Skips whitespace and `#` comments; returns the next token offset.
fn skip_header_filler(bytes: &[u8], mut pos: usize) -> Option<usize> {
    loop {
        if pos >= bytes.len() {
            return None;
        }
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => pos += 1,
            _ => return Some(pos),
        }
    }
}
