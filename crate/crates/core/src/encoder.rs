//! Frozen image encoder.
//!
//! Each `patch × patch` block is summarized by eight statistics (mean color,
//! color spread, gradient energy, vertical position), which a fixed random
//! projection and `tanh` turn into `F` features. The frame descriptor is the
//! mean patch feature vector of each of four horizontal bands plus the
//! per-feature spread over all patches; a second fixed projection maps it
//! to `E` dimensions, L2-normalized. Both projections come from a seeded
//! ChaCha stream, so a given seed always yields the same encoder.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_range, Execution};

pub const PATCH_STATS: usize = 8;
/// Horizontal bands pooled separately in the frame descriptor.
pub const EMBED_BANDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub width: u32,
    pub height: u32,
    /// Patch edge and stride, pixels.
    pub patch: u32,
    pub features: usize,
    pub embedding: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 192,
            patch: 8,
            features: 16,
            embedding: 32,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.width % self.patch == 0
            && self.height % (2 * self.patch) == 0
            && self.features > 0
            && self.embedding > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "encoder needs width divisible by patch and height by 2*patch: {self:?}"
            )))
        }
    }

    pub fn cols(&self) -> usize {
        (self.width / self.patch) as usize
    }

    pub fn rows(&self) -> usize {
        (self.height / self.patch) as usize
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub timestamp: f64,
    pub cols: usize,
    pub rows: usize,
    pub dim: usize,
    /// Row-major patches, `dim` features each.
    pub features: Vec<f32>,
    /// Unit-norm global embedding.
    pub embedding: Vec<f64>,
}

impl EncodedFrame {
    pub fn patch(&self, col: usize, row: usize) -> &[f32] {
        let i = (row * self.cols + col) * self.dim;
        &self.features[i..i + self.dim]
    }

    pub fn patch_index(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Raw patch statistics: mean RGB and RGB standard deviation mapped to
/// about [-1, 1], gradient energy, and vertical position in [-1, 1].
pub fn patch_stats(img: &RgbImage, px: u32, py: u32, patch: u32) -> [f64; PATCH_STATS] {
    let (w, h) = img.dimensions();
    let n = (patch * patch) as f64;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut grad = 0.0;
    let gray = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    for y in py..py + patch {
        for x in px..px + patch {
            let p = img.get_pixel(x, y).0;
            for c in 0..3 {
                let v = p[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
            let g = gray(x, y);
            let gx = if x + 1 < w { gray(x + 1, y) - g } else { 0.0 };
            let gy = if y + 1 < h { gray(x, y + 1) - g } else { 0.0 };
            grad += gx * gx + gy * gy;
        }
    }
    let mut s = [0.0; PATCH_STATS];
    for c in 0..3 {
        let mean = sum[c] / n;
        let var = (sq[c] / n - mean * mean).max(0.0);
        s[c] = mean / 127.5 - 1.0;
        s[3 + c] = var.sqrt() / 32.0 - 0.5;
    }
    s[6] = (grad / n).sqrt() / 32.0 - 0.5;
    s[7] = (py as f64 + patch as f64 / 2.0) / h as f64 * 2.0 - 1.0;
    s
}

/// Deterministic random-projection encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    /// `features × (PATCH_STATS + 1)`, last column is the bias.
    w: Vec<f64>,
    /// `embedding × (EMBED_BANDS + 1)·features`.
    p: Vec<f64>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let wdist = Normal::new(0.0, 0.8).expect("valid normal");
        let bdist = Normal::new(0.0, 0.3).expect("valid normal");
        let mut w = Vec::with_capacity(cfg.features * (PATCH_STATS + 1));
        for _ in 0..cfg.features {
            for _ in 0..PATCH_STATS {
                w.push(wdist.sample(&mut rng));
            }
            w.push(bdist.sample(&mut rng));
        }
        let pdist = Normal::new(0.0, 1.0).expect("valid normal");
        let p = (0..cfg.embedding * (EMBED_BANDS + 1) * cfg.features).map(|_| pdist.sample(&mut rng)).collect();
        Ok(Self { cfg, w, p })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch features from raw statistics.
    pub fn project(&self, s: &[f64; PATCH_STATS], out: &mut [f32]) {
        let k = PATCH_STATS + 1;
        for (f, o) in out.iter_mut().enumerate() {
            let row = &self.w[f * k..(f + 1) * k];
            let z: f64 = row[..PATCH_STATS].iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + row[PATCH_STATS];
            *o = z.tanh() as f32;
        }
    }

    pub fn encode(&self, img: &RgbImage, timestamp: f64) -> Result<EncodedFrame> {
        self.encode_with(img, timestamp, Execution::default())
    }

    pub fn encode_with(&self, img: &RgbImage, timestamp: f64, exec: Execution) -> Result<EncodedFrame> {
        let c = &self.cfg;
        if img.width() != c.width || img.height() != c.height {
            return Err(Error::WrongResolution {
                expected_width: c.width,
                expected_height: c.height,
                actual_width: img.width(),
                actual_height: img.height(),
            });
        }
        let (cols, rows, dim) = (c.cols(), c.rows(), c.features);
        let per_patch = map_range(exec, cols * rows, |i| {
            let s = patch_stats(img, (i % cols) as u32 * c.patch, (i / cols) as u32 * c.patch, c.patch);
            let mut f = vec![0.0f32; dim];
            self.project(&s, &mut f);
            f
        });
        let features: Vec<f32> = per_patch.into_iter().flatten().collect();
        let embedding = self.embed(&features, cols * rows)?;
        Ok(EncodedFrame {
            timestamp,
            cols,
            rows,
            dim,
            features,
            embedding,
        })
    }

    fn embed(&self, features: &[f32], patches: usize) -> Result<Vec<f64>> {
        let dim = self.cfg.features;
        let rows = self.cfg.rows();
        let per_row = patches / rows;
        let mut desc = vec![0.0f64; (EMBED_BANDS + 1) * dim];
        let mut counts = [0usize; EMBED_BANDS];
        let mut total = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for (i, p) in features.chunks_exact(dim).enumerate() {
            let band = (i / per_row) * EMBED_BANDS / rows;
            counts[band] += 1;
            for (k, v) in p.iter().enumerate() {
                let v = *v as f64;
                desc[band * dim + k] += v;
                total[k] += v;
                sq[k] += v * v;
            }
        }
        for (b, n) in counts.iter().enumerate() {
            for d in &mut desc[b * dim..(b + 1) * dim] {
                *d /= (*n).max(1) as f64;
            }
        }
        let n = patches as f64;
        for k in 0..dim {
            let mean = total[k] / n;
            desc[EMBED_BANDS * dim + k] = 2.0 * (sq[k] / n - mean * mean).max(0.0).sqrt();
        }
        let mut e: Vec<f64> = self
            .p
            .chunks_exact(desc.len())
            .map(|row| row.iter().zip(&desc).map(|(a, b)| a * b).sum())
            .collect();
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::ZeroEmbedding);
        }
        for v in &mut e {
            *v /= norm;
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(c))
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = Encoder::new(EncoderConfig::default()).unwrap();
        let mut img = solid(256, 192, [40, 120, 30]);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0[0] = (i * 7 % 251) as u8;
        }
        let a = e.encode(&img, 1.0).unwrap();
        let b = e.encode_with(&img, 1.0, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(a.features.len(), 32 * 24 * 16);
    }

    #[test]
    fn uniform_patch_has_no_spread_or_gradient() {
        let img = solid(16, 16, [200, 10, 90]);
        let s = patch_stats(&img, 0, 0, 8);
        for c in 0..3 {
            assert_eq!(s[3 + c], -0.5);
        }
        assert_eq!(s[6], -0.5);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let e = Encoder::new(EncoderConfig::default()).unwrap();
        assert!(matches!(
            e.encode(&solid(64, 64, [0, 0, 0]), 0.0),
            Err(Error::WrongResolution { .. })
        ));
    }

    #[test]
    fn same_seed_same_encoder() {
        let a = Encoder::new(EncoderConfig::default()).unwrap();
        let b = Encoder::new(EncoderConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Encoder::new(EncoderConfig { seed: 8, ..Default::default() }).unwrap();
        assert_ne!(a, c);
    }
}
