//! Seeded synthetic lesion images.
//!
//! Sample `i` of a dataset draws every random number from ChaCha8 seeded
//! with `seed` on stream `i`, so a sample depends only on `(seed, i)` and
//! the configuration.
//!
//! Each image is a smooth background (a sum of three random low-frequency
//! cosines around mid-grey, with a per-channel tint) plus Gaussian noise.
//! One to three filled ellipses whose union covers a target fraction of the
//! image, drawn uniformly from `lesion_area_range`, form the mask; inside it
//! the image is shifted by `contrast`. Draws whose rasterised foreground
//! fraction misses the range are redrawn, so every sample lands inside it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Foreground fraction range `(lo, hi)`, `0 < lo <= hi < 0.5`.
    pub lesion_area_range: (f64, f64),
    /// Intensity shift inside lesions; negative renders darker lesions.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Small hypoechoic lesions on grayscale 64x64 images.
    pub fn bus_like(count: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            height: 64,
            width: 64,
            channels: 1,
            lesion_area_range: (0.02, 0.10),
            contrast: -0.25,
            noise_sigma: 0.08,
            seed,
        }
    }

    /// Larger lesions on 96x128 three-channel images.
    pub fn isic_like(count: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            height: 96,
            width: 128,
            channels: 3,
            lesion_area_range: (0.10, 0.40),
            contrast: -0.25,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn preset(name: &str, count: usize, seed: u64) -> Result<Self> {
        match name {
            "bus-like" | "bus" => Ok(Self::bus_like(count, seed)),
            "isic-like" | "isic" => Ok(Self::isic_like(count, seed)),
            _ => Err(Error::InvalidConfig(format!(
                "preset must be bus-like or isic-like, got {name:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "lesion area range must satisfy 0 < lo <= hi < 0.5, got ({lo}, {hi})"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !self.contrast.is_finite() {
            return Err(Error::InvalidConfig("contrast must be finite".into()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("height, width and channels must be positive".into()));
        }
        let pixels = (self.height * self.width) as f64;
        let (min_px, max_px) = ((lo * pixels).ceil(), (hi * pixels).floor());
        if min_px < 1.0 || min_px > max_px {
            return Err(Error::InvalidConfig(format!(
                "lesion area range ({lo}, {hi}) has no whole-pixel solution on a {}x{} image",
                self.height, self.width
            )));
        }
        // A disc of the largest area must fit.
        let radius = (hi * pixels / PI).sqrt();
        if 2.0 * radius > self.height.min(self.width) as f64 {
            return Err(Error::InvalidConfig(format!(
                "lesions of area fraction {hi} do not fit a {}x{} image",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Foreground fraction summary of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl DatasetStats {
    pub fn of<T: Scalar>(samples: &[Sample<T>]) -> Self {
        let fr: Vec<f64> = samples.iter().map(Sample::foreground_fraction).collect();
        let n = fr.len();
        DatasetStats {
            count: n,
            mean: if n == 0 { 0.0 } else { fr.iter().sum::<f64>() / n as f64 },
            min: fr.iter().copied().fold(f64::INFINITY, f64::min),
            max: fr.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn draw_mask(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Option<Vec<bool>> {
    let (h, w) = (cfg.height, cfg.width);
    let pixels = (h * w) as f64;
    let (lo, hi) = cfg.lesion_area_range;
    let target = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let k = rng.gen_range(1..=3usize);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.3..1.0)).collect();
    let total: f64 = weights.iter().sum();

    let mut ellipses = Vec::with_capacity(k);
    for wgt in &weights {
        let area = target * pixels * wgt / total;
        let ratio: f64 = rng.gen_range(0.5..1.0);
        let a = (area / (PI * ratio)).sqrt();
        let b = a * ratio;
        let theta: f64 = rng.gen_range(0.0..PI);
        let reach = a.max(0.5);
        if 2.0 * reach >= w.min(h) as f64 {
            return None;
        }
        let cx = rng.gen_range(reach..w as f64 - reach);
        let cy = rng.gen_range(reach..h as f64 - reach);
        ellipses.push(Ellipse {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        });
    }

    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            ellipses.iter().any(|e| e.contains(x, y))
        })
        .collect();
    let fraction = mask.iter().filter(|&&m| m).count() as f64 / pixels;
    (lo..=hi).contains(&fraction).then_some(mask)
}

fn generate_one<T: Scalar>(cfg: &SyntheticConfig, index: usize) -> Result<Sample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);

    let mask = (0..MAX_ATTEMPTS)
        .find_map(|_| draw_mask(cfg, &mut rng))
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "could not place lesions covering {:?} of a {h}x{w} image",
                cfg.lesion_area_range
            ))
        })?;

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.03..0.08),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tints: Vec<f64> = (0..c)
        .map(|_| if c == 1 { 0.0 } else { rng.gen_range(-0.1..0.1) })
        .collect();

    let mut image = Vec::with_capacity(c * h * w);
    for tint in &tints {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let field: f64 = waves
                    .iter()
                    .map(|(amp, fx, fy, phase)| amp * (2.0 * PI * (fx * u + fy * v) + phase).cos())
                    .sum();
                let lesion = if mask[y * w + x] { cfg.contrast } else { 0.0 };
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma;
                image.push(T::lit((0.5 + tint + field + lesion + noise).clamp(0.0, 1.0)));
            }
        }
    }
    let mask = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    Sample::new(
        Tensor::new(vec![c, h, w], image)?,
        Tensor::new(vec![1, h, w], mask)?,
        format!("{index:05}"),
    )
}

/// Generates `cfg.count` samples; sample `i` has id `format!("{i:05}")`.
pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticConfig) -> Result<Vec<Sample<T>>> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect()
}
