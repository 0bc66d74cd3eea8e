use alloc::vec::Vec;

use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, SYNTHETIC};

/// Gaussian-blob texture corpus. Each image scatters elongated Gaussian
/// blobs at random positions. A class fixes the blob orientation and a warm or
/// cool hue family, so telling two classes apart needs color for some pairs
/// and orientation for others. Classes past the sixth also change blob scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub blobs_per_image: usize,
    /// Blobs of random orientation and hue mixed into every image.
    pub distractors: usize,
    /// Long-axis standard deviation as a fraction of the image size.
    pub blob_scale: f64,
    /// Ratio of the long to the short blob axis.
    pub elongation: f64,
    /// Half-width of the per-blob hue jitter around the class hue.
    pub hue_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            train_per_class: 100,
            test_per_class: 200,
            size: 16,
            channels: 3,
            blobs_per_image: 20,
            distractors: 0,
            blob_scale: 0.15,
            elongation: 4.0,
            hue_spread: 0.08,
            noise: 0.05,
            seed: 0,
        }
    }
}

const WARM_HUE: f64 = 0.05;
const COOL_HUE: f64 = 0.55;

#[derive(Clone, Copy, Debug)]
struct Style {
    /// Horizontal, vertical or diagonal (either sense, so flips keep it).
    orientation: usize,
    hue: f64,
    scale: f64,
}

fn style_of(class: usize) -> Style {
    let hue = if (class / 3).is_multiple_of(2) { WARM_HUE } else { COOL_HUE };
    Style { orientation: class % 3, hue, scale: 1.0 + 0.6 * (class / 6) as f64 }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    angle: f64,
    major: f64,
    minor: f64,
    color: [f64; 3],
}

fn blob<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, style: Style, distractor: bool) -> Blob {
    let size = cfg.size as f64;
    let (angle, hue) = if distractor {
        (rng.random_range(0.0..PI), rng.random_range(0.0..1.0))
    } else {
        let base = match style.orientation {
            0 => 0.0,
            1 => PI / 2.0,
            _ if rng.random_bool(0.5) => PI / 4.0,
            _ => 3.0 * PI / 4.0,
        };
        let jitter = if cfg.hue_spread > 0.0 { rng.random_range(-cfg.hue_spread..cfg.hue_spread) } else { 0.0 };
        (base + rng.random_range(-0.2..0.2), style.hue + jitter)
    };
    let color = hsv(hue, rng.random_range(0.6..0.9), rng.random_range(0.7..1.0));
    let major = cfg.blob_scale * size * style.scale * rng.random_range(0.8..1.2);
    Blob { cy: rng.random_range(0.0..size), cx: rng.random_range(0.0..size), angle, major, minor: major / cfg.elongation.max(1.0), color }
}

fn render<R: Rng>(cfg: &SyntheticConfig, style: Style, rng: &mut R, out: &mut Vec<u8>) {
    let size = cfg.size;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite noise");
    let background = rng.random_range(0.05..0.3);
    let mut blobs: Vec<Blob> = (0..cfg.blobs_per_image).map(|_| blob(rng, cfg, style, false)).collect();
    for _ in 0..cfg.distractors {
        blobs.push(blob(rng, cfg, style, true));
    }
    let mut img = alloc::vec![background; 3 * size * size];
    for b in &blobs {
        let (s, c) = (libm::sin(b.angle), libm::cos(b.angle));
        let reach = 3.0 * b.major;
        let y0 = libm::floor(b.cy - reach).max(0.0) as usize;
        let y1 = (libm::ceil(b.cy + reach) as usize).min(size);
        let x0 = libm::floor(b.cx - reach).max(0.0) as usize;
        let x1 = (libm::ceil(b.cx + reach) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - b.cy, x as f64 + 0.5 - b.cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                let w = libm::exp(-0.5 * (u * u / (b.major * b.major) + v * v / (b.minor * b.minor)));
                for ch in 0..3 {
                    let p = &mut img[ch * size * size + y * size + x];
                    *p = *p * (1.0 - w) + b.color[ch] * w;
                }
            }
        }
    }
    for ch in 0..cfg.channels {
        for i in 0..size * size {
            let v = if cfg.channels == 3 {
                img[ch * size * size + i]
            } else {
                (img[i] + img[size * size + i] + img[2 * size * size + i]) / 3.0
            };
            let v = if cfg.noise > 0.0 { v + noise.sample(rng) } else { v };
            out.push(libm::round(v.clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
}

/// Generates `(train, test)` splits; labels are interleaved by class.
pub fn synthetic_blobs(cfg: &SyntheticConfig) -> Result<(ImageSet, ImageSet)> {
    if cfg.num_classes == 0 || cfg.size == 0 || !matches!(cfg.channels, 1 | 3) {
        return Err(Error::Config("synthetic corpus needs classes, a size and 1 or 3 channels".into()));
    }
    let split = |key: u64, per_class: usize| {
        let mut rng = keyed_rng(cfg.seed, &[SYNTHETIC, key]);
        let mut pixels = Vec::with_capacity(per_class * cfg.num_classes * cfg.channels * cfg.size * cfg.size);
        let mut labels = Vec::with_capacity(per_class * cfg.num_classes);
        for _ in 0..per_class {
            for class in 0..cfg.num_classes {
                render(cfg, style_of(class), &mut rng, &mut pixels);
                labels.push(class as u32);
            }
        }
        ImageSet::new(cfg.channels, cfg.size, cfg.size, pixels, labels, cfg.num_classes)
    };
    Ok((split(1, cfg.train_per_class)?, split(2, cfg.test_per_class)?))
}
