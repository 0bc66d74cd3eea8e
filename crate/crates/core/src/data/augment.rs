use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resize::resize_region;
use super::{Image, Normalization};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Two-view pipeline: resized crop, flip, color jitter, grayscale, normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub size: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            size: 32,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
        }
    }
}

impl AugConfig {
    pub fn for_size(size: usize) -> Self {
        Self { size, ..Self::default() }
    }

    /// No randomness: the full image, normalized.
    pub fn identity(size: usize) -> Self {
        Self { size, crop_scale: [1.0, 1.0], crop_ratio: [1.0, 1.0], flip_p: 0.0, jitter_p: 0.0, grayscale_p: 0.0, ..Self::default() }
    }
}

/// Single-view supervised pipeline: padded random crop, flip, normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedAugConfig {
    pub size: usize,
    pub padding: usize,
    pub flip_p: f64,
}

impl Default for SupervisedAugConfig {
    fn default() -> Self {
        Self { size: 32, padding: 4, flip_p: 0.5 }
    }
}

impl SupervisedAugConfig {
    pub fn identity(size: usize) -> Self {
        Self { size, padding: 0, flip_p: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub source_index: usize,
}

fn check_size(img: &Image, size: usize) -> Result<()> {
    if img.height != size || img.width != size {
        return Err(shape_err!("{}x{} image for a {} pipeline", img.height, img.width, size));
    }
    Ok(())
}

fn crop_window<R: Rng>(h: usize, w: usize, scale: [f64; 2], ratio: [f64; 2], rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (libm::log(ratio[0]), libm::log(ratio[1]));
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = libm::exp(uniform(rng, lr0, lr1));
        let cw = libm::round(libm::sqrt(target * aspect)) as usize;
        let ch = libm::round(libm::sqrt(target / aspect)) as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio[0] {
        ((libm::round(w as f64 / ratio[0]) as usize).clamp(1, h), w)
    } else if in_ratio > ratio[1] {
        (h, (libm::round(h as f64 * ratio[1]) as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn flip(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

fn gray(img: &Image) -> Vec<f64> {
    if img.channels < 3 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
}

fn blend(img: &mut Image, other: &[f64], factor: f64, per_pixel: bool) {
    let s = img.height * img.width;
    for (i, v) in img.data.iter_mut().enumerate() {
        let o = if per_pixel { other[i % s] } else { other[0] };
        *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
    }
}

fn wrap_unit(x: f64) -> f64 {
    x - libm::floor(x)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap_unit((g - b) / d / 6.0)
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = wrap_unit(h) * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(img: &mut Image, delta: f64) {
    let s = img.height * img.width;
    for i in 0..s {
        let (h, sat, v) = rgb_to_hsv(img.data[i], img.data[s + i], img.data[2 * s + i]);
        let (r, g, b) = hsv_to_rgb(h + delta, sat, v);
        img.data[i] = r;
        img.data[s + i] = g;
        img.data[2 * s + i] = b;
    }
}

fn color_jitter<R: Rng>(img: &mut Image, cfg: &AugConfig, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut R, amount: f64| uniform(rng, (1.0 - amount).max(0.0), 1.0 + amount);
    let b = factor(rng, cfg.brightness);
    let c = factor(rng, cfg.contrast);
    let s = factor(rng, cfg.saturation);
    let h = uniform(rng, -cfg.hue, cfg.hue);
    let rgb = img.channels == 3;
    for op in order {
        match op {
            0 => blend(img, &[0.0], b, false),
            1 => {
                let g = gray(img);
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                blend(img, &[mean], c, false);
            }
            2 if rgb => {
                let g = gray(img);
                blend(img, &g, s, true);
            }
            3 if rgb && h != 0.0 => shift_hue(img, h),
            _ => {}
        }
    }
}

fn augment_once<R: Rng>(img: &Image, cfg: &AugConfig, norm: &Normalization, rng: &mut R) -> Tensor {
    let (top, left, h, w) = crop_window(img.height, img.width, cfg.crop_scale, cfg.crop_ratio, rng);
    let mut out = resize_region(img, top, left, h, w, cfg.size, cfg.size);
    if rng.random::<f64>() < cfg.flip_p {
        flip(&mut out);
    }
    if rng.random::<f64>() < cfg.jitter_p {
        color_jitter(&mut out, cfg, rng);
    }
    if out.channels == 3 && rng.random::<f64>() < cfg.grayscale_p {
        let g = gray(&out);
        for c in 0..3 {
            let s = g.len();
            out.data[c * s..(c + 1) * s].copy_from_slice(&g);
        }
    }
    norm.apply(&out)
}

/// Two independent draws of the augmentation pipeline on one image.
pub fn two_view_augment<R: Rng>(img: &Image, source_index: usize, cfg: &AugConfig, norm: &Normalization, rng: &mut R) -> Result<ViewPair> {
    check_size(img, cfg.size)?;
    let view1 = augment_once(img, cfg, norm, rng);
    let view2 = augment_once(img, cfg, norm, rng);
    Ok(ViewPair { view1, view2, source_index })
}

/// Zero-padded random crop and flip.
pub fn supervised_augment<R: Rng>(img: &Image, cfg: &SupervisedAugConfig, norm: &Normalization, rng: &mut R) -> Result<Tensor> {
    check_size(img, cfg.size)?;
    let p = cfg.padding;
    let top = rng.random_range(0..=2 * p);
    let left = rng.random_range(0..=2 * p);
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y + top) as isize - p as isize, (x + left) as isize - p as isize);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                data.push(if inside { plane[sy as usize * w + sx as usize] } else { 0.0 });
            }
        }
    }
    let mut out = Image { channels: img.channels, height: h, width: w, data };
    if rng.random::<f64>() < cfg.flip_p {
        flip(&mut out);
    }
    Ok(norm.apply(&out))
}
