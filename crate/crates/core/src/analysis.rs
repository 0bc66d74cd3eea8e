//! Representation forensics: linear CKA, parameter distance, loss-landscape
//! scans and feature-map tiles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::models::{EncoderBundle, FeatureSource};
use crate::params::{ParamKind, ParamVector};
use crate::rng::{keyed_rng, PROBE};
use crate::tensor::Tensor;

/// Loss recorded for grid points whose loss is not finite.
pub const SATURATED_LOSS: f64 = 1e9;

fn centered_columns(x: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (x.shape()[0], x.row_len());
    let mut data = x.data().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| data[r * d + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            data[r * d + c] -= mean;
        }
    }
    (data, n, d)
}

fn gram_norm_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..da {
        for j in 0..db {
            let mut c = 0.0;
            for r in 0..n {
                c += a[r * da + i] * b[r * db + j];
            }
            s += c * c;
        }
    }
    s
}

/// `‖Cov(X,Y)‖²_F / (‖Cov(X,X)‖_F ‖Cov(Y,Y)‖_F)` with biased covariances.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(shape_err!("cka inputs {:?} and {:?}", x.shape(), y.shape()));
    }
    if x.shape()[0] < 3 {
        return Err(Error::Degenerate("cka needs at least 3 examples".into()));
    }
    let (xc, n, dx) = centered_columns(x);
    let (yc, _, dy) = centered_columns(y);
    let xy = gram_norm_sq(&xc, dx, &yc, dy, n);
    let xx = libm::sqrt(gram_norm_sq(&xc, dx, &xc, dx, n));
    let yy = libm::sqrt(gram_norm_sq(&yc, dy, &yc, dy, n));
    if !(xx > 0.0) || !(yy > 0.0) {
        return Err(Error::Degenerate("zero-variance activations".into()));
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Averages `[N, C, H, W]` activations over space; 2-d input passes through.
pub fn spatial_pool(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        2 => Ok(t.clone()),
        4 => {
            let s = t.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            Tensor::from_vec(&[n, c], data)
        }
        _ => Err(shape_err!("cannot pool activations {:?}", t.shape())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub blocks: Vec<usize>,
    pub scores: Vec<f64>,
    pub probe_size: usize,
    pub spatially_pooled: bool,
}

fn pooled_block(bundle: &EncoderBundle, set: &ImageSet, ids: &[usize], norm: &Normalization, block: usize, batch: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut d = 0;
    for chunk in ids.chunks(batch.max(1)) {
        let a = spatial_pool(&bundle.extract_block_features(&norm.batch(set, chunk), block)?)?;
        d = a.row_len();
        data.extend_from_slice(a.data());
    }
    Tensor::from_vec(&[ids.len(), d], data)
}

/// Per-block linear CKA between two encoders on a probe set.
pub fn cka_report(
    a: &EncoderBundle,
    b: &EncoderBundle,
    probe: &ImageSet,
    ids: &[usize],
    norm: &Normalization,
    blocks: &[usize],
    batch: usize,
) -> Result<CkaReport> {
    if a.num_blocks() != b.num_blocks() {
        return Err(shape_err!("encoders expose {} and {} blocks", a.num_blocks(), b.num_blocks()));
    }
    let mut scores = Vec::with_capacity(blocks.len());
    for &blk in blocks {
        let xa = pooled_block(a, probe, ids, norm, blk, batch)?;
        let xb = pooled_block(b, probe, ids, norm, blk, batch)?;
        scores.push(linear_cka(&xa, &xb)?);
    }
    Ok(CkaReport { blocks: blocks.to_vec(), scores, probe_size: ids.len(), spatially_pooled: true })
}

/// Euclidean distance between the trainable parameters of two encoders.
pub fn l2_param_distance(a: &EncoderBundle, b: &EncoderBundle) -> Result<f64> {
    a.parameter_vector().distance(&b.parameter_vector())
}

/// Gaussian direction whose every filter (output row of a weight) has the
/// norm of the matching model filter; bias and normalization coordinates
/// are zero.
pub fn filter_normalized_direction<R: Rng>(bundle: &EncoderBundle, rng: &mut R) -> ParamVector {
    let store = &bundle.store;
    let mut values = Vec::with_capacity(store.trainable_count());
    for id in store.trainable_ids() {
        let entry = store.entry(id);
        let theta = &entry.value;
        if entry.kind != ParamKind::Weight || theta.ndim() < 2 {
            values.extend(core::iter::repeat_n(0.0, theta.len()));
            continue;
        }
        let per = theta.len() / theta.shape()[0];
        for filter in theta.data().chunks(per) {
            let d: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
            let dn = libm::sqrt(d.iter().map(|v| v * v).sum::<f64>());
            let tn = libm::sqrt(filter.iter().map(|v| v * v).sum::<f64>());
            let s = if dn > 0.0 { tn / dn } else { 0.0 };
            values.extend(d.iter().map(|v| v * s));
        }
    }
    ParamVector { values }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub extent: f64,
    /// Step coefficients shared by both axes.
    pub coords: Vec<f64>,
    /// `losses[i * resolution + j]` is the loss at `θ + coords[i]·d₁ + coords[j]·d₂`.
    pub losses: Vec<f64>,
    pub center_loss: f64,
    pub saturated: usize,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.losses[c * self.resolution + c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.losses[i * self.resolution + j]);
            }
        }
        s
    }
}

/// Evaluates `loss` over the plane spanned by two directions around the
/// current weights, then restores them.
pub fn loss_landscape_grid<F>(
    bundle: &mut EncoderBundle,
    loss: F,
    dir1: &ParamVector,
    dir2: &ParamVector,
    extent: f64,
    resolution: usize,
) -> Result<LandscapeGrid>
where
    F: Fn(&EncoderBundle) -> Result<f64>,
{
    if resolution.is_multiple_of(2) {
        return Err(Error::Config(format!("landscape resolution {resolution} must be odd")));
    }
    let theta = bundle.parameter_vector();
    if dir1.len() != theta.len() || dir2.len() != theta.len() {
        return Err(shape_err!("directions of {} and {} for {} parameters", dir1.len(), dir2.len(), theta.len()));
    }
    let half = (resolution / 2) as i64;
    let coords: Vec<f64> = (0..resolution as i64).map(|i| if half == 0 { 0.0 } else { extent * (i - half) as f64 / half as f64 }).collect();
    let center_loss = loss(bundle)?;
    let mut losses = Vec::with_capacity(resolution * resolution);
    let mut saturated = 0;
    let mut probe = theta.clone();
    let scan = (|| -> Result<()> {
        for &a in &coords {
            for &b in &coords {
                if a == 0.0 && b == 0.0 {
                    bundle.load_parameter_vector(&theta)?;
                } else {
                    for (k, p) in probe.values.iter_mut().enumerate() {
                        *p = theta.values[k] + a * dir1.values[k] + b * dir2.values[k];
                    }
                    bundle.load_parameter_vector(&probe)?;
                }
                let l = loss(bundle)?;
                if l.is_finite() {
                    losses.push(l);
                } else {
                    saturated += 1;
                    losses.push(SATURATED_LOSS);
                }
            }
        }
        Ok(())
    })();
    bundle.load_parameter_vector(&theta)?;
    scan?;
    Ok(LandscapeGrid { resolution, extent, coords, losses, center_loss, saturated })
}

/// A frozen random linear classifier over encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    pub seed: u64,
}

impl LinearProbe {
    /// Uniform `±1/√D` initialization from a keyed seed.
    pub fn random(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, &[PROBE]);
        let bound = 1.0 / libm::sqrt(feature_dim.max(1) as f64);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::from_vec(&[classes, feature_dim], draw(classes * feature_dim)).expect("probe dims");
        let bias = Tensor::from_vec(&[classes], draw(classes)).expect("probe dims");
        Self { weight, bias, seed }
    }

    /// Mean cross-entropy of the probe on inference-mode backbone features.
    pub fn loss(&self, bundle: &EncoderBundle, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let f = bundle.features(inputs, FeatureSource::Backbone)?;
        let mut g = Graph::new();
        let fv = g.input(f);
        let w = g.input(self.weight.clone());
        let b = g.input(self.bias.clone());
        let logits = g.matmul(fv, w, false, true)?;
        let logits = g.add_bias(logits, b)?;
        let ce = g.cross_entropy(logits, labels)?;
        Ok(g.value(ce).item())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    First,
    Random { seed: u64 },
}

/// Min-max normalized channel activations tiled into one grayscale image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTiles {
    pub channels: Vec<usize>,
    pub tile_height: usize,
    pub tile_width: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows·tile_height × cols·tile_width` values in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl FeatureTiles {
    pub fn height(&self) -> usize {
        self.rows * self.tile_height
    }

    pub fn width(&self) -> usize {
        self.cols * self.tile_width
    }
}

/// Activations of `n_channels` channels after `block` for one image.
pub fn feature_map_export(
    bundle: &EncoderBundle,
    image: &Tensor,
    block: usize,
    n_channels: usize,
    selection: ChannelSelection,
) -> Result<FeatureTiles> {
    let input = match image.ndim() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(shape_err!("feature maps need one image, got {:?}", image.shape())),
    };
    let act = bundle.extract_block_features(&input, block)?;
    if act.ndim() != 4 {
        return Err(shape_err!("block {} has no spatial maps ({:?})", block, act.shape()));
    }
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    if n_channels == 0 || n_channels > c {
        return Err(Error::OutOfRange(format!("{n_channels} of {c} channels")));
    }
    let channels: Vec<usize> = match selection {
        ChannelSelection::First => (0..n_channels).collect(),
        ChannelSelection::Random { seed } => {
            let mut picked = sample(&mut keyed_rng(seed, &[PROBE, block as u64]), c, n_channels).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let cols = (1..=n_channels).find(|k| k * k >= n_channels).unwrap_or(1);
    let rows = n_channels.div_ceil(cols);
    let mut pixels = vec![0.0; rows * h * cols * w];
    for (t, &ch) in channels.iter().enumerate() {
        let plane = &act.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (r0, c0) = ((t / cols) * h, (t % cols) * w);
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                pixels[(r0 + y) * cols * w + c0 + x] = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            }
        }
    }
    Ok(FeatureTiles { channels, tile_height: h, tile_width: w, rows, cols, pixels })
}
