//! Image sets, split task streams, augmentation and the synthetic corpus.

mod augment;
mod resize;
mod stream;
mod synthetic;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use augment::{supervised_augment, two_view_augment, AugConfig, SupervisedAugConfig, ViewPair};
pub use resize::resize_bilinear;
pub use stream::{build_split_stream, SplitSpec, TaskSpec, TaskStream};
pub use synthetic::{synthetic_blobs, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    TinyImagenet,
    Synthetic,
    Mnist,
    FashionMnist,
    Svhn,
}

impl DatasetId {
    pub const ALL: [DatasetId; 7] = [
        DatasetId::Cifar10,
        DatasetId::Cifar100,
        DatasetId::TinyImagenet,
        DatasetId::Synthetic,
        DatasetId::Mnist,
        DatasetId::FashionMnist,
        DatasetId::Svhn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::TinyImagenet => "tiny_imagenet",
            DatasetId::Synthetic => "synthetic",
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fmnist",
            DatasetId::Svhn => "svhn",
        }
    }

    /// Size of the class universe; `None` when it is configurable.
    pub fn num_classes(self) -> Option<usize> {
        match self {
            DatasetId::Cifar10 | DatasetId::Mnist | DatasetId::FashionMnist | DatasetId::Svhn => Some(10),
            DatasetId::Cifar100 => Some(100),
            DatasetId::TinyImagenet => Some(200),
            DatasetId::Synthetic => None,
        }
    }

    /// Channel statistics used for input normalization.
    pub fn normalization(self) -> Option<Normalization> {
        let n = |m: [f64; 3], s: [f64; 3]| Some(Normalization { mean: m.to_vec(), std: s.to_vec() });
        match self {
            DatasetId::Cifar10 => n([0.4914, 0.4822, 0.4465], [0.2023, 0.1994, 0.2010]),
            DatasetId::Cifar100 => n([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762]),
            DatasetId::TinyImagenet => n([0.4802, 0.4481, 0.3975], [0.2302, 0.2265, 0.2262]),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "fashion_mnist" => return Ok(DatasetId::FashionMnist),
            "tinyimagenet" => return Ok(DatasetId::TinyImagenet),
            _ => {}
        }
        DatasetId::ALL.into_iter().find(|d| d.name() == key).ok_or_else(|| Error::UnknownDataset(String::from(s)))
    }
}

/// A single image, CHW, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!("{}x{}x{} image with {} values", channels, height, width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.data[c * s..(c + 1) * s]
    }
}

/// Labeled images stored as 8-bit CHW pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl ImageSet {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(shape_err!("{} labels but {} pixels for {}x{}x{} images", labels.len(), pixels.len(), channels, height, width));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::OutOfRange(alloc::format!("label {bad} with {num_classes} classes")));
        }
        Ok(Self { channels, height, width, pixels, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn image(&self, i: usize) -> Image {
        let data = self.raw(i).iter().map(|&p| p as f64 / 255.0).collect();
        Image { channels: self.channels, height: self.height, width: self.width, data }
    }

    pub fn subset(&self, ids: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(ids.len() * self.image_size());
        for &i in ids {
            pixels.extend_from_slice(self.raw(i));
        }
        ImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Converts to `channels` channels (replicating grayscale) at
    /// `size × size` with bilinear resampling.
    pub fn conform(&self, channels: usize, size: usize) -> Result<ImageSet> {
        if self.channels == channels && self.height == size && self.width == size {
            return Ok(self.clone());
        }
        if self.channels != channels && self.channels != 1 {
            return Err(shape_err!("cannot map {} channels onto {}", self.channels, channels));
        }
        let mut pixels = Vec::with_capacity(self.len() * channels * size * size);
        for i in 0..self.len() {
            let img = resize_bilinear(&self.image(i), size, size);
            for c in 0..channels {
                let src = img.plane(if self.channels == 1 { 0 } else { c });
                pixels.extend(src.iter().map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8));
            }
        }
        ImageSet::new(channels, size, size, pixels, self.labels.clone(), self.num_classes)
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Global channel statistics over a whole set.
    pub fn from_images(set: &ImageSet) -> Self {
        let c = set.channels;
        let s = set.height * set.width;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..set.len() {
            let raw = set.raw(i);
            for ch in 0..c {
                for &p in &raw[ch * s..(ch + 1) * s] {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (set.len() * s).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| libm::sqrt((q / n - m * m).max(0.0)).max(1e-3)).collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Normalized `[C, H, W]` tensor.
    pub fn apply(&self, img: &Image) -> Tensor {
        let s = img.height * img.width;
        let mut data = img.data.clone();
        for c in 0..img.channels {
            let (m, sd) = (self.mean[c % self.mean.len()], self.std[c % self.std.len()]);
            for v in &mut data[c * s..(c + 1) * s] {
                *v = (*v - m) / sd;
            }
        }
        Tensor::from_vec(&[img.channels, img.height, img.width], data).expect("image dims")
    }

    /// Normalized un-augmented batch `[N, C, H, W]` of the given examples.
    pub fn batch(&self, set: &ImageSet, ids: &[usize]) -> Tensor {
        let per = set.image_size();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            data.extend_from_slice(self.apply(&set.image(i)).data());
        }
        Tensor::from_vec(&[ids.len(), set.channels, set.height, set.width], data).expect("batch dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRole {
    InStreamTest,
    Ood,
}

/// A labeled evaluation corpus with its own train split for the KNN bank.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub dataset: DatasetId,
    pub train: ImageSet,
    pub test: ImageSet,
    pub role: EvalRole,
}
