//! Versioned checkpoint archive.
//!
//! Layout: the magic `UCLCKPT\0`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then every array listed in the header
//! as raw little-endian `f64` in header order. The header carries the
//! architecture config, so a checkpoint rebuilds its encoder on its own.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ucl_core::config::RunConfig;
use ucl_core::data::{Image, Normalization};
use ucl_core::eval::AccuracyMatrix;
use ucl_core::models::{ArchConfig, EncoderBundle};
use ucl_core::strategies::{BufferItem, DerTarget, Learner, Mixing, ReplayBuffer, SiState, StrategyState};
use ucl_core::Tensor;

use crate::error::{format_err, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"UCLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

/// Trial progress at the task boundary a checkpoint was taken at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub matrix: AccuracyMatrix,
    pub epoch_losses: Vec<Vec<f64>>,
    /// Tasks finished, including this one.
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BufferMeta {
    capacity: usize,
    seen: u64,
    task_ids: Vec<usize>,
    labels: Vec<Option<usize>>,
    image_shape: [usize; 3],
    target_shape: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
enum StrategyMeta {
    Finetune,
    Multitask,
    Si { c: f64, xi: f64 },
    Der { alpha: f64, target: DerTarget, buffer: BufferMeta },
    Lump { mixing: Mixing, buffer: BufferMeta },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch_config: ArchConfig,
    trial_seed: u64,
    task: usize,
    normalization: Normalization,
    strategy: StrategyMeta,
    progress: Progress,
    arrays: Vec<ArraySpec>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: EncoderBundle,
    pub trial_seed: u64,
    pub task: usize,
    pub normalization: Normalization,
    pub state: StrategyState,
    pub progress: Progress,
}

impl Checkpoint {
    /// A learner for `cfg` continuing from this checkpoint. The optimizer
    /// starts fresh, as it does at every task boundary.
    pub fn into_learner(self, cfg: &RunConfig) -> Result<Learner> {
        let mut learner =
            Learner::new(self.bundle, cfg.optimizer, cfg.objective(), &cfg.strategy, self.normalization, cfg.augment.clone())?;
        learner.state = self.state;
        Ok(learner)
    }
}

struct Arrays {
    specs: Vec<ArraySpec>,
    data: Vec<f64>,
}

impl Arrays {
    fn push(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.specs.push(ArraySpec { name: name.into(), shape: shape.to_vec() });
        self.data.extend_from_slice(values);
    }
}

fn buffer_meta(buf: &ReplayBuffer<BufferItem>, out: &mut Arrays) -> Result<BufferMeta> {
    let items = buf.items();
    let image_shape = items.first().map_or([0, 0, 0], |i| [i.image.channels, i.image.height, i.image.width]);
    let target_shape = items.first().and_then(|i| i.target.as_ref().map(|t| t.shape().to_vec()));
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for it in items {
        if [it.image.channels, it.image.height, it.image.width] != image_shape
            || it.target.as_ref().map(|t| t.shape().to_vec()) != target_shape
        {
            return Err(ucl_core::Error::Shape("buffer items of mixed shapes".into()).into());
        }
        images.extend_from_slice(&it.image.data);
        if let Some(t) = &it.target {
            targets.extend_from_slice(t.data());
        }
    }
    let n = items.len();
    out.push("buffer.images", &[n, image_shape[0], image_shape[1], image_shape[2]], &images);
    if let Some(ts) = &target_shape {
        let mut shape = vec![n];
        shape.extend_from_slice(ts);
        out.push("buffer.targets", &shape, &targets);
    }
    Ok(BufferMeta {
        capacity: buf.capacity(),
        seen: buf.seen_count(),
        task_ids: items.iter().map(|i| i.task_id).collect(),
        labels: items.iter().map(|i| i.label).collect(),
        image_shape,
        target_shape,
    })
}

/// Writes the learner at a task boundary. The file appears atomically.
pub fn save_checkpoint(path: &Path, learner: &Learner, trial_seed: u64, progress: &Progress) -> Result<()> {
    let mut arrays = Arrays { specs: Vec::new(), data: Vec::new() };
    for e in learner.bundle.store.entries() {
        arrays.push(e.name.clone(), e.value.shape(), e.value.data());
    }
    let strategy = match &learner.state {
        StrategyState::Finetune => StrategyMeta::Finetune,
        StrategyState::Multitask => StrategyMeta::Multitask,
        StrategyState::Si(si) => {
            for (name, v) in [("si.omega", &si.omega), ("si.star", &si.star), ("si.path", &si.path)] {
                arrays.push(name, &[v.len()], v);
            }
            StrategyMeta::Si { c: si.c, xi: si.xi }
        }
        StrategyState::Der { alpha, target, buffer } => {
            StrategyMeta::Der { alpha: *alpha, target: *target, buffer: buffer_meta(buffer, &mut arrays)? }
        }
        StrategyState::Lump { mixing, buffer } => StrategyMeta::Lump { mixing: *mixing, buffer: buffer_meta(buffer, &mut arrays)? },
    };
    let header = Header {
        arch_config: learner.bundle.config().clone(),
        trial_seed,
        task: progress.completed.saturating_sub(1),
        normalization: learner.norm.clone(),
        strategy,
        progress: progress.clone(),
        arrays: arrays.specs,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + 8 * arrays.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &arrays.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("ckpt.partial");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn take(arrays: &mut HashMap<String, Tensor>, path: &Path, name: &str) -> Result<Tensor> {
    arrays.remove(name).ok_or_else(|| format_err(path, format!("missing array `{name}`")))
}

fn restore_buffer(meta: BufferMeta, arrays: &mut HashMap<String, Tensor>, path: &Path) -> Result<ReplayBuffer<BufferItem>> {
    let n = meta.task_ids.len();
    let images = take(arrays, path, "buffer.images")?;
    let [c, h, w] = meta.image_shape;
    if images.shape() != [n, c, h, w] || meta.labels.len() != n {
        return Err(format_err(path, "buffer arrays disagree with the header"));
    }
    let targets = match &meta.target_shape {
        Some(_) => Some(take(arrays, path, "buffer.targets")?),
        None => None,
    };
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let target = match (&targets, &meta.target_shape) {
            (Some(t), Some(shape)) => Some(Tensor::from_vec(shape, t.row(i).to_vec())?),
            _ => None,
        };
        items.push(BufferItem {
            image: Image::new(c, h, w, images.row(i).to_vec())?,
            task_id: meta.task_ids[i],
            label: meta.labels[i],
            target,
        });
    }
    Ok(ReplayBuffer::from_parts(meta.capacity, items, meta.seen)?)
}

/// Reads a checkpoint, checking every stored array against the shapes the
/// architecture config implies.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut payload = &bytes[20 + hlen..];
    let mut arrays = HashMap::new();
    for spec in &header.arrays {
        let n: usize = spec.shape.iter().product();
        if payload.len() < 8 * n {
            return Err(format_err(path, format!("truncated array `{}`", spec.name)));
        }
        let values = payload[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        payload = &payload[8 * n..];
        arrays.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, values)?);
    }
    if !payload.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", payload.len())));
    }
    let mut bundle = EncoderBundle::new(&header.arch_config)?;
    let names: Vec<String> = bundle.store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let value = take(&mut arrays, path, &name)?;
        bundle.store.set_named(&name, value).map_err(|e| format_err(path, e.to_string()))?;
    }
    let state = match header.strategy {
        StrategyMeta::Finetune => StrategyState::Finetune,
        StrategyMeta::Multitask => StrategyState::Multitask,
        StrategyMeta::Si { c, xi } => {
            let mut si = SiState::new(c, xi, take(&mut arrays, path, "si.star")?.data())?;
            si.omega = take(&mut arrays, path, "si.omega")?.data().to_vec();
            si.path = take(&mut arrays, path, "si.path")?.data().to_vec();
            if si.omega.len() != si.star.len() || si.path.len() != si.star.len() || si.star.len() != bundle.store.trainable_count() {
                return Err(format_err(path, "SI arrays do not match the parameter count"));
            }
            StrategyState::Si(si)
        }
        StrategyMeta::Der { alpha, target, buffer } => {
            StrategyState::Der { alpha, target, buffer: restore_buffer(buffer, &mut arrays, path)? }
        }
        StrategyMeta::Lump { mixing, buffer } => StrategyState::Lump { mixing, buffer: restore_buffer(buffer, &mut arrays, path)? },
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(format_err(path, format!("unexpected array `{extra}`")));
    }
    Ok(Checkpoint {
        bundle,
        trial_seed: header.trial_seed,
        task: header.task,
        normalization: header.normalization,
        state,
        progress: header.progress,
    })
}
