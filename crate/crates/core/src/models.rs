//! Encoder bundle: backbone, projection head, prediction head and an optional
//! task-conditioned classifier, all sharing one [`ParamStore`].

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Conv2d, Linear};
use crate::params::{ParamStore, ParamVector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// CIFAR-style ResNet-18: 3×3 stem, no max-pool, four stages of two basic
    /// blocks with widths `w, 2w, 4w, 8w`.
    Resnet18 { base_width: usize },
    /// Four 3×3 conv/BN/ReLU layers, the last three with stride 2.
    TinyConv { width: usize },
    /// Two fully connected layers over the flattened image.
    Mlp { hidden: usize, out: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out: usize,
    /// Non-affine normalization after the last linear layer.
    pub final_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub backbone: BackboneConfig,
    pub input_channels: usize,
    pub input_size: usize,
    pub projector: ProjectorConfig,
    pub predictor: Option<PredictorConfig>,
    pub classifier: Option<ClassifierConfig>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::Resnet18 { base_width: 64 },
            input_channels: 3,
            input_size: 32,
            projector: ProjectorConfig { layers: 3, hidden: 2048, out: 2048, final_norm: true },
            predictor: Some(PredictorConfig { hidden: 512 }),
            classifier: None,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            BackboneConfig::Resnet18 { base_width } => 8 * base_width,
            BackboneConfig::TinyConv { width } => 8 * width,
            BackboneConfig::Mlp { out, .. } => out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        match self.backbone {
            BackboneConfig::Resnet18 { base_width } => {
                if !matches!(self.input_size, 32 | 64) {
                    return bad(format!("resnet18 expects 32 or 64 pixel inputs, got {}", self.input_size));
                }
                if base_width == 0 {
                    return bad("resnet18 base_width must be positive".into());
                }
            }
            BackboneConfig::TinyConv { width } => {
                if self.input_size < 8 || width == 0 {
                    return bad(format!("tiny_conv needs input >= 8 and width > 0, got {}/{}", self.input_size, width));
                }
            }
            BackboneConfig::Mlp { hidden, out } => {
                if hidden == 0 || out == 0 {
                    return bad("mlp dims must be positive".into());
                }
            }
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return bad("input dims must be positive".into());
        }
        if self.projector.layers == 0 || self.projector.out == 0 || self.projector.hidden == 0 {
            return bad("projector dims must be positive".into());
        }
        if let Some(p) = &self.predictor {
            if p.hidden == 0 {
                return bad("predictor hidden dim must be positive".into());
            }
        }
        if let Some(c) = &self.classifier {
            if c.num_tasks == 0 || c.classes_per_task == 0 {
                return bad("classifier needs tasks and classes".into());
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("invalid normalization settings".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let t = mode.train();
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h, t)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h, t)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s, t)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvUnit {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.bn.forward(g, h, mode.train())?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Resnet { stem: ConvUnit, stages: Vec<Vec<BasicBlock>> },
    Tiny { layers: Vec<ConvUnit> },
    Mlp { fc1: Linear, fc2: Linear },
}

#[derive(Clone, Debug)]
struct HeadLayer {
    linear: Linear,
    norm: Option<BatchNorm>,
    relu: bool,
}

#[derive(Clone, Debug)]
struct Head {
    layers: Vec<HeadLayer>,
}

impl Head {
    fn forward(&self, g: &mut Graph, mut x: Var, mode: Mode) -> Result<Var> {
        for l in &self.layers {
            x = l.linear.forward(g, x)?;
            if let Some(n) = &l.norm {
                x = n.forward(g, x, mode.train())?;
            }
            if l.relu {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Classifier {
    linear: Linear,
    num_tasks: usize,
    classes_per_task: usize,
}

/// Which representation an evaluation probe reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Backbone,
    Projector,
}

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    config: ArchConfig,
    pub store: ParamStore,
    backbone: Backbone,
    projector: Head,
    predictor: Option<Head>,
    classifier: Option<Classifier>,
}

impl EncoderBundle {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let (mom, eps) = (config.bn_momentum, config.bn_eps);
        let unit = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin, cout, stride| ConvUnit {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, true, mom, eps),
        };
        let backbone = match config.backbone {
            BackboneConfig::Resnet18 { base_width: w } => {
                let stem = unit(&mut store, &mut rng, "backbone.stem", config.input_channels, w, 1);
                let mut stages = Vec::new();
                let mut cin = w;
                for (s, mult) in [1usize, 2, 4, 8].iter().enumerate() {
                    let cout = w * mult;
                    let mut blocks = Vec::new();
                    for b in 0..2 {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        let name = format!("backbone.layer{}.{}", s + 1, b);
                        let conv1 = Conv2d::new(&mut store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, &mut rng);
                        let bn1 = BatchNorm::new(&mut store, &format!("{name}.bn1"), cout, true, mom, eps);
                        let conv2 = Conv2d::new(&mut store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, &mut rng);
                        let bn2 = BatchNorm::new(&mut store, &format!("{name}.bn2"), cout, true, mom, eps);
                        let shortcut = (stride != 1 || cin != cout).then(|| {
                            (
                                Conv2d::new(&mut store, &format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, &mut rng),
                                BatchNorm::new(&mut store, &format!("{name}.shortcut.bn"), cout, true, mom, eps),
                            )
                        });
                        blocks.push(BasicBlock { conv1, bn1, conv2, bn2, shortcut });
                        cin = cout;
                    }
                    stages.push(blocks);
                }
                Backbone::Resnet { stem, stages }
            }
            BackboneConfig::TinyConv { width: w } => {
                let chans = [config.input_channels, w, 2 * w, 4 * w, 8 * w];
                let layers = (0..4)
                    .map(|i| {
                        let stride = if i == 0 { 1 } else { 2 };
                        unit(&mut store, &mut rng, &format!("backbone.layer{}", i + 1), chans[i], chans[i + 1], stride)
                    })
                    .collect();
                Backbone::Tiny { layers }
            }
            BackboneConfig::Mlp { hidden, out } => {
                let d_in = config.input_channels * config.input_size * config.input_size;
                Backbone::Mlp {
                    fc1: Linear::new(&mut store, "backbone.fc1", d_in, hidden, true, &mut rng),
                    fc2: Linear::new(&mut store, "backbone.fc2", hidden, out, true, &mut rng),
                }
            }
        };
        let feat = config.feature_dim();
        let pc = &config.projector;
        let mut layers = Vec::new();
        for i in 0..pc.layers {
            let last = i + 1 == pc.layers;
            let din = if i == 0 { feat } else { pc.hidden };
            let dout = if last { pc.out } else { pc.hidden };
            let name = format!("projector.{i}");
            let linear = Linear::new(&mut store, &name, din, dout, false, &mut rng);
            let norm = if last {
                pc.final_norm.then(|| BatchNorm::new(&mut store, &format!("{name}.bn"), dout, false, mom, eps))
            } else {
                Some(BatchNorm::new(&mut store, &format!("{name}.bn"), dout, true, mom, eps))
            };
            layers.push(HeadLayer { linear, norm, relu: !last });
        }
        let projector = Head { layers };
        let predictor = config.predictor.as_ref().map(|p| Head {
            layers: alloc::vec![
                HeadLayer {
                    linear: Linear::new(&mut store, "predictor.0", pc.out, p.hidden, false, &mut rng),
                    norm: Some(BatchNorm::new(&mut store, "predictor.0.bn", p.hidden, true, mom, eps)),
                    relu: true,
                },
                HeadLayer { linear: Linear::new(&mut store, "predictor.1", p.hidden, pc.out, true, &mut rng), norm: None, relu: false },
            ],
        });
        let classifier = config.classifier.as_ref().map(|c| Classifier {
            linear: Linear::new(&mut store, "classifier", feat, c.num_tasks * c.classes_per_task, true, &mut rng),
            num_tasks: c.num_tasks,
            classes_per_task: c.classes_per_task,
        });
        Ok(Self { config: config.clone(), store, backbone, projector, predictor, classifier })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.projector.out
    }

    pub fn num_blocks(&self) -> usize {
        match &self.backbone {
            Backbone::Resnet { stages, .. } => stages.len(),
            Backbone::Tiny { layers } => layers.len(),
            Backbone::Mlp { .. } => 2,
        }
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.input_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(crate::error::shape_err!(
                "expected [N, {}, {}, {}] input, got {:?}",
                c.input_channels,
                c.input_size,
                c.input_size,
                s
            ));
        }
        Ok(())
    }

    /// Runs the backbone, returning the per-block activations (up to and
    /// including `last_block`, or all) and the pooled feature vector when the
    /// full backbone ran.
    pub fn backbone_taps(&self, g: &mut Graph, x: Var, mode: Mode, last_block: Option<usize>) -> Result<(Vec<Var>, Option<Var>)> {
        self.check_input(g, x)?;
        let nb = self.num_blocks();
        let stop = last_block.unwrap_or(nb - 1);
        if stop >= nb {
            return Err(Error::OutOfRange(format!("block {stop} of {nb}")));
        }
        let mut taps = Vec::new();
        match &self.backbone {
            Backbone::Resnet { stem, stages } => {
                let mut h = stem.forward(g, x, mode)?;
                for stage in stages.iter().take(stop + 1) {
                    for block in stage {
                        h = block.forward(g, h, mode)?;
                    }
                    taps.push(h);
                }
            }
            Backbone::Tiny { layers } => {
                let mut h = x;
                for l in layers.iter().take(stop + 1) {
                    h = l.forward(g, h, mode)?;
                    taps.push(h);
                }
            }
            Backbone::Mlp { fc1, fc2 } => {
                let n = g.shape(x)[0];
                let flat = g.reshape(x, &[n, self.config.input_channels * self.config.input_size * self.config.input_size])?;
                let h = fc1.forward(g, flat)?;
                let h = g.relu(h);
                taps.push(h);
                if stop >= 1 {
                    let h = fc2.forward(g, h)?;
                    let h = g.relu(h);
                    taps.push(h);
                }
            }
        }
        if stop + 1 < nb {
            return Ok((taps, None));
        }
        let last = *taps.last().expect("at least one block");
        let feat = if g.shape(last).len() == 4 { g.global_avg_pool(last)? } else { last };
        Ok((taps, Some(feat)))
    }

    /// Backbone features `f_Θ(x) ∈ ℝ^D`.
    pub fn backbone(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let (_, feat) = self.backbone_taps(g, x, mode, None)?;
        Ok(feat.expect("full backbone"))
    }

    pub fn project(&self, g: &mut Graph, features: Var, mode: Mode) -> Result<Var> {
        self.projector.forward(g, features, mode)
    }

    /// Prediction head `h(z)`; identity when the bundle has none.
    pub fn predict(&self, g: &mut Graph, z: Var, mode: Mode) -> Result<Var> {
        match &self.predictor {
            Some(p) => p.forward(g, z, mode),
            None => Ok(z),
        }
    }

    /// Logits restricted to `task_id`'s slice of the shared output layer.
    pub fn classify(&self, g: &mut Graph, features: Var, task_id: usize) -> Result<Var> {
        let c = self.classifier.as_ref().ok_or(Error::NoClassifier)?;
        if task_id >= c.num_tasks {
            return Err(Error::OutOfRange(format!("task {task_id} of {}", c.num_tasks)));
        }
        let full = c.linear.forward(g, features)?;
        g.slice_cols(full, task_id * c.classes_per_task, c.classes_per_task)
    }

    /// Full-width logits over every task's outputs.
    pub fn classify_all(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let c = self.classifier.as_ref().ok_or(Error::NoClassifier)?;
        c.linear.forward(g, features)
    }

    pub fn classes_per_task(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.classes_per_task)
    }

    /// Inference-mode features for a batch.
    pub fn features(&self, batch: &Tensor, source: FeatureSource) -> Result<Tensor> {
        let mut g = self.graph();
        let x = g.input(batch.clone());
        let f = self.backbone(&mut g, x, Mode::Eval)?;
        let out = match source {
            FeatureSource::Backbone => f,
            FeatureSource::Projector => self.project(&mut g, f, Mode::Eval)?,
        };
        Ok(g.value(out).clone())
    }

    /// Inference-mode activations after residual block `block`.
    pub fn extract_block_features(&self, batch: &Tensor, block: usize) -> Result<Tensor> {
        let nb = self.num_blocks();
        if block >= nb {
            return Err(Error::OutOfRange(format!("block {block} of {nb}")));
        }
        let mut g = self.graph();
        let x = g.input(batch.clone());
        let (taps, _) = self.backbone_taps(&mut g, x, Mode::Eval, Some(block))?;
        Ok(g.value(taps[block]).clone())
    }

    pub fn parameter_vector(&self) -> ParamVector {
        self.store.to_vector()
    }

    pub fn load_parameter_vector(&mut self, v: &ParamVector) -> Result<()> {
        self.store.load_vector(v)
    }

    /// Applies queued running-statistics updates from a training pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(crate::params::ParamId, Tensor)>) {
        for (id, t) in updates {
            *self.store.get_mut(id) = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::seeded_tensor;

    fn tiny() -> ArchConfig {
        ArchConfig {
            backbone: BackboneConfig::TinyConv { width: 4 },
            input_size: 16,
            projector: ProjectorConfig { layers: 2, hidden: 16, out: 8, final_norm: true },
            predictor: Some(PredictorConfig { hidden: 4 }),
            classifier: Some(ClassifierConfig { num_tasks: 3, classes_per_task: 2 }),
            ..ArchConfig::default()
        }
    }

    #[test]
    fn resnet_shapes_and_taps() {
        let b = EncoderBundle::new(&ArchConfig::default()).unwrap();
        let x = seeded_tensor(&[1, 3, 32, 32], 1);
        assert_eq!(b.extract_block_features(&x, 0).unwrap().shape(), &[1, 64, 32, 32]);
        assert_eq!(b.extract_block_features(&x, 1).unwrap().shape(), &[1, 128, 16, 16]);
        assert_eq!(b.extract_block_features(&x, 3).unwrap().shape(), &[1, 512, 4, 4]);
        assert!(b.extract_block_features(&x, 4).is_err());
    }

    #[test]
    fn heads_share_embedding_width() {
        let b = EncoderBundle::new(&tiny()).unwrap();
        let x = seeded_tensor(&[4, 3, 16, 16], 2);
        let mut g = b.graph();
        let xv = g.input(x);
        let f = b.backbone(&mut g, xv, Mode::Train).unwrap();
        let z = b.project(&mut g, f, Mode::Train).unwrap();
        let p = b.predict(&mut g, z, Mode::Train).unwrap();
        assert_eq!(g.shape(f), &[4, 32]);
        assert_eq!(g.shape(z), g.shape(p));
    }

    #[test]
    fn classify_slices_per_task() {
        let b = EncoderBundle::new(&tiny()).unwrap();
        let mut g = b.graph();
        let f = g.input(seeded_tensor(&[2, 32], 3));
        let l0 = b.classify(&mut g, f, 0).unwrap();
        let l2 = b.classify(&mut g, f, 2).unwrap();
        assert_eq!(g.shape(l0), &[2, 2]);
        assert_ne!(g.value(l0), g.value(l2));
        assert!(matches!(b.classify(&mut g, f, 3), Err(Error::OutOfRange(_))));

        let mut cfg = tiny();
        cfg.classifier = None;
        let nb = EncoderBundle::new(&cfg).unwrap();
        let mut g = nb.graph();
        let f = g.input(seeded_tensor(&[2, 32], 3));
        assert_eq!(nb.classify(&mut g, f, 0).unwrap_err(), Error::NoClassifier);
    }

    #[test]
    fn invalid_dims_rejected() {
        let cfg = ArchConfig { input_size: 48, ..ArchConfig::default() };
        assert!(matches!(EncoderBundle::new(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.projector.out = 0;
        assert!(EncoderBundle::new(&cfg).is_err());
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let b = EncoderBundle::new(&tiny()).unwrap();
        let x = seeded_tensor(&[1, 3, 32, 32], 4);
        assert!(b.features(&x, FeatureSource::Backbone).is_err());
    }
}
