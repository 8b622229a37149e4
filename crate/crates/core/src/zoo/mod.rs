//! Micro-scale versions of six ImageNet-challenge networks.
//!
//! Each keeps the block that defines its family (bottleneck residuals, fire
//! modules, dense connectivity, stacked 3×3 convolutions, inverted
//! residuals, channel shuffling) at a width and depth that trains on a CPU.
//! Every model is `stem → trunk → neck → global average pool`, giving a
//! `[N, feature_dim]` feature vector, plus an optional linear classifier
//! head on top of the features.

pub mod blocks;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use blocks::{Bottleneck, DenseBlock, Fire, InvertedResidual, ShuffleUnit, Transition};
use layers::{downsample, BatchNorm, ConvBn, ConvCfg, Ctx, Linear};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, ParamStore, PoolKind, Real, Snapshot, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MicroKind {
    ResNet,
    SqueezeNet,
    DenseNet,
    Vgg,
    MobileNet,
    ShuffleNet,
}

impl MicroKind {
    pub const ALL: [MicroKind; 6] = [
        MicroKind::ResNet,
        MicroKind::SqueezeNet,
        MicroKind::DenseNet,
        MicroKind::Vgg,
        MicroKind::MobileNet,
        MicroKind::ShuffleNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MicroKind::ResNet => "resnet",
            MicroKind::SqueezeNet => "squeezenet",
            MicroKind::DenseNet => "densenet",
            MicroKind::Vgg => "vgg",
            MicroKind::MobileNet => "mobilenet",
            MicroKind::ShuffleNet => "shufflenet",
        }
    }

    /// The full-size network this micro model stands in for.
    pub fn full_name(self) -> &'static str {
        match self {
            MicroKind::ResNet => "ResNet 101",
            MicroKind::SqueezeNet => "SqueezeNet 1.1",
            MicroKind::DenseNet => "DenseNet 201",
            MicroKind::Vgg => "VGG 19",
            MicroKind::MobileNet => "MobileNet V2",
            MicroKind::ShuffleNet => "ShuffleNet V2",
        }
    }
}

impl fmt::Display for MicroKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MicroKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MicroKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model kind `{s}`; expected one of resnet, squeezenet, densenet, vgg, mobilenet, shufflenet"
                ))
            })
    }
}

pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const IMAGENET_CLASSES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct MicroModelSpec {
    pub kind: MicroKind,
    pub in_channels: usize,
    pub width_scale: f64,
    /// Blocks per stage; every stage after the first halves the resolution.
    pub depth: Vec<usize>,
    pub feature_dim: usize,
}

impl MicroModelSpec {
    /// Desk-scale defaults, each between 10k and 100k parameters.
    pub fn default_for(kind: MicroKind, in_channels: usize) -> Self {
        let (width_scale, depth) = match kind {
            MicroKind::ResNet => (0.25, vec![2, 2]),
            MicroKind::SqueezeNet => (0.5, vec![2, 2]),
            MicroKind::DenseNet => (0.25, vec![3, 3]),
            MicroKind::Vgg => (0.25, vec![2, 2]),
            MicroKind::MobileNet => (0.5, vec![2, 2]),
            MicroKind::ShuffleNet => (0.5, vec![2, 2]),
        };
        MicroModelSpec {
            kind,
            in_channels,
            width_scale,
            depth,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.depth.is_empty() || self.depth.contains(&0) {
            return Err(Error::Config(format!(
                "depth needs at least one stage and every stage at least one block, got {:?}",
                self.depth
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// `base` channels scaled by `width_scale`, at least 1.
    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Like [`MicroModelSpec::width`] but rounded to an even count ≥ 2.
    pub fn even_width(&self, base: usize) -> usize {
        2 * ((base as f64 * self.width_scale / 2.0).round() as usize).max(1)
    }
}

#[derive(Clone, Debug)]
enum Trunk {
    ResNet(Vec<Vec<Bottleneck>>),
    SqueezeNet(Vec<Vec<Fire>>),
    DenseNet {
        blocks: Vec<DenseBlock>,
        transitions: Vec<Transition>,
        norm: BatchNorm,
    },
    Vgg(Vec<Vec<ConvBn>>),
    MobileNet(Vec<Vec<InvertedResidual>>),
    ShuffleNet(Vec<Vec<ShuffleUnit>>),
}

/// Classifier on top of the pooled features.
#[derive(Clone, Debug)]
pub struct Head<T: Real = f32> {
    pub store: ParamStore<T>,
    linear: Linear,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct MicroModel<T: Real = f32> {
    spec: MicroModelSpec,
    seed: u64,
    params: ParamStore<T>,
    stem: ConvBn,
    trunk: Trunk,
    neck: ConvBn,
    head: Option<Head<T>>,
    pretrained_tag: Option<String>,
}

/// Builds a freshly initialized model with an ImageNet-shaped head.
/// Initialization is a pure function of `(spec, seed)`.
pub fn build_micro_model<T: Real>(spec: &MicroModelSpec, seed: u64) -> Result<MicroModel<T>> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[seed::label(spec.kind.name())]);
    let rng = &mut rng;
    let mut st = ParamStore::new();
    let s = &mut st;
    let cin = spec.in_channels;
    let (stem, trunk, trunk_out) = match spec.kind {
        MicroKind::ResNet => {
            let c0 = spec.width(64);
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3(), true, true, rng);
            let mut c = c0;
            let mut stages = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let mid = spec.width(64 << i);
                let out = 4 * mid;
                let mut blocks = Vec::new();
                for b in 0..n {
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    blocks.push(Bottleneck::new(s, &format!("layer{i}.{b}"), c, mid, out, stride, rng)?);
                    c = out;
                }
                stages.push(blocks);
            }
            (stem, Trunk::ResNet(stages), c)
        }
        MicroKind::SqueezeNet => {
            let c0 = spec.width(64);
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3().bias(), false, true, rng);
            let mut c = c0;
            let mut stages = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let sq = spec.width(16 * (i + 1));
                let ex = spec.width(64 * (i + 1));
                let mut fires = Vec::new();
                for b in 0..n {
                    fires.push(Fire::new(s, &format!("fire{i}.{b}"), c, sq, ex, ex, rng)?);
                    c = 2 * ex;
                }
                stages.push(fires);
            }
            (stem, Trunk::SqueezeNet(stages), c)
        }
        MicroKind::DenseNet => {
            let growth = spec.width(32);
            let c0 = 2 * growth;
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3(), true, true, rng);
            let mut c = c0;
            let mut blocks = Vec::new();
            let mut transitions = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let block = DenseBlock::new(s, &format!("block{i}"), c, n, growth, rng)?;
                c = block.out_channels();
                blocks.push(block);
                if i + 1 < spec.depth.len() {
                    let t = Transition::new(s, &format!("transition{i}"), c, rng);
                    c = t.out_channels;
                    transitions.push(t);
                }
            }
            let norm = BatchNorm::new(s, "final_norm", c);
            (
                stem,
                Trunk::DenseNet {
                    blocks,
                    transitions,
                    norm,
                },
                c,
            )
        }
        MicroKind::Vgg => {
            let c0 = spec.width(64);
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3().bias(), false, true, rng);
            let mut c = c0;
            let mut stages = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let out = spec.width(64 << i);
                // the stem is the first conv of stage 0
                let skip = usize::from(i == 0);
                let convs = (skip..n)
                    .map(|b| {
                        let conv = ConvBn::new(s, &format!("conv{i}.{b}"), c, out, ConvCfg::k3().bias(), false, true, rng);
                        c = out;
                        conv
                    })
                    .collect();
                stages.push(convs);
            }
            (stem, Trunk::Vgg(stages), c)
        }
        MicroKind::MobileNet => {
            let c0 = spec.width(32);
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3(), true, true, rng);
            let mut c = c0;
            let mut stages = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let out = spec.width(32 << i);
                let mut blocks = Vec::new();
                for b in 0..n {
                    let stride = if b == 0 { 2 } else { 1 };
                    blocks.push(InvertedResidual::new(s, &format!("ir{i}.{b}"), c, MOBILENET_EXPANSION, out, stride, rng)?);
                    c = out;
                }
                stages.push(blocks);
            }
            (stem, Trunk::MobileNet(stages), c)
        }
        MicroKind::ShuffleNet => {
            let c0 = spec.width(24);
            let stem = ConvBn::new(s, "stem", cin, c0, ConvCfg::k3(), true, true, rng);
            let mut c = c0;
            let mut stages = Vec::new();
            for (i, &n) in spec.depth.iter().enumerate() {
                let out = spec.even_width(128 << i);
                let mut units = Vec::new();
                for b in 0..n {
                    let stride = if b == 0 { 2 } else { 1 };
                    units.push(ShuffleUnit::new(s, &format!("stage{i}.{b}"), c, out, stride, rng)?);
                    c = out;
                }
                stages.push(units);
            }
            (stem, Trunk::ShuffleNet(stages), c)
        }
    };
    let neck = ConvBn::new(s, "neck", trunk_out, spec.feature_dim, ConvCfg::k1().bias(), false, true, rng);
    let mut model = MicroModel {
        spec: spec.clone(),
        seed,
        params: st,
        stem,
        trunk,
        neck,
        head: None,
        pretrained_tag: None,
    };
    model.set_head(IMAGENET_CLASSES);
    Ok(model)
}

pub const MOBILENET_EXPANSION: usize = 6;

/// Rebuilds the first convolution for `in_channels` inputs with fresh
/// weights, even when the count is unchanged. Nothing else is touched.
pub fn adapt_input_layer<T: Real>(mut model: MicroModel<T>, in_channels: usize) -> Result<MicroModel<T>> {
    if in_channels == 0 {
        return Err(Error::Config("in_channels must be at least 1".into()));
    }
    let mut rng = seed::rng(model.seed, &[seed::label("adapt-input"), in_channels as u64]);
    model.stem.conv.reinit(&mut model.params, in_channels, &mut rng);
    model.spec.in_channels = in_channels;
    Ok(model)
}

/// Replaces the classifier head with a fresh `feature_dim → num_classes`
/// linear layer. The backbone is untouched.
pub fn adapt_output_layer<T: Real>(mut model: MicroModel<T>, num_classes: usize) -> Result<MicroModel<T>> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "a classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    model.set_head(num_classes);
    Ok(model)
}

impl<T: Real> MicroModel<T> {
    fn set_head(&mut self, num_classes: usize) {
        let mut rng = seed::rng(self.seed, &[seed::label("head"), num_classes as u64]);
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "fc", self.spec.feature_dim, num_classes, &mut rng);
        self.head = Some(Head {
            store,
            linear,
            num_classes,
        });
    }

    pub fn spec(&self) -> &MicroModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> MicroKind {
        self.spec.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn pretrained_tag(&self) -> Option<&str> {
        self.pretrained_tag.as_deref()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn head(&self) -> Option<&Head<T>> {
        self.head.as_ref()
    }

    pub fn head_mut(&mut self) -> Option<&mut Head<T>> {
        self.head.as_mut()
    }

    /// Removes the classifier; the model then only exposes features.
    pub fn drop_head(&mut self) {
        self.head = None;
    }

    /// Index of the first convolution's weight in [`MicroModel::params`].
    pub fn stem_weight(&self) -> usize {
        self.stem.conv.weight
    }

    /// Trainable scalars in stem, trunk and neck.
    pub fn backbone_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.store.trainable_count())
    }

    /// Stores to optimize, backbone first.
    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = vec![&mut self.params];
        if let Some(h) = self.head.as_mut() {
            v.push(&mut h.store);
        }
        v
    }

    /// Pooled features `[N, feature_dim]`. Binds the backbone into `g`.
    pub fn features(&mut self, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "micro model",
                format!(
                    "{} expects [N, {}, H, W] input, got {shape:?}",
                    self.spec.kind, self.spec.in_channels
                ),
            ));
        }
        self.params.bind(g);
        let mut cx = Ctx {
            g,
            store: &mut self.params,
            train,
        };
        let cx = &mut cx;
        let mut y = self.stem.forward(cx, x)?;
        match &self.trunk {
            Trunk::ResNet(stages) => {
                y = downsample(cx.g, y, PoolKind::Max)?;
                for block in stages.iter().flatten() {
                    y = block.forward(cx, y)?;
                }
            }
            Trunk::SqueezeNet(stages) => {
                for fires in stages {
                    y = downsample(cx.g, y, PoolKind::Max)?;
                    for f in fires {
                        y = f.forward(cx, y)?;
                    }
                }
            }
            Trunk::DenseNet {
                blocks,
                transitions,
                norm,
            } => {
                y = downsample(cx.g, y, PoolKind::Max)?;
                for (i, block) in blocks.iter().enumerate() {
                    y = block.forward(cx, y)?;
                    if let Some(t) = transitions.get(i) {
                        y = t.forward(cx, y)?;
                    }
                }
                y = norm.forward(cx, y)?;
                y = cx.g.relu(y);
            }
            Trunk::Vgg(stages) => {
                for convs in stages {
                    for c in convs {
                        y = c.forward(cx, y)?;
                    }
                    y = downsample(cx.g, y, PoolKind::Max)?;
                }
            }
            Trunk::MobileNet(stages) => {
                for block in stages.iter().flatten() {
                    y = block.forward(cx, y)?;
                }
            }
            Trunk::ShuffleNet(stages) => {
                y = downsample(cx.g, y, PoolKind::Max)?;
                for unit in stages.iter().flatten() {
                    y = unit.forward(cx, y)?;
                }
            }
        }
        y = self.neck.forward(cx, y)?;
        cx.g.global_avg_pool(y)
    }

    /// Class scores through the head. Binds backbone and head into `g`.
    pub fn logits(&mut self, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
        let f = self.features(g, x, train)?;
        let head = self
            .head
            .as_mut()
            .ok_or_else(|| Error::Config(format!("{} has no classifier head", self.spec.kind)))?;
        head.store.bind(g);
        head.linear.forward(g, &head.store, f)
    }

    /// Moves gradients of the last backward pass into every bound store.
    pub fn pull_grads(&mut self, g: &Graph<T>) -> Result<()> {
        self.params.pull_grads(g)?;
        if let Some(h) = self.head.as_mut() {
            // the head is only bound when logits() ran
            let _ = h.store.pull_grads(g);
        }
        Ok(())
    }

    /// Backbone tensors (including normalization statistics).
    pub fn backbone_snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::new();
        self.params.export("", &mut snap);
        snap
    }

    /// Loads backbone tensors and records where they came from.
    pub fn load_backbone(&mut self, snapshot: &Snapshot, tag: impl Into<String>) -> Result<()> {
        self.params.import("", snapshot)?;
        self.pretrained_tag = Some(tag.into());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn kind_parsing() {
        assert_eq!("DenseNet".parse::<MicroKind>().unwrap(), MicroKind::DenseNet);
        let err = "alexnet".parse::<MicroKind>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn defaults_are_desk_scale() {
        for kind in MicroKind::ALL {
            let m = build_micro_model::<f32>(&MicroModelSpec::default_for(kind, 8), 0).unwrap();
            let n = m.backbone_param_count();
            assert!((10_000..=100_000).contains(&n), "{kind}: {n} parameters");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = MicroModelSpec::default_for(MicroKind::Vgg, 8);
        spec.depth = vec![];
        assert!(build_micro_model::<f32>(&spec, 0).is_err());
        spec.depth = vec![2];
        spec.feature_dim = 0;
        assert!(build_micro_model::<f32>(&spec, 0).is_err());
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let mut m = build_micro_model::<f32>(&MicroModelSpec::default_for(MicroKind::Vgg, 8), 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(m.features(&mut g, x, false), Err(Error::Shape { .. })));
    }
}
