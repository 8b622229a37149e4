//! Model blocks and the two-stream core architecture.
//!
//! A [`ModelBlock`] runs its members side by side on one input and
//! concatenates their feature vectors in member order. The
//! [`CoreArchitecture`] feeds the GM input to one block and the WM input to
//! another, concatenates both, applies ReLU and a 2-way linear layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, ParamStore, Real, Snapshot, Tensor, Var};
use crate::volume::Label;
use crate::zoo::layers::Linear;
use crate::zoo::{adapt_input_layer, build_micro_model, MicroKind, MicroModel, MicroModelSpec};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchitecturePreset {
    One = 1,
    Two = 2,
    Three = 3,
}

impl ArchitecturePreset {
    pub const ALL: [ArchitecturePreset; 3] = [
        ArchitecturePreset::One,
        ArchitecturePreset::Two,
        ArchitecturePreset::Three,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(ArchitecturePreset::One),
            2 => Ok(ArchitecturePreset::Two),
            3 => Ok(ArchitecturePreset::Three),
            _ => Err(Error::Config(format!("architecture id must be 1, 2 or 3, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> String {
        format!("Architecture {}", self.id())
    }

    pub fn kinds(self) -> &'static [MicroKind] {
        use MicroKind::*;
        match self {
            ArchitecturePreset::One => &[DenseNet, ShuffleNet, SqueezeNet],
            ArchitecturePreset::Two => &[DenseNet, ShuffleNet, SqueezeNet, MobileNet],
            ArchitecturePreset::Three => &[ShuffleNet, Vgg, MobileNet],
        }
    }
}

/// Pretrained backbones keyed by kind, each with the tag it was saved under.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotStore {
    entries: BTreeMap<MicroKind, (String, Snapshot)>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        SnapshotStore::default()
    }

    pub fn insert(&mut self, kind: MicroKind, tag: impl Into<String>, snapshot: Snapshot) {
        self.entries.insert(kind, (tag.into(), snapshot));
    }

    pub fn get(&self, kind: MicroKind) -> Option<(&str, &Snapshot)> {
        self.entries.get(&kind).map(|(t, s)| (t.as_str(), s))
    }

    pub fn kinds(&self) -> Vec<MicroKind> {
        self.entries.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `<kind>.nvw` file per entry; the tag is the file stem.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (kind, (_, snap)) in &self.entries {
            snap.save(&dir.join(format!("{}.nvw", kind.name())))?;
        }
        Ok(())
    }

    /// Loads every `<kind>.nvw` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = SnapshotStore::new();
        for kind in MicroKind::ALL {
            let path = dir.join(format!("{}.nvw", kind.name()));
            if path.exists() {
                store.insert(kind, path.display().to_string(), Snapshot::load(&path)?);
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct ModelBlock<T: Real = f32> {
    members: Vec<MicroModel<T>>,
}

impl<T: Real> ModelBlock<T> {
    /// Heads of the members are dropped; the block exposes features only.
    pub fn new(mut members: Vec<MicroModel<T>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("a model block needs at least one member".into()));
        }
        for m in &mut members {
            m.drop_head();
        }
        Ok(ModelBlock { members })
    }

    pub fn members(&self) -> &[MicroModel<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [MicroModel<T>] {
        &mut self.members
    }

    pub fn combined_dim(&self) -> usize {
        self.members.iter().map(|m| m.feature_dim()).sum()
    }

    pub fn kinds(&self) -> Vec<MicroKind> {
        self.members.iter().map(|m| m.kind()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.members.iter().map(|m| m.backbone_param_count()).sum()
    }
}

/// Concatenated member features `[N, combined_dim]`, in member order.
pub fn block_forward<T: Real>(block: &mut ModelBlock<T>, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
    let mut feats = Vec::with_capacity(block.members.len());
    for (index, m) in block.members.iter_mut().enumerate() {
        let f = m.features(g, x, train).map_err(|e| Error::Member {
            index,
            kind: m.kind().name(),
            source: Box::new(e),
        })?;
        feats.push(f);
    }
    g.concat(&feats, 1)
}

#[derive(Clone, Debug)]
pub struct CoreArchitecture<T: Real = f32> {
    preset: ArchitecturePreset,
    in_channels: usize,
    pub gm_block: ModelBlock<T>,
    pub wm_block: ModelBlock<T>,
    pub head: ParamStore<T>,
    linear: Linear,
}

/// Builds both streams with independent parameters. With `pretrained`,
/// every member backbone starts from its kind's snapshot; the final linear
/// layer is always fresh.
pub fn build_preset<T: Real>(
    preset: ArchitecturePreset,
    pretrained: bool,
    seed: u64,
    in_channels: usize,
    snapshots: &SnapshotStore,
) -> Result<CoreArchitecture<T>> {
    let block = |stream: &str| -> Result<ModelBlock<T>> {
        let members = preset
            .kinds()
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let member_seed = seed::derive(seed, &[seed::label(stream), i as u64]);
                build_member(kind, in_channels, member_seed, pretrained.then_some(snapshots))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelBlock::new(members)
    };
    let gm_block = block("gm")?;
    let wm_block = block("wm")?;
    let mut head = ParamStore::new();
    let mut rng = seed::rng(seed, &[seed::label("core-head")]);
    let din = gm_block.combined_dim() + wm_block.combined_dim();
    let linear = Linear::new(&mut head, "fc", din, NUM_CLASSES, &mut rng);
    Ok(CoreArchitecture {
        preset,
        in_channels,
        gm_block,
        wm_block,
        head,
        linear,
    })
}

fn build_member<T: Real>(
    kind: MicroKind,
    in_channels: usize,
    seed: u64,
    snapshots: Option<&SnapshotStore>,
) -> Result<MicroModel<T>> {
    let Some(store) = snapshots else {
        return build_micro_model(&MicroModelSpec::default_for(kind, in_channels), seed);
    };
    let (tag, snap) = store.get(kind).ok_or_else(|| {
        Error::Config(format!("no pretrained snapshot for `{}`; run pretraining first", kind.name()))
    })?;
    let snap_channels = snap
        .get("stem.conv.weight")
        .map(|w| w.shape()[1])
        .ok_or_else(|| Error::Config(format!("snapshot for `{kind}` has no stem.conv.weight")))?;
    let mut model = build_micro_model(&MicroModelSpec::default_for(kind, snap_channels), seed)?;
    model.load_backbone(snap, tag)?;
    if snap_channels != in_channels {
        model = adapt_input_layer(model, in_channels)?;
    }
    Ok(model)
}

impl<T: Real> CoreArchitecture<T> {
    pub fn preset(&self) -> ArchitecturePreset {
        self.preset
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Trainable scalars in both blocks and the final layer.
    pub fn param_count(&self) -> usize {
        self.gm_block.param_count() + self.wm_block.param_count() + self.head.trainable_count()
    }

    pub fn head_weight(&self) -> usize {
        self.linear.weight
    }

    pub fn head_bias(&self) -> usize {
        self.linear.bias
    }

    /// Every parameter store, GM members, WM members, then the head.
    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v: Vec<&mut ParamStore<T>> = Vec::new();
        for m in self.gm_block.members.iter_mut().chain(self.wm_block.members.iter_mut()) {
            v.push(m.params_mut());
        }
        v.push(&mut self.head);
        v
    }

    pub fn pull_grads(&mut self, g: &Graph<T>) -> Result<()> {
        for s in self.stores_mut() {
            s.pull_grads(g)?;
        }
        Ok(())
    }

    /// Weights of both streams and the head, plus the preset id and input
    /// channel count as one-element metadata tensors.
    pub fn to_snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::new();
        let meta = |v: usize| Tensor::new(&[1], vec![v as f32]).unwrap();
        snap.push("meta.preset", meta(self.preset.id() as usize));
        snap.push("meta.in_channels", meta(self.in_channels));
        for (stream, block) in [("gm", &self.gm_block), ("wm", &self.wm_block)] {
            for (i, m) in block.members.iter().enumerate() {
                m.params().export(&format!("{stream}.{i}.{}.", m.kind()), &mut snap);
            }
        }
        self.head.export("head.", &mut snap);
        snap
    }

    /// Overwrites every tensor from a snapshot of the same preset.
    pub fn load_snapshot(&mut self, snap: &Snapshot) -> Result<()> {
        let (preset, in_channels) = snapshot_meta(snap)?;
        if preset != self.preset || in_channels != self.in_channels {
            return Err(Error::Config(format!(
                "snapshot holds {} with {in_channels} input channels, model is {} with {}",
                preset.name(),
                self.preset.name(),
                self.in_channels
            )));
        }
        for (stream, block) in [("gm", &mut self.gm_block), ("wm", &mut self.wm_block)] {
            for (i, m) in block.members.iter_mut().enumerate() {
                let prefix = format!("{stream}.{i}.{}.", m.kind());
                m.params_mut().import(&prefix, snap)?;
            }
        }
        self.head.import("head.", snap)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        let (preset, in_channels) = snapshot_meta(snap)?;
        let mut core = build_preset(preset, false, 0, in_channels, &SnapshotStore::new())?;
        core.load_snapshot(snap)?;
        Ok(core)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_snapshot().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_snapshot(&Snapshot::load(path)?)
    }

    /// Class probabilities' argmax per row of `gm`/`wm` `[N, k, H, W]`,
    /// with running normalization statistics.
    pub fn predict(&mut self, gm: &Tensor<T>, wm: &Tensor<T>) -> Result<Vec<Label>> {
        let mut g = Graph::new();
        let gm = g.leaf(gm.clone());
        let wm = g.leaf(wm.clone());
        let logits = core_forward(self, &mut g, gm, wm, false)?;
        Ok(predict_rows(g.value(logits)))
    }
}

fn snapshot_meta(snap: &Snapshot) -> Result<(ArchitecturePreset, usize)> {
    let read = |name: &str| {
        snap.get(name)
            .map(|t| t.data()[0] as usize)
            .ok_or_else(|| Error::Config(format!("snapshot lacks `{name}`")))
    };
    Ok((ArchitecturePreset::from_id(read("meta.preset")? as u8)?, read("meta.in_channels")?))
}

/// Logits `[N, 2]` from GM and WM inputs.
pub fn core_forward<T: Real>(core: &mut CoreArchitecture<T>, g: &mut Graph<T>, gm: Var, wm: Var, train: bool) -> Result<Var> {
    let stream = |name: &'static str| {
        move |e: Error| Error::Stream {
            stream: name,
            source: Box::new(e),
        }
    };
    for (name, x) in [("gm", gm), ("wm", wm)] {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != core.in_channels {
            return Err(stream(name)(Error::shape(
                "core_forward",
                format!("expected [N, {}, H, W], got {s:?}", core.in_channels),
            )));
        }
    }
    if g.shape(gm)[0] != g.shape(wm)[0] {
        return Err(Error::shape(
            "core_forward",
            format!("gm batch {:?} and wm batch {:?} differ", g.shape(gm), g.shape(wm)),
        ));
    }
    let fg = block_forward(&mut core.gm_block, g, gm, train).map_err(stream("gm"))?;
    let fw = block_forward(&mut core.wm_block, g, wm, train).map_err(stream("wm"))?;
    let both = g.concat(&[fg, fw], 1)?;
    let act = g.relu(both);
    core.head.bind(g);
    core.linear.forward(g, &core.head, act)
}

/// Argmax of one logit row; exact ties go to class 0.
pub fn predict<T: Real>(logits: &[T]) -> Label {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Label::from_index(best).expect("two-class logits")
}

/// [`predict`] on every row of flat `[N, 2]` logits.
pub fn predict_rows<T: Real>(logits: &[T]) -> Vec<Label> {
    logits.chunks(NUM_CLASSES).map(predict).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_and_shift() {
        assert_eq!(predict(&[2.0f32, -1.0]), Label::Pd);
        assert_eq!(predict(&[0.0f32, 0.0]), Label::Pd);
        assert_eq!(predict(&[0.0f32, 0.5]), Label::Hc);
        assert_eq!(predict(&[10.0f32, 10.5]), Label::Hc);
    }

    #[test]
    fn preset_members() {
        let counts: Vec<usize> = ArchitecturePreset::ALL.iter().map(|p| p.kinds().len()).collect();
        assert_eq!(counts, vec![3, 4, 3]);
        assert!(ArchitecturePreset::from_id(4).is_err());
    }

    #[test]
    fn missing_snapshot_names_the_kind() {
        let err = build_preset::<f32>(ArchitecturePreset::One, true, 0, 8, &SnapshotStore::new()).unwrap_err();
        assert!(err.to_string().contains("densenet"), "{err}");
    }

    #[test]
    fn zero_head_yields_bias() {
        let mut core = build_preset::<f32>(ArchitecturePreset::Three, false, 1, 2, &SnapshotStore::new()).unwrap();
        let w = core.head_weight();
        let b = core.head_bias();
        core.head.get_mut(w).data_mut().fill(0.0);
        core.head.get_mut(b).data_mut().copy_from_slice(&[0.25, -0.5]);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2, 8, 6], |i| (i % 7) as f32 / 7.0));
        let y = g.leaf(Tensor::from_fn(&[3, 2, 8, 6], |i| (i % 5) as f32 / 5.0));
        let out = core_forward(&mut core, &mut g, x, y, false).unwrap();
        assert_eq!(g.shape(out), &[3, 2]);
        assert_eq!(g.value(out), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn wrong_stream_shape_is_named() {
        let mut core = build_preset::<f32>(ArchitecturePreset::One, false, 1, 2, &SnapshotStore::new()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 8, 8]));
        let y = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        let err = core_forward(&mut core, &mut g, x, y, false).unwrap_err();
        assert!(matches!(err, Error::Stream { stream: "wm", .. }), "{err}");
    }
}
