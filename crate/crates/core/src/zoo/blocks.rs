//! The building block that defines each constituent network.

use super::layers::{downsample, BatchNorm, ConvBn, ConvCfg, Ctx};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{Graph, ParamStore, PoolKind, Real, Var};

/// BN → ReLU → 1×1 conv to `4·growth` → BN → ReLU → 3×3 conv to `growth`.
#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: ConvBn,
    bn2: BatchNorm,
    conv2: ConvBn,
}

/// Each layer sees the concatenation of the block input and every earlier
/// layer's output; the block emits all of them concatenated, so
/// `C + layers·growth` channels.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub growth: usize,
}

pub const DENSE_BOTTLENECK: usize = 4;

impl DenseBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if layers == 0 || growth == 0 {
            return Err(Error::Config(format!(
                "dense block needs at least one layer and positive growth, got L={layers}, g={growth}"
            )));
        }
        let inner = DENSE_BOTTLENECK * growth;
        let layers = (0..layers)
            .map(|i| {
                let cin = in_channels + i * growth;
                let p = format!("{name}.layer{i}");
                DenseLayer {
                    bn1: BatchNorm::new(store, &format!("{p}.norm1"), cin),
                    conv1: ConvBn::new(store, &format!("{p}.1"), cin, inner, ConvCfg::k1(), false, false, rng),
                    bn2: BatchNorm::new(store, &format!("{p}.norm2"), inner),
                    conv2: ConvBn::new(store, &format!("{p}.2"), inner, growth, ConvCfg::k3(), false, false, rng),
                }
            })
            .collect();
        Ok(DenseBlock {
            layers,
            in_channels,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = cx.g.concat(&features, 1)?;
            let mut y = layer.bn1.forward(cx, input)?;
            y = cx.g.relu(y);
            y = layer.conv1.forward(cx, y)?;
            y = layer.bn2.forward(cx, y)?;
            y = cx.g.relu(y);
            y = layer.conv2.forward(cx, y)?;
            features.push(y);
        }
        cx.g.concat(&features, 1)
    }
}

/// BN → ReLU → 1×1 conv halving channels → 2×2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    bn: BatchNorm,
    conv: ConvBn,
    pub out_channels: usize,
}

impl Transition {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, rng: &mut Rng) -> Self {
        let out_channels = (cin / 2).max(1);
        Transition {
            bn: BatchNorm::new(store, &format!("{name}.norm"), cin),
            conv: ConvBn::new(store, name, cin, out_channels, ConvCfg::k1(), false, false, rng),
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.g.relu(y);
        let y = self.conv.forward(cx, y)?;
        downsample(cx.g, y, PoolKind::Avg)
    }
}

/// 1×1 squeeze to `s` channels, then parallel 1×1 (`e1`) and padded 3×3
/// (`e3`) expands, concatenated. Every conv is followed by ReLU.
#[derive(Clone, Debug)]
pub struct Fire {
    squeeze: ConvBn,
    expand1: Option<ConvBn>,
    expand3: Option<ConvBn>,
}

impl Fire {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        squeeze: usize,
        expand1: usize,
        expand3: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if squeeze == 0 || expand1 + expand3 == 0 {
            return Err(Error::Config(format!(
                "fire module needs s ≥ 1 and e1 + e3 ≥ 1, got s={squeeze}, e1={expand1}, e3={expand3}"
            )));
        }
        Ok(Fire {
            squeeze: ConvBn::new(store, &format!("{name}.squeeze"), cin, squeeze, ConvCfg::k1().bias(), false, true, rng),
            expand1: (expand1 > 0).then(|| {
                ConvBn::new(store, &format!("{name}.expand1x1"), squeeze, expand1, ConvCfg::k1().bias(), false, true, rng)
            }),
            expand3: (expand3 > 0).then(|| {
                ConvBn::new(store, &format!("{name}.expand3x3"), squeeze, expand3, ConvCfg::k3().bias(), false, true, rng)
            }),
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = self.squeeze.forward(cx, x)?;
        let mut parts = Vec::with_capacity(2);
        for e in [&self.expand1, &self.expand3].into_iter().flatten() {
            parts.push(e.forward(cx, s)?);
        }
        cx.g.concat(&parts, 1)
    }
}

/// Channel order produced by a `groups`-way shuffle of `channels`
/// channels: output `q·groups + r` reads input `r·(channels/groups) + q`.
pub fn channel_shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "channel shuffle: {groups} groups do not divide {channels} channels"
        )));
    }
    let per_group = channels / groups;
    Ok((0..channels)
        .map(|c| (c % groups) * per_group + c / groups)
        .collect())
}

/// Reshape-transpose channel permutation across `groups` groups.
pub fn channel_shuffle<T: Real>(g: &mut Graph<T>, x: Var, groups: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let perm = channel_shuffle_permutation(c, groups)?;
    g.permute_channels(x, &perm)
}

/// Expand (1×1) → depthwise 3×3 → linear project (1×1), with an identity
/// skip iff stride is 1 and the channel count is unchanged.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl InvertedResidual {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        expand_ratio: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if expand_ratio == 0 || !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!(
                "inverted residual needs t ≥ 1 and stride 1 or 2, got t={expand_ratio}, s={stride}"
            )));
        }
        let hidden = cin * expand_ratio;
        let expand = (expand_ratio != 1).then(|| {
            ConvBn::new(store, &format!("{name}.expand"), cin, hidden, ConvCfg::k1(), true, true, rng)
        });
        let depthwise = ConvBn::new(
            store,
            &format!("{name}.dw"),
            hidden,
            hidden,
            ConvCfg::k3().stride(stride).groups(hidden),
            true,
            true,
            rng,
        );
        let project = ConvBn::new(store, &format!("{name}.project"), hidden, cout, ConvCfg::k1(), true, false, rng);
        Ok(InvertedResidual {
            expand,
            depthwise,
            project,
            in_channels: cin,
            out_channels: cout,
            stride,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(cx, y)?;
        }
        y = self.depthwise.forward(cx, y)?;
        y = self.project.forward(cx, y)?;
        if self.has_skip() {
            y = cx.g.add(y, x)?;
        }
        Ok(y)
    }
}

/// 1×1 → 3×3 → 1×1 bottleneck plus a skip that is the identity when the
/// shapes match and a strided 1×1 projection otherwise; ReLU after the sum.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    restore: ConvBn,
    projection: Option<ConvBn>,
}

impl Bottleneck {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if mid == 0 || cout == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "bottleneck needs positive widths and stride, got mid={mid}, out={cout}, s={stride}"
            )));
        }
        Ok(Bottleneck {
            reduce: ConvBn::new(store, &format!("{name}.reduce"), cin, mid, ConvCfg::k1(), true, true, rng),
            spatial: ConvBn::new(store, &format!("{name}.spatial"), mid, mid, ConvCfg::k3().stride(stride), true, true, rng),
            restore: ConvBn::new(store, &format!("{name}.restore"), mid, cout, ConvCfg::k1(), true, false, rng),
            projection: (stride != 1 || cin != cout).then(|| {
                ConvBn::new(store, &format!("{name}.downsample"), cin, cout, ConvCfg::k1().stride(stride), true, false, rng)
            }),
        })
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    /// Index of the last conv weight of the residual branch.
    pub fn branch_tail(&self) -> usize {
        self.restore.conv.weight
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.reduce.forward(cx, x)?;
        y = self.spatial.forward(cx, y)?;
        y = self.restore.forward(cx, y)?;
        let skip = match &self.projection {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        let sum = cx.g.add(y, skip)?;
        Ok(cx.g.relu(sum))
    }
}

/// ShuffleNet V2 unit. Stride 1 splits the channels, transforms one half
/// and re-joins; stride 2 transforms two copies of the full input. Both end
/// with a two-group channel shuffle.
#[derive(Clone, Debug)]
pub struct ShuffleUnit {
    shortcut: Option<(ConvBn, ConvBn)>,
    branch: (ConvBn, ConvBn, ConvBn),
    stride: usize,
    half: usize,
}

impl ShuffleUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cout % 2 != 0 || (stride == 1 && cin != cout) || !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!(
                "shuffle unit needs even output width and in == out at stride 1, got {cin}→{cout}, s={stride}"
            )));
        }
        let half = cout / 2;
        let branch_in = if stride == 1 { half } else { cin };
        let shortcut = (stride == 2).then(|| {
            (
                ConvBn::new(store, &format!("{name}.short.dw"), cin, cin, ConvCfg::k3().stride(2).groups(cin), true, false, rng),
                ConvBn::new(store, &format!("{name}.short.pw"), cin, half, ConvCfg::k1(), true, true, rng),
            )
        });
        let branch = (
            ConvBn::new(store, &format!("{name}.pw1"), branch_in, half, ConvCfg::k1(), true, true, rng),
            ConvBn::new(store, &format!("{name}.dw"), half, half, ConvCfg::k3().stride(stride).groups(half), true, false, rng),
            ConvBn::new(store, &format!("{name}.pw2"), half, half, ConvCfg::k1(), true, true, rng),
        );
        Ok(ShuffleUnit {
            shortcut,
            branch,
            stride,
            half,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (left, right) = if self.stride == 1 {
            (
                cx.g.narrow(x, 1, 0, self.half)?,
                cx.g.narrow(x, 1, self.half, self.half)?,
            )
        } else {
            let (dw, pw) = self.shortcut.as_ref().expect("stride-2 unit has a shortcut");
            let l = dw.forward(cx, x)?;
            (pw.forward(cx, l)?, x)
        };
        let mut r = self.branch.0.forward(cx, right)?;
        r = self.branch.1.forward(cx, r)?;
        r = self.branch.2.forward(cx, r)?;
        let joined = cx.g.concat(&[left, r], 1)?;
        channel_shuffle(cx.g, joined, 2)
    }
}
