use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    graph: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// How [`Graph::batchnorm2d`] obtains its statistics.
pub enum NormMode<'a, T> {
    /// Normalize by batch statistics and fold them into the running
    /// estimates with `running = (1 - momentum)·running + momentum·batch`.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalize by the running estimates.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn c_per_group(&self) -> usize {
        self.c / self.groups
    }

    fn f_per_group(&self) -> usize {
        self.f / self.groups
    }

    fn patch(&self) -> usize {
        self.c_per_group() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c && self.groups == self.f && self.groups > 1
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        // flat input offset of the routed element, per output element (max only)
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    PermuteChannels {
        input: Var,
        perm: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Nodes are appended in creation order, so reverse creation order is a
/// valid reverse topological order. Each [`Graph::backward`] call recomputes
/// every gradient from scratch: gradients are overwritten, never accumulated,
/// so calling it twice on the same graph yields identical results.
/// Gradients of intermediate nodes are released once propagated; only leaf
/// gradients (and the loss seed) remain readable.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], v: Var, len: usize) -> &'g mut [T] {
    grads[v.index].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(
            v.graph, self.id,
            "variable from graph {} used in graph {}",
            v.graph, self.id
        );
        &self.nodes[v.index]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var {
            index,
            graph: self.id,
        }
    }

    /// Adds a leaf. A leaf is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = self.node(v);
        Tensor::new(&node.shape, node.data.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).data[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` is
    /// a differentiated leaf (or the loss itself).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.graph, self.id, "variable from a different graph");
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    fn rank4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.node(v).shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected a rank-4 input, got {s:?}"))),
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_grouped(input, weight, bias, stride, padding, 1)
    }

    /// Grouped 2-D convolution. `weight` is `[F, C/groups, kH, kW]`;
    /// `groups == C == F` gives a depthwise convolution.
    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.rank4(OP, input)?;
        let wshape = self.node(weight).shape.clone();
        let [f, cg, kh, kw] = match *wshape.as_slice() {
            [f, cg, kh, kw] => [f, cg, kh, kw],
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("weight must be rank 4, got {wshape:?}"),
                ))
            }
        };
        let ishape = [n, c, h, w];
        if groups == 0 || c % groups != 0 || f % groups != 0 || cg * groups != c {
            return Err(Error::shape(
                OP,
                format!(
                    "weight {wshape:?} with {groups} group(s) does not match input {ishape:?} \
                     (weight channels × groups must equal input channels)"
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("kernel {kh}×{kw} exceeds padded input {ishape:?} with padding {padding}"),
            ));
        }
        if let Some(b) = bias {
            if self.node(b).shape != [f] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?} does not match {f} filters", self.node(b).shape),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let x = &self.node(input).data;
        let wt = &self.node(weight).data;
        let mut out = if geom.is_depthwise() {
            depthwise_forward(&geom, x, wt)
        } else {
            conv_forward(&geom, x, wt)
        };
        if let Some(b) = bias {
            let bd = &self.node(b).data;
            let p = geom.positions();
            for (chunk, idx) in out.chunks_mut(p).zip(0..) {
                let bv = bd[idx % f];
                chunk.iter_mut().for_each(|o| *o += bv);
            }
        }
        let tracked = self.node(input).tracked
            || self.node(weight).tracked
            || bias.is_some_and(|b| self.node(b).tracked);
        Ok(self.push(
            vec![n, f, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let [n, c, h, w] = self.rank4(OP, input)?;
        if window == 0 || stride == 0 {
            return Err(Error::shape(OP, "window and stride must be at least 1"));
        }
        if window > h || window > w {
            return Err(Error::shape(
                OP,
                format!("window {window} larger than input spatial dims {h}×{w}"),
            ));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = &self.node(input).data;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::one() / T::from_f64((window * window) as f64);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for i in 0..window {
                                for j in 0..window {
                                    let idx = base + (y0 + i) * w + x0 + j;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for i in 0..window {
                                let row = base + (y0 + i) * w + x0;
                                for &v in &x[row..row + window] {
                                    acc += v;
                                }
                            }
                            out.push(acc * inv);
                        }
                    }
                }
            }
        }
        let tracked = self.node(input).tracked;
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            Op::Pool {
                input,
                kind,
                window,
                stride,
                argmax,
            },
            tracked,
        ))
    }

    /// Mean over the spatial axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("global_avg_pool", input)?;
        let p = h * w;
        let inv = T::one() / T::from_f64(p as f64);
        let out: Vec<T> = self
            .node(input)
            .data
            .chunks(p)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let tracked = self.node(input).tracked;
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { input }, tracked))
    }

    /// Per-channel normalization over `N·H·W`, then `gamma·x̂ + beta`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let [n, c, h, w] = self.rank4(OP, input)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.node(v).shape != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} shape {:?} does not match {c} channels", self.node(v).shape),
                ));
            }
        }
        let p = h * w;
        let m = n * p;
        let x = &self.node(input).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); x.len()];
        let train = matches!(mode, NormMode::Train { .. });
        let mut means = vec![T::zero(); c];
        match mode {
            NormMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(OP, "running statistics do not match channels"));
                }
                let inv_m = T::one() / T::from_f64(m as f64);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * p;
                        sum += x[off..off + p].iter().copied().sum::<T>();
                    }
                    let mean = sum * inv_m;
                    let mut sq = T::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * p;
                        for &v in &x[off..off + p] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq * inv_m;
                    means[ch] = mean;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = if m > 1 {
                        sq / T::from_f64((m - 1) as f64)
                    } else {
                        var
                    };
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean;
                    running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * unbiased;
                }
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(OP, "running statistics do not match channels"));
                }
                for ch in 0..c {
                    means[ch] = running_mean[ch];
                    inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
                }
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * p;
                for i in off..off + p {
                    let xh = (x[i] - means[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let tracked =
            self.node(input).tracked || self.node(gamma).tracked || self.node(beta).tracked;
        Ok(self.push(
            vec![n, c, h, w],
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            tracked,
        ))
    }

    /// `out[n,k] = Σ_d input[n,d]·weight[k,d] + bias[k]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let ishape = self.node(input).shape.clone();
        let wshape = self.node(weight).shape.clone();
        let (n, d, k) = match (ishape.as_slice(), wshape.as_slice()) {
            (&[n, d], &[k, dw]) if d == dw => (n, d, k),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("input {ishape:?} is incompatible with weight {wshape:?}"),
                ))
            }
        };
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = bias {
            let bd = &self.node(b).data;
            if bd.len() != k || self.node(b).shape.len() != 1 {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?} does not match {k} outputs", self.node(b).shape),
                ));
            }
            for row in out.chunks_mut(k) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            d,
            k,
            &self.node(input).data,
            (d, 1),
            &self.node(weight).data,
            (1, d),
            &mut out,
            beta,
        );
        let tracked = self.node(input).tracked
            || self.node(weight).tracked
            || bias.is_some_and(|b| self.node(b).tracked);
        Ok(self.push(
            vec![n, k],
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let node = self.node(input);
        let out = node
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let (shape, tracked) = (node.shape.clone(), node.tracked);
        self.push(shape, out, Op::Relu { input }, tracked)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.node(lhs), self.node(rhs));
        if a.shape != b.shape {
            return Err(Error::shape(
                "add",
                format!("operands have shapes {:?} and {:?}", a.shape, b.shape),
            ));
        }
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
        let (shape, tracked) = (a.shape.clone(), a.tracked || b.tracked);
        Ok(self.push(shape, out, Op::Add { lhs, rhs }, tracked))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape(OP, "no inputs given"))?;
        let ref_shape = self.node(*first).shape.clone();
        if axis >= ref_shape.len() {
            return Err(Error::shape(
                OP,
                format!("axis {axis} out of range for rank {}", ref_shape.len()),
            ));
        }
        let mut total = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let s = &self.node(v).shape;
            let agrees = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(Error::shape(
                    OP,
                    format!(
                        "input {i} has shape {s:?}, incompatible with input 0 shape {ref_shape:?} \
                         along axes other than {axis}"
                    ),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&ref_shape[..axis]);
        let inner = numel(&ref_shape[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let node = self.node(v);
                let chunk = node.shape[axis] * inner;
                out.extend_from_slice(&node.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let tracked = inputs.iter().any(|&v| self.node(v).tracked);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("cannot take [{start}, {}) along axis {axis} of {s:?}", start + len),
            ));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let x = &self.node(input).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.node(input).tracked;
        Ok(self.push(shape, out, Op::Narrow { input, axis, start }, tracked))
    }

    /// Output channel `c` takes input channel `perm[c]` (axis 1).
    pub fn permute_channels(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() < 2 || perm.len() != s[1] {
            return Err(Error::shape(
                "permute_channels",
                format!("permutation of length {} for shape {s:?}", perm.len()),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("{perm:?} is not a permutation")));
            }
        }
        let c = s[1];
        let inner = numel(&s[2..]);
        let x = &self.node(input).data;
        let mut out = Vec::with_capacity(x.len());
        for sample in 0..s[0] {
            for &src in perm {
                let base = (sample * c + src) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let tracked = self.node(input).tracked;
        Ok(self.push(
            s,
            out,
            Op::PermuteChannels {
                input,
                perm: perm.to_vec(),
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let node = self.node(input);
        if numel(shape) != node.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", node.shape),
            ));
        }
        let (data, tracked) = (node.data.clone(), node.tracked);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { input }, tracked))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let node = self.node(input);
        let total = node.data.iter().copied().sum::<T>();
        let tracked = node.tracked;
        self.push(vec![1], vec![total], Op::Sum { input }, tracked)
    }

    /// `Σ_i weights[i]·input[i]`, a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let node = self.node(input);
        if weights.len() != node.data.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), node.data.len()),
            ));
        }
        let total = node
            .data
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum::<T>();
        let tracked = node.tracked;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.node(logits).shape.clone();
        let (n, k) = match *s.as_slice() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits must be [N, K], got {s:?}"),
                ))
            }
        };
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("target {t} at row {i} is not below class count {k}"),
            });
        }
        let z = &self.node(logits).data;
        let probs = softmax_rows(z, k);
        let mut total = T::zero();
        for (row, &t) in z.chunks(k).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / T::from_f64(n as f64);
        let tracked = self.node(logits).tracked;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Overwrites all gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.graph != self.id {
            return Err(Error::Contract(
                "backward called with a variable from another graph".into(),
            ));
        }
        let len = self.nodes[loss.index].data.len();
        if len != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.index].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) || i == loss.index {
                grads[i] = Some(gy);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = &self.nodes[input.index].data;
                let wt = &self.nodes[weight.index].data;
                if let Some(b) = bias.filter(|&b| self.tracked(b)) {
                    let db = accumulate(grads, b, geom.f);
                    let p = geom.positions();
                    for (chunk, idx) in gy.chunks(p).zip(0..) {
                        db[idx % geom.f] += chunk.iter().copied().sum::<T>();
                    }
                }
                let want_x = self.tracked(*input);
                let want_w = self.tracked(*weight);
                if geom.is_depthwise() {
                    if want_w {
                        let dw = accumulate(grads, *weight, wt.len());
                        depthwise_backward_weight(geom, x, gy, dw);
                    }
                    if want_x {
                        let dx = accumulate(grads, *input, x.len());
                        depthwise_backward_input(geom, wt, gy, dx);
                    }
                } else {
                    let (dw, dx) = conv_backward(geom, x, wt, gy, want_w, want_x);
                    if let Some(dw) = dw {
                        add_into(accumulate(grads, *weight, wt.len()), &dw);
                    }
                    if let Some(dx) = dx {
                        add_into(accumulate(grads, *input, x.len()), &dx);
                    }
                }
            }
            Op::Pool {
                input,
                kind,
                window,
                stride,
                argmax,
            } => {
                let ishape = &self.nodes[input.index].shape;
                let (h, w) = (ishape[2], ishape[3]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let dx = accumulate(grads, *input, numel(ishape));
                match kind {
                    PoolKind::Max => {
                        for (&g, &src) in gy.iter().zip(argmax) {
                            dx[src] += g;
                        }
                    }
                    PoolKind::Avg => {
                        let inv = T::one() / T::from_f64((window * window) as f64);
                        for (plane, gplane) in gy.chunks(ho * wo).enumerate() {
                            let base = plane * h * w;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = gplane[oy * wo + ox] * inv;
                                    for i in 0..*window {
                                        let row = base + (oy * stride + i) * w + ox * stride;
                                        dx[row..row + window].iter_mut().for_each(|d| *d += g);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let ishape = &self.nodes[input.index].shape;
                let p = ishape[2] * ishape[3];
                let inv = T::one() / T::from_f64(p as f64);
                let dx = accumulate(grads, *input, numel(ishape));
                for (plane, &g) in dx.chunks_mut(p).zip(gy) {
                    let g = g * inv;
                    plane.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = &node.shape;
                let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                let g = &self.nodes[gamma.index].data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for smp in 0..n {
                    for ch in 0..c {
                        let off = (smp * c + ch) * p;
                        for i in off..off + p {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.tracked(*input) {
                    let dx = accumulate(grads, *input, gy.len());
                    let m = T::from_f64((n * p) as f64);
                    for smp in 0..n {
                        for ch in 0..c {
                            let off = (smp * c + ch) * p;
                            let scale = g[ch] * inv_std[ch];
                            for i in off..off + p {
                                dx[i] += if *train {
                                    // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                                    scale * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]) / m
                                } else {
                                    scale * gy[i]
                                };
                            }
                        }
                    }
                }
                if self.tracked(*gamma) {
                    add_into(accumulate(grads, *gamma, c), &dgamma);
                }
                if self.tracked(*beta) {
                    add_into(accumulate(grads, *beta, c), &dbeta);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ishape = &self.nodes[input.index].shape;
                let (n, d) = (ishape[0], ishape[1]);
                let k = node.shape[1];
                if self.tracked(*input) {
                    let w = &self.nodes[weight.index].data;
                    let dx = accumulate(grads, *input, n * d);
                    T::gemm(n, k, d, gy, (k, 1), w, (d, 1), dx, T::one());
                }
                if self.tracked(*weight) {
                    let x = &self.nodes[input.index].data;
                    let dw = accumulate(grads, *weight, k * d);
                    T::gemm(k, n, d, gy, (1, k), x, (d, 1), dw, T::one());
                }
                if let Some(b) = bias.filter(|&b| self.tracked(b)) {
                    let db = accumulate(grads, b, k);
                    for row in gy.chunks(k) {
                        add_into(db, row);
                    }
                }
            }
            Op::Relu { input } => {
                let x = &self.nodes[input.index].data;
                let dx = accumulate(grads, *input, x.len());
                for ((d, &g), &v) in dx.iter_mut().zip(gy).zip(x) {
                    if v > T::zero() {
                        *d += g;
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [lhs, rhs] {
                    if self.tracked(*v) {
                        add_into(accumulate(grads, *v, gy.len()), gy);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let s = &self.nodes[v.index].shape;
                    let chunk = s[*axis] * inner;
                    if self.tracked(*v) {
                        let dx = accumulate(grads, *v, numel(s));
                        for o in 0..outer {
                            let src = &gy[o * total + offset..o * total + offset + chunk];
                            add_into(&mut dx[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = &self.nodes[input.index].shape;
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = node.shape[*axis];
                let dx = accumulate(grads, *input, numel(s));
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    add_into(
                        &mut dx[base..base + len * inner],
                        &gy[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::PermuteChannels { input, perm } => {
                let c = node.shape[1];
                let inner = numel(&node.shape[2..]);
                let dx = accumulate(grads, *input, gy.len());
                for sample in 0..node.shape[0] {
                    for (dst, &src) in perm.iter().enumerate() {
                        let from = (sample * c + dst) * inner;
                        let to = (sample * c + src) * inner;
                        add_into(&mut dx[to..to + inner], &gy[from..from + inner]);
                    }
                }
            }
            Op::Reshape { input } => {
                add_into(accumulate(grads, *input, gy.len()), gy);
            }
            Op::Sum { input } => {
                let len = self.nodes[input.index].data.len();
                let g = gy[0];
                accumulate(grads, *input, len)
                    .iter_mut()
                    .for_each(|d| *d += g);
            }
            Op::WeightedSum { input, weights } => {
                let g = gy[0];
                let dx = accumulate(grads, *input, weights.len());
                for (d, &w) in dx.iter_mut().zip(weights) {
                    *d += g * w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = gy[0] / T::from_f64(n as f64);
                let dz = accumulate(grads, *logits, probs.len());
                for (row, (&t, prow)) in targets.iter().zip(probs.chunks(k)).enumerate() {
                    for (j, &p) in prow.iter().enumerate() {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dz[row * k + j] += (p - onehot) * scale;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax of a row-major `[N, k]` block, max-shifted for stability.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// Lays out group `g`'s receptive fields as a `[patch, N·positions]` matrix.
fn im2col<T: Real>(geom: &ConvGeom, x: &[T], group: usize, cols: &mut [T]) {
    let cg = geom.c_per_group();
    let p = geom.positions();
    let np = geom.n * p;
    let (h, w) = (geom.h as isize, geom.w as isize);
    let pad = geom.pad as isize;
    for cl in 0..cg {
        let ch = group * cg + cl;
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let row = (cl * geom.kh + i) * geom.kw + j;
                let dst = &mut cols[row * np..(row + 1) * np];
                for s in 0..geom.n {
                    let plane = &x[(s * geom.c + ch) * geom.h * geom.w..][..geom.h * geom.w];
                    for oy in 0..geom.ho {
                        let iy = (oy * geom.stride) as isize - pad + i as isize;
                        let out_row = &mut dst[s * p + oy * geom.wo..][..geom.wo];
                        if iy < 0 || iy >= h {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * geom.w..][..geom.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * geom.stride) as isize - pad + j as isize;
                            *v = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(geom: &ConvGeom, cols: &[T], group: usize, dx: &mut [T]) {
    let cg = geom.c_per_group();
    let p = geom.positions();
    let np = geom.n * p;
    let (h, w) = (geom.h as isize, geom.w as isize);
    let pad = geom.pad as isize;
    for cl in 0..cg {
        let ch = group * cg + cl;
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let row = (cl * geom.kh + i) * geom.kw + j;
                let src = &cols[row * np..(row + 1) * np];
                for s in 0..geom.n {
                    let plane_off = (s * geom.c + ch) * geom.h * geom.w;
                    for oy in 0..geom.ho {
                        let iy = (oy * geom.stride) as isize - pad + i as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row_off = plane_off + iy as usize * geom.w;
                        for ox in 0..geom.wo {
                            let ix = (ox * geom.stride) as isize - pad + j as isize;
                            if ix >= 0 && ix < w {
                                dx[row_off + ix as usize] += src[s * p + oy * geom.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(geom: &ConvGeom, x: &[T], wt: &[T]) -> Vec<T> {
    let (fg, k, p) = (geom.f_per_group(), geom.patch(), geom.positions());
    let np = geom.n * p;
    let mut out = vec![T::zero(); geom.n * geom.f * p];
    let mut cols = vec![T::zero(); k * np];
    let mut res = vec![T::zero(); fg * np];
    for group in 0..geom.groups {
        im2col(geom, x, group, &mut cols);
        let wg = &wt[group * fg * k..(group + 1) * fg * k];
        T::gemm(fg, k, np, wg, (k, 1), &cols, (np, 1), &mut res, T::zero());
        for fl in 0..fg {
            let f = group * fg + fl;
            for s in 0..geom.n {
                out[(s * geom.f + f) * p..][..p].copy_from_slice(&res[fl * np + s * p..][..p]);
            }
        }
    }
    out
}

fn conv_backward<T: Real>(
    geom: &ConvGeom,
    x: &[T],
    wt: &[T],
    gy: &[T],
    want_w: bool,
    want_x: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (fg, k, p) = (geom.f_per_group(), geom.patch(), geom.positions());
    let np = geom.n * p;
    let mut dw = want_w.then(|| vec![T::zero(); wt.len()]);
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); k * np];
    let mut gyg = vec![T::zero(); fg * np];
    for group in 0..geom.groups {
        for fl in 0..fg {
            let f = group * fg + fl;
            for s in 0..geom.n {
                gyg[fl * np + s * p..][..p].copy_from_slice(&gy[(s * geom.f + f) * p..][..p]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(geom, x, group, &mut cols);
            let dwg = &mut dw[group * fg * k..(group + 1) * fg * k];
            T::gemm(fg, np, k, &gyg, (np, 1), &cols, (1, np), dwg, T::zero());
        }
        if let Some(dx) = dx.as_mut() {
            let wg = &wt[group * fg * k..(group + 1) * fg * k];
            T::gemm(k, fg, np, wg, (1, k), &gyg, (np, 1), &mut cols, T::zero());
            col2im(geom, &cols, group, dx);
        }
    }
    (dw, dx)
}

fn depthwise_forward<T: Real>(geom: &ConvGeom, x: &[T], wt: &[T]) -> Vec<T> {
    let (h, w, ho, wo) = (geom.h, geom.w, geom.ho, geom.wo);
    let pad = geom.pad as isize;
    let mut out = vec![T::zero(); geom.n * geom.c * ho * wo];
    for s in 0..geom.n {
        for ch in 0..geom.c {
            let plane = &x[(s * geom.c + ch) * h * w..][..h * w];
            let kern = &wt[ch * geom.kh * geom.kw..][..geom.kh * geom.kw];
            let dst = &mut out[(s * geom.c + ch) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for i in 0..geom.kh {
                        let iy = (oy * geom.stride) as isize - pad + i as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..geom.kw {
                            let ix = (ox * geom.stride) as isize - pad + j as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += kern[i * geom.kw + j] * plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_backward_weight<T: Real>(geom: &ConvGeom, x: &[T], gy: &[T], dw: &mut [T]) {
    let (h, w, ho, wo) = (geom.h, geom.w, geom.ho, geom.wo);
    let pad = geom.pad as isize;
    for s in 0..geom.n {
        for ch in 0..geom.c {
            let plane = &x[(s * geom.c + ch) * h * w..][..h * w];
            let g = &gy[(s * geom.c + ch) * ho * wo..][..ho * wo];
            let kern = &mut dw[ch * geom.kh * geom.kw..][..geom.kh * geom.kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    for i in 0..geom.kh {
                        let iy = (oy * geom.stride) as isize - pad + i as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..geom.kw {
                            let ix = (ox * geom.stride) as isize - pad + j as isize;
                            if ix >= 0 && ix < w as isize {
                                kern[i * geom.kw + j] += go * plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_input<T: Real>(geom: &ConvGeom, wt: &[T], gy: &[T], dx: &mut [T]) {
    let (h, w, ho, wo) = (geom.h, geom.w, geom.ho, geom.wo);
    let pad = geom.pad as isize;
    for s in 0..geom.n {
        for ch in 0..geom.c {
            let plane = &mut dx[(s * geom.c + ch) * h * w..][..h * w];
            let g = &gy[(s * geom.c + ch) * ho * wo..][..ho * wo];
            let kern = &wt[ch * geom.kh * geom.kw..][..geom.kh * geom.kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    for i in 0..geom.kh {
                        let iy = (oy * geom.stride) as isize - pad + i as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..geom.kw {
                            let ix = (ox * geom.stride) as isize - pad + j as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += go * kern[i * geom.kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn conv_all_ones_sums_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn conv_centered_delta_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.leaf(Tensor::new(&[1, 1, 4, 5], data.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.leaf(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[3, 3, 3, 3]));
        let msg = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[3, 3, 3, 3]") && msg.contains("[1, 2, 4, 4]"), "{msg}");
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 7, 6]));
        let w = g.leaf(Tensor::zeros(&[4, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 3]);
        let w5 = g.leaf(Tensor::zeros(&[1, 1, 10, 3]));
        assert!(g.conv2d(x, w5, None, 1, 1).is_err());
    }

    #[test]
    fn pooling_small_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
        let a = g.pool2d(x, PoolKind::Avg, 2, 2).unwrap();
        assert_eq!(g.value(m), &[4.0]);
        assert_eq!(g.value(a), &[2.5]);
        assert!(g.pool2d(x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first_occurrence() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let m = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let eye = g.leaf(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = g.leaf(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let zw = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.value(y), &[0.5, -1.5, 0.5, -1.5]);
        let bad = g.leaf(Tensor::zeros(&[2, 4]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn concat_shapes_and_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full(&[1, 3], 1.0));
        let b = g.leaf(Tensor::full(&[1, 5], 2.0));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 8]);
        let single = g.concat(&[a], 1).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let bad = g.leaf(Tensor::full(&[2, 5], 2.0));
        let msg = g.concat(&[a, b, bad], 1).unwrap_err().to_string();
        assert!(msg.contains("input 2"), "{msg}");
    }

    #[test]
    fn concat_preserves_order() {
        let mut g = Graph::<f32>::new();
        let parts: Vec<Var> = (0..3)
            .map(|i| g.leaf(Tensor::from_fn(&[1, 4], |j| (i * 4 + j) as f32)))
            .collect();
        let c = g.concat(&parts, 1).unwrap();
        let expected: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(g.value(c), expected.as_slice());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new(&[1, 2], vec![0.3, 0.3]).unwrap());
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let z = g.leaf(Tensor::new(&[1, 2], vec![30.0, -30.0]).unwrap());
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-9);

        // -ln(1/(1+e))
        let z = g.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, &[1]).unwrap();
        let oracle = -(1.0 / (1.0 + std::f64::consts::E)).ln();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);
        assert!((g.scalar(l) - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::zeros(&[2, 2]));
        let err = g.cross_entropy(z, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn cross_entropy_huge_logits_stay_finite() {
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::new(&[1, 2], vec![1000.0, -1000.0]).unwrap());
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!((g.scalar(l) - 2000.0).abs() < 1e-2);
    }

    #[test]
    fn backward_sum_gives_ones_and_detached_param_zero() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        // p is not reachable from the loss
        assert!(g.grad(p).map_or(true, |gp| gp.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[3]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_yields_identical_grads() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.1).collect());
        let w = leaf(&mut g, &[2, 1, 2, 2], vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.2, 0.6, -0.1]);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let y = g.relu(y);
        let l = g.sum(y);
        g.backward(l).unwrap();
        let first = (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec());
        g.backward(l).unwrap();
        assert_eq!(first.0, g.grad(x).unwrap());
        assert_eq!(first.1, g.grad(w).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = [3.0f64, -1.0, 0.5, 100.0, 99.0, -50.0];
        let p = softmax_rows(&z, 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_rejects_non_permutation() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(g.permute_channels(x, &[0, 0, 1]).is_err());
        assert!(g.permute_channels(x, &[0, 1]).is_err());
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f32).sin()));
        let gamma = g.leaf(Tensor::zeros(&[2]));
        let beta = g.leaf(Tensor::new(&[2], vec![0.7, -0.3]).unwrap());
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = g
            .batchnorm2d(
                x,
                gamma,
                beta,
                NormMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: 0.1,
                },
                1e-5,
            )
            .unwrap();
        for (i, &v) in g.value(y).iter().enumerate() {
            let expected = if (i / 4) % 2 == 0 { 0.7 } else { -0.3 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 3.0).with_grad());
        let gamma = g.leaf(Tensor::full(&[1], 1.0).with_grad());
        let beta = g.leaf(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = g
            .batchnorm2d(
                x,
                gamma,
                beta,
                NormMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: 0.1,
                },
                1e-5,
            )
            .unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
        assert!((rm[0] - 0.3).abs() < 1e-6);
        assert!((rv[0] - 0.9).abs() < 1e-6);
    }
}
