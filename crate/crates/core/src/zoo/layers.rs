//! Parameterized layers. Each layer holds indices into the owning model's
//! [`ParamStore`]; the store is bound to the graph before a forward pass.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::seed::Rng;
use crate::tensor::{Graph, NormMode, ParamStore, PoolKind, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: the graph, the model's bound parameters, and
/// whether batch statistics (train) or running statistics (eval) are used.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub train: bool,
}

impl<T: Real> Ctx<'_, T> {
    pub fn var(&self, index: usize) -> Var {
        self.store.var(index)
    }
}

/// He (fan-in) normal initialization.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std)
    })
    .with_grad()
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub struct ConvCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvCfg {
    pub fn k1() -> Self {
        ConvCfg {
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            bias: false,
        }
    }

    pub fn k3() -> Self {
        ConvCfg {
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: ConvCfg,
        rng: &mut Rng,
    ) -> Self {
        let cg = cin / cfg.groups;
        let fan_in = cg * cfg.kernel * cfg.kernel;
        let weight = store.push(
            format!("{name}.weight"),
            he_normal(&[cout, cg, cfg.kernel, cfg.kernel], fan_in, rng),
        );
        let bias = cfg
            .bias
            .then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[cout]).with_grad()));
        Conv {
            weight,
            bias,
            stride: cfg.stride,
            padding: cfg.padding,
            groups: cfg.groups,
        }
    }

    /// Fresh weights (and zero bias) for a new input channel count.
    pub fn reinit<T: Real>(&self, store: &mut ParamStore<T>, cin: usize, rng: &mut Rng) {
        let shape = store.get(self.weight).shape().to_vec();
        let (cout, k) = (shape[0], shape[2]);
        let cg = cin / self.groups;
        store.replace(self.weight, he_normal(&[cout, cg, k, k], cg * k * k, rng));
        if let Some(b) = self.bias {
            store.replace(b, Tensor::zeros(&[cout]).with_grad());
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.var(self.weight);
        let b = self.bias.map(|b| cx.var(b));
        cx.g
            .conv2d_grouped(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.push(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()).with_grad(),
            ),
            beta: store.push(format!("{name}.beta"), Tensor::zeros(&[channels]).with_grad()),
            running_mean: store.push(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.push(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.var(self.gamma);
        let beta = cx.var(self.beta);
        let eps = T::from_f64(BN_EPS);
        if cx.train {
            let mut mean = cx.store.get(self.running_mean).data().to_vec();
            let mut var = cx.store.get(self.running_var).data().to_vec();
            let out = cx.g.batchnorm2d(
                x,
                gamma,
                beta,
                NormMode::Train {
                    running_mean: &mut mean,
                    running_var: &mut var,
                    momentum: T::from_f64(BN_MOMENTUM),
                },
                eps,
            )?;
            cx.store
                .get_mut(self.running_mean)
                .data_mut()
                .copy_from_slice(&mean);
            cx.store
                .get_mut(self.running_var)
                .data_mut()
                .copy_from_slice(&var);
            Ok(out)
        } else {
            let store = &*cx.store;
            cx.g.batchnorm2d(
                x,
                gamma,
                beta,
                NormMode::Eval {
                    running_mean: store.get(self.running_mean).data(),
                    running_var: store.get(self.running_var).data(),
                },
                eps,
            )
        }
    }
}

/// Convolution, optional batch norm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: ConvCfg,
        norm: bool,
        relu: bool,
        rng: &mut Rng,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, cfg, rng);
        let bn = norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), cout));
        ConvBn { conv, bn, relu }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(cx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(cx, y)?;
        }
        if self.relu {
            y = cx.g.relu(y);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Self {
        Linear {
            weight: store.push(format!("{name}.weight"), he_normal(&[dout, din], din, rng)),
            bias: store.push(format!("{name}.bias"), Tensor::zeros(&[dout]).with_grad()),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.linear(x, store.var(self.weight), Some(store.var(self.bias)))
    }
}

/// Halves the spatial size with a window of at most 2, so inputs down to
/// 1×1 still produce output.
pub fn downsample<T: Real>(g: &mut Graph<T>, x: Var, kind: PoolKind) -> Result<Var> {
    let s = g.shape(x);
    let window = 2.min(s[2]).min(s[3]);
    g.pool2d(x, kind, window, 2)
}
