//! Shared test machinery: finite-difference gradient checks, brute-force
//! reference implementations, and closed-form parameter counts.
#![allow(dead_code)]

use nve::tensor::{Graph, NormMode, PoolKind, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| T::from_f64(r.random_range(-1.0..1.0)))
}

/// Distinct values at least 0.05 apart, so max selections survive
/// finite-difference perturbations.
pub fn separated<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| T::from_f64((order[i] as f64 - n as f64 / 2.0) * 0.05))
}

/// Values in ±[0.1, 1], away from the ReLU kink.
pub fn off_zero<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(0.1..1.0);
        T::from_f64(if r.random_bool(0.5) { m } else { -m })
    })
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a) + norm(b);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn scalarize<T: Real>(g: &mut Graph<T>, out: Var) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let n = g.value(out).len();
    let mut r = rng(0xFEED);
    let weights: Vec<T> = (0..n).map(|_| T::from_f64(r.random_range(-1.0..1.0))).collect();
    g.weighted_sum(out, &weights).unwrap()
}

/// Worst relative error between backprop and central differences over all
/// `inputs` (each one differentiated).
pub fn grad_check<T: Real>(inputs: &[Tensor<T>], h: f64, f: impl Fn(&mut Graph<T>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<T>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = scalarize(&mut g, out);
        g.scalar(loss).as_f64()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars);
    let loss = scalarize(&mut g, out);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = T::from_f64(x0.as_f64() + h);
            let fp = eval(&xs);
            xs[i].data_mut()[j] = T::from_f64(x0.as_f64() - h);
            let fm = eval(&xs);
            numeric.push((fp - fm) / (2.0 * h));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Relative error of every differentiable op on several shapes, in `T`.
pub fn gradient_suite<T: Real>(h: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: String, e: f64| out.push((name, e));

    let convs: [([usize; 4], [usize; 4], usize, usize, usize); 4] = [
        ([1, 1, 4, 4], [2, 1, 3, 3], 1, 0, 1),
        ([2, 3, 5, 4], [4, 3, 3, 3], 2, 1, 1),
        ([2, 4, 5, 5], [6, 2, 3, 3], 1, 1, 2),
        ([1, 3, 3, 6], [2, 3, 1, 1], 1, 0, 1),
    ];
    for (k, (xs, ws, stride, pad, groups)) in convs.into_iter().enumerate() {
        let inputs = [uniform::<T>(&xs, k as u64), uniform(&ws, 10 + k as u64), uniform(&[ws[0]], 20 + k as u64)];
        let e = grad_check(&inputs, h, |g, v| g.conv2d_grouped(v[0], v[1], Some(v[2]), stride, pad, groups).unwrap());
        push(format!("conv2d {xs:?} * {ws:?} s{stride} p{pad} g{groups}"), e);
    }
    for (k, xs) in [[1, 2, 4, 4], [2, 3, 5, 3], [1, 4, 6, 6]].into_iter().enumerate() {
        let c = xs[1];
        let inputs = [uniform::<T>(&xs, 30 + k as u64), uniform(&[c, 1, 3, 3], 40 + k as u64)];
        let e = grad_check(&inputs, h, |g, v| g.conv2d_grouped(v[0], v[1], None, 1 + k % 2, 1, c).unwrap());
        push(format!("depthwise conv2d {xs:?}"), e);
    }
    for (kind, label) in [(PoolKind::Max, "max"), (PoolKind::Avg, "avg")] {
        for (k, (xs, win, stride)) in [([1, 1, 4, 4], 2, 2), ([2, 3, 5, 5], 3, 2), ([1, 2, 6, 4], 2, 1)]
            .into_iter()
            .enumerate()
        {
            let inputs = [separated::<T>(&xs, 50 + k as u64)];
            let e = grad_check(&inputs, h, |g, v| g.pool2d(v[0], kind, win, stride).unwrap());
            push(format!("{label} pool {xs:?} w{win} s{stride}"), e);
        }
    }
    for (k, xs) in [[1, 1, 3, 3], [2, 3, 4, 2], [3, 2, 1, 5]].into_iter().enumerate() {
        let e = grad_check(&[uniform::<T>(&xs, 60 + k as u64)], h, |g, v| g.global_avg_pool(v[0]).unwrap());
        push(format!("global avg pool {xs:?}"), e);
    }
    for (k, xs) in [[2, 3, 3, 3], [4, 2, 2, 2], [3, 1, 4, 2]].into_iter().enumerate() {
        let c = xs[1];
        let inputs = [
            uniform::<T>(&xs, 70 + k as u64),
            uniform(&[c], 80 + k as u64),
            uniform(&[c], 90 + k as u64),
        ];
        let e = grad_check(&inputs, h, |g, v| {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::one(); c];
            let mode = NormMode::Train {
                running_mean: &mut mean,
                running_var: &mut var,
                momentum: T::from_f64(0.1),
            };
            g.batchnorm2d(v[0], v[1], v[2], mode, T::from_f64(1e-5)).unwrap()
        });
        push(format!("batchnorm train {xs:?}"), e);
        let stats_mean: Vec<T> = uniform::<T>(&[c], 100 + k as u64).into_data();
        let stats_var: Vec<T> = uniform::<T>(&[c], 110 + k as u64)
            .into_data()
            .into_iter()
            .map(|x| x * x + T::from_f64(0.5))
            .collect();
        let e = grad_check(&inputs, h, |g, v| {
            let mode = NormMode::Eval {
                running_mean: &stats_mean,
                running_var: &stats_var,
            };
            g.batchnorm2d(v[0], v[1], v[2], mode, T::from_f64(1e-5)).unwrap()
        });
        push(format!("batchnorm eval {xs:?}"), e);
    }
    for (k, (n, d, o)) in [(1, 3, 2), (4, 5, 3), (2, 7, 4)].into_iter().enumerate() {
        let inputs = [uniform::<T>(&[n, d], 120 + k as u64), uniform(&[o, d], 130 + k as u64), uniform(&[o], 140 + k as u64)];
        let e = grad_check(&inputs, h, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
        push(format!("linear [{n}, {d}] -> {o}"), e);
        let e = grad_check(&inputs[..2], h, |g, v| g.linear(v[0], v[1], None).unwrap());
        push(format!("linear without bias [{n}, {d}] -> {o}"), e);
    }
    for (k, xs) in [vec![5], vec![2, 3, 2, 2], vec![3, 4]].into_iter().enumerate() {
        let e = grad_check(&[off_zero::<T>(&xs, 150 + k as u64)], h, |g, v| g.relu(v[0]));
        push(format!("relu {xs:?}"), e);
        let inputs = [uniform::<T>(&xs, 160 + k as u64), uniform(&xs, 170 + k as u64)];
        let e = grad_check(&inputs, h, |g, v| g.add(v[0], v[1]).unwrap());
        push(format!("add {xs:?}"), e);
        let e = grad_check(&inputs[..1], h, |g, v| g.sum(v[0]));
        push(format!("sum {xs:?}"), e);
        let n: usize = xs.iter().product();
        let w: Vec<T> = uniform::<T>(&[n], 180 + k as u64).into_data();
        let e = grad_check(&inputs[..1], h, |g, v| g.weighted_sum(v[0], &w).unwrap());
        push(format!("weighted sum {xs:?}"), e);
        let flat = [n];
        let e = grad_check(&inputs[..1], h, |g, v| g.reshape(v[0], &flat).unwrap());
        push(format!("reshape {xs:?}"), e);
    }
    for (k, (a, b, axis)) in [
        (vec![2, 3, 2, 2], vec![2, 1, 2, 2], 1),
        (vec![1, 2], vec![3, 2], 0),
        (vec![2, 2, 3], vec![2, 2, 1], 2),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [uniform::<T>(&a, 190 + k as u64), uniform(&b, 200 + k as u64)];
        let e = grad_check(&inputs, h, |g, v| g.concat(&[v[0], v[1], v[0]], axis).unwrap());
        push(format!("concat {a:?} {b:?} axis {axis}"), e);
    }
    for (k, (xs, axis, start, len)) in [(vec![2, 4, 2, 2], 1, 1, 2), (vec![5, 3], 0, 2, 3), (vec![2, 3, 4], 2, 0, 1)]
        .into_iter()
        .enumerate()
    {
        let e = grad_check(&[uniform::<T>(&xs, 210 + k as u64)], h, |g, v| g.narrow(v[0], axis, start, len).unwrap());
        push(format!("narrow {xs:?} axis {axis}"), e);
    }
    for (k, (xs, perm)) in [
        (vec![1, 3, 2, 2], vec![2, 0, 1]),
        (vec![2, 4, 1, 3], vec![0, 2, 1, 3]),
        (vec![2, 6], vec![5, 4, 3, 2, 1, 0]),
    ]
    .into_iter()
    .enumerate()
    {
        let e = grad_check(&[uniform::<T>(&xs, 220 + k as u64)], h, |g, v| g.permute_channels(v[0], &perm).unwrap());
        push(format!("permute channels {xs:?}"), e);
    }
    for (k, (n, c)) in [(1, 2), (4, 3), (3, 5)].into_iter().enumerate() {
        let targets: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % c).collect();
        let e = grad_check(&[uniform::<T>(&[n, c], 230 + k as u64)], h, |g, v| g.cross_entropy(v[0], &targets).unwrap());
        push(format!("cross entropy [{n}, {c}]"), e);
    }
    out
}

/// Step sizes per precision.
pub const H_F32: f64 = 5e-3;
pub const H_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;

/// Direct-summation grouped convolution.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, cg, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let fg = f / groups;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for o in 0..f {
            let grp = o / fg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for a in 0..kh {
                            for bb in 0..kw {
                                let y = (i * stride + a) as isize - pad as isize;
                                let z = (j * stride + bb) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ch) * h + y as usize) * wd + z as usize];
                                let wv = w.data()[((o * cg + ci) * kh + a) * kw + bb];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * f + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

pub fn naive_pool(x: &Tensor<f64>, max: bool, win: usize, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::new();
    for s in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let vals: Vec<f64> = (0..win * win)
                    .map(|t| x.data()[(s * h + i * stride + t / win) * w + j * stride + t % win])
                    .collect();
                out.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    (vec![n, c, oh, ow], out)
}

pub fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let [n, d] = x.shape().try_into().unwrap();
    let k = w.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for o in 0..k {
            out[i * k + o] = b[o] + (0..d).map(|j| x.data()[i * d + j] * w.data()[o * d + j]).sum::<f64>();
        }
    }
    out
}

/// Dense 3-D Gaussian with the same truncation box and in-bounds
/// renormalization, evaluated without separability.
pub fn dense_gaussian(values: &[f32], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let radius = sigma.map(|s| (4.0 * s).ceil() as isize);
    let [nx, ny, nz] = dims.map(|d| d as isize);
    let mut out = Vec::with_capacity(values.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (mut acc, mut mass) = (0.0, 0.0);
                for dz in -radius[2]..=radius[2] {
                    for dy in -radius[1]..=radius[1] {
                        for dx in -radius[0]..=radius[0] {
                            let (px, py, pz) = (x + dx, y + dy, z + dz);
                            if px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz {
                                continue;
                            }
                            let mut e = 0.0;
                            for (d, s) in [(dx, sigma[0]), (dy, sigma[1]), (dz, sigma[2])] {
                                if s > 0.0 {
                                    e += (d * d) as f64 / (2.0 * s * s);
                                } else if d != 0 {
                                    e = f64::INFINITY;
                                }
                            }
                            let wgt = (-e).exp();
                            acc += wgt * values[(px + nx * (py + ny * pz)) as usize] as f64;
                            mass += wgt;
                        }
                    }
                }
                out.push(acc / mass);
            }
        }
    }
    out
}

/// Reshape `[groups, C/groups]` → transpose → flatten, as an index list.
pub fn shuffle_by_transpose(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    let grid: Vec<Vec<usize>> = (0..groups).map(|g| (g * per..(g + 1) * per).collect()).collect();
    (0..per).flat_map(|j| grid.iter().map(move |row| row[j])).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Closed-form trainable parameter counts of the default micro models with
// `c` input channels and `f` features. BN contributes 2 per channel.
fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k
}

fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k) + 2 * cout
}

fn conv_bias(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k) + cout
}

fn depthwise_bn(ch: usize) -> usize {
    9 * ch + 2 * ch
}

pub fn resnet_params(c: usize, f: usize) -> usize {
    let block = |cin: usize, mid: usize, out: usize| {
        conv_bn(cin, mid, 1) + conv_bn(mid, mid, 3) + conv_bn(mid, out, 1) + if cin != out { conv_bn(cin, out, 1) } else { 0 }
    };
    conv_bn(c, 16, 3) + block(16, 16, 64) + block(64, 16, 64) + block(64, 32, 128) + block(128, 32, 128) + conv_bias(128, f, 1)
}

pub fn squeezenet_params(c: usize, f: usize) -> usize {
    let fire = |cin: usize, s: usize, e: usize| conv_bias(cin, s, 1) + conv_bias(s, e, 1) + conv_bias(s, e, 3);
    conv_bias(c, 32, 3) + fire(32, 8, 32) + fire(64, 8, 32) + fire(64, 16, 64) + fire(128, 16, 64) + conv_bias(128, f, 1)
}

pub fn densenet_params(c: usize, f: usize) -> usize {
    let growth = 8;
    let layer = |cin: usize| 2 * cin + conv(cin, 4 * growth, 1) + 2 * 4 * growth + conv(4 * growth, growth, 3);
    let block = |cin: usize| (0..3).map(|j| layer(cin + j * growth)).sum::<usize>();
    let transition = |cin: usize| 2 * cin + conv(cin, cin / 2, 1);
    conv_bn(c, 16, 3) + block(16) + transition(40) + block(20) + 2 * 44 + conv_bias(44, f, 1)
}

pub fn vgg_params(c: usize, f: usize) -> usize {
    conv_bias(c, 16, 3) + conv_bias(16, 16, 3) + conv_bias(16, 32, 3) + conv_bias(32, 32, 3) + conv_bias(32, f, 1)
}

pub fn mobilenet_params(c: usize, f: usize) -> usize {
    let ir = |cin: usize, cout: usize| {
        let h = 6 * cin;
        conv_bn(cin, h, 1) + depthwise_bn(h) + conv_bn(h, cout, 1)
    };
    conv_bn(c, 16, 3) + ir(16, 16) + ir(16, 16) + ir(16, 32) + ir(32, 32) + conv_bias(32, f, 1)
}

pub fn shufflenet_params(c: usize, f: usize) -> usize {
    let down = |cin: usize, cout: usize| {
        let h = cout / 2;
        depthwise_bn(cin) + conv_bn(cin, h, 1) + conv_bn(cin, h, 1) + depthwise_bn(h) + conv_bn(h, h, 1)
    };
    let keep = |ch: usize| {
        let h = ch / 2;
        conv_bn(h, h, 1) + depthwise_bn(h) + conv_bn(h, h, 1)
    };
    conv_bn(c, 12, 3) + down(12, 64) + keep(64) + down(64, 128) + keep(128) + conv_bias(128, f, 1)
}
