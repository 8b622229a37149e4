//! Library operators against brute-force reference implementations.
mod common;

use common::*;
use nve::tensor::{Graph, PoolKind, Tensor};
use nve::volume::{gaussian_smooth, Volume};
use nve::zoo::blocks::channel_shuffle_permutation;
use nve::zoo::{build_micro_model, MicroKind, MicroModelSpec};

fn graph_value(g: &Graph<f64>, v: nve::tensor::Var) -> (Vec<usize>, Vec<f64>) {
    (g.shape(v).to_vec(), g.value(v).to_vec())
}

#[test]
fn convolution_matches_direct_summation() {
    let cases = [
        ([2, 3, 7, 6], [4, 3, 3, 3], 1, 1, 1),
        ([1, 4, 8, 8], [6, 2, 3, 3], 2, 1, 2),
        ([2, 6, 5, 5], [6, 1, 3, 3], 1, 1, 6),
        ([1, 2, 9, 4], [3, 2, 1, 1], 2, 0, 1),
        ([1, 1, 6, 6], [2, 1, 5, 5], 1, 2, 1),
    ];
    for (k, (xs, ws, stride, pad, groups)) in cases.into_iter().enumerate() {
        let x = uniform::<f64>(&xs, k as u64);
        let w = uniform::<f64>(&ws, 100 + k as u64);
        let b = uniform::<f64>(&[ws[0]], 200 + k as u64);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let out = g.conv2d_grouped(xv, wv, Some(bv), stride, pad, groups).unwrap();
        let (shape, got) = graph_value(&g, out);
        let (want_shape, want) = naive_conv(&x, &w, Some(b.data()), stride, pad, groups);
        assert_eq!(shape, want_shape);
        assert!(max_abs_diff(&got, &want) < 1e-12, "case {k}");
    }
}

#[test]
fn pooling_matches_window_scan() {
    for (k, (xs, win, stride)) in [([2, 3, 6, 6], 2, 2), ([1, 2, 7, 5], 3, 2), ([1, 1, 4, 4], 2, 1)]
        .into_iter()
        .enumerate()
    {
        let x = uniform::<f64>(&xs, 300 + k as u64);
        for (kind, max) in [(PoolKind::Max, true), (PoolKind::Avg, false)] {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = g.pool2d(xv, kind, win, stride).unwrap();
            let (shape, got) = graph_value(&g, out);
            let (want_shape, want) = naive_pool(&x, max, win, stride);
            assert_eq!(shape, want_shape);
            assert!(max_abs_diff(&got, &want) < 1e-12);
        }
    }
}

#[test]
fn linear_matches_dot_products() {
    let x = uniform::<f64>(&[5, 7], 1);
    let w = uniform::<f64>(&[3, 7], 2);
    let b = uniform::<f64>(&[3], 3);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
    let out = g.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.shape(out), &[5, 3]);
    assert!(max_abs_diff(g.value(out), &naive_linear(&x, &w, b.data())) < 1e-12);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let logits = uniform::<f64>(&[4, 3], 9);
    let targets = [0, 2, 1, 2];
    let mut g = Graph::new();
    let v = g.leaf(logits.clone());
    let loss = g.cross_entropy(v, &targets).unwrap();
    let mut want = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * 3..i * 3 + 3];
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    assert!((g.scalar(loss) - want / 4.0).abs() < 1e-12);
}

#[test]
fn separable_smoothing_matches_dense_convolution() {
    let dims = [9, 7, 6];
    let vol = Volume::from_fn(dims, [1.5, 1.5, 1.5], |x, y, z| ((x * 7 + y * 3 + z * 11) % 5) as f32 * 0.2).unwrap();
    for fwhm in [1.5, 4.0, 8.0] {
        let sigma = fwhm / (1.5 * 2.0 * (2.0 * 2f64.ln()).sqrt());
        let want = dense_gaussian(vol.values(), dims, [sigma; 3]);
        let got: Vec<f64> = gaussian_smooth(&vol, fwhm).unwrap().values().iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&got, &want) < 1e-5, "fwhm {fwhm}");
    }
}

#[test]
fn anisotropic_smoothing_uses_per_axis_sigma() {
    let dims = [8, 6, 5];
    let voxel = [1.0f32, 2.0, 3.0];
    let vol = Volume::from_fn(dims, voxel, |x, y, z| if (x, y, z) == (3, 2, 2) { 1.0 } else { 0.0 }).unwrap();
    let fwhm = 4.0;
    let k = 2.0 * (2.0 * 2f64.ln()).sqrt();
    let sigma = voxel.map(|v| fwhm / (v as f64 * k));
    let want = dense_gaussian(vol.values(), dims, sigma);
    let got: Vec<f64> = gaussian_smooth(&vol, fwhm).unwrap().values().iter().map(|&v| v as f64).collect();
    assert!(max_abs_diff(&got, &want) < 1e-6);
}

#[test]
fn channel_shuffle_matches_reshape_transpose() {
    for (c, groups) in [(6, 2), (12, 3), (8, 4), (10, 1), (24, 2)] {
        assert_eq!(channel_shuffle_permutation(c, groups).unwrap(), shuffle_by_transpose(c, groups));
    }
    let x = Tensor::from_fn(&[1, 6, 1, 1], |i| i as f64);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let out = nve::zoo::blocks::channel_shuffle(&mut g, xv, 2).unwrap();
    assert_eq!(g.value(out), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

#[test]
fn parameter_counts_match_closed_forms() {
    let forms: [(MicroKind, fn(usize, usize) -> usize); 6] = [
        (MicroKind::ResNet, resnet_params),
        (MicroKind::SqueezeNet, squeezenet_params),
        (MicroKind::DenseNet, densenet_params),
        (MicroKind::Vgg, vgg_params),
        (MicroKind::MobileNet, mobilenet_params),
        (MicroKind::ShuffleNet, shufflenet_params),
    ];
    for (kind, form) in forms {
        for c in [1, 3, 8] {
            let spec = MicroModelSpec::default_for(kind, c);
            let model = build_micro_model::<f32>(&spec, 0).unwrap();
            assert_eq!(model.backbone_param_count(), form(c, spec.feature_dim), "{kind} with {c} channels");
            assert_eq!(model.head_param_count(), spec.feature_dim * 1000 + 1000);
        }
    }
}
