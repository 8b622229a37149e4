//! Synthetic stand-ins for the two-class tissue volumes and for the large
//! multi-class image corpus used to pretrain backbones.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;
use crate::volume::{slice_indices, Label, Tissue, Volume, DEFAULT_VOXEL_MM};

/// Semi-axis of the effect ellipsoid as a fraction of each dimension; the
/// ellipsoid then covers 5% of the grid.
pub const EFFECT_SEMI_AXIS: f64 = 0.2285;

/// Multiplicative attenuation `1 − s` applied to PD volumes inside the
/// effect region, with `s` drawn uniformly from `[min_strength, max_strength]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassEffect {
    pub min_strength: f64,
    pub max_strength: f64,
}

impl ClassEffect {
    pub fn none() -> Self {
        ClassEffect {
            min_strength: 0.0,
            max_strength: 0.0,
        }
    }

    pub fn strong() -> Self {
        ClassEffect {
            min_strength: 0.6,
            max_strength: 0.8,
        }
    }

    pub fn moderate() -> Self {
        ClassEffect {
            min_strength: 0.1,
            max_strength: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    /// `(X, Y, Z)`.
    pub dims: [usize; 3],
    pub voxel_mm: f32,
    pub n_per_class: usize,
    pub class_effect: ClassEffect,
    pub noise_sigma: f64,
    pub n_proxy_classes: usize,
    pub proxy_per_class: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            dims: [16, 20, 16],
            voxel_mm: DEFAULT_VOXEL_MM,
            n_per_class: 150,
            class_effect: ClassEffect::strong(),
            noise_sigma: 0.0,
            n_proxy_classes: 4,
            proxy_per_class: 300,
        }
    }
}

impl SyntheticTaskSpec {
    /// Noise-free, strong effect, 300 samples.
    pub fn separable() -> Self {
        SyntheticTaskSpec::default()
    }

    /// Moderate effect under moderate noise.
    pub fn standard() -> Self {
        SyntheticTaskSpec {
            n_per_class: 100,
            class_effect: ClassEffect::moderate(),
            noise_sigma: 0.2,
            ..SyntheticTaskSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.dims.iter().product::<usize>() > 1 << 22 {
            return Err(Error::Config(format!("synthetic dims {:?} out of range", self.dims)));
        }
        if !(self.voxel_mm.is_finite() && self.voxel_mm > 0.0) {
            return Err(Error::Config(format!("voxel size must be positive, got {}", self.voxel_mm)));
        }
        let e = self.class_effect;
        if !(0.0 <= e.min_strength && e.min_strength <= e.max_strength && e.max_strength <= 1.0) {
            return Err(Error::Config(format!(
                "effect strengths must satisfy 0 ≤ min ≤ max ≤ 1, got [{}, {}]",
                e.min_strength, e.max_strength
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Whether a voxel lies inside the effect ellipsoid.
    pub fn in_effect_region(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let n = self.dims[a] as f64;
                let d = (p[a] as f64 + 0.5 - n / 2.0) / (EFFECT_SEMI_AXIS * n);
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    amplitude: f64,
}

impl Blob {
    fn random(rng: &mut Rng, dims: [usize; 3], amplitude: f64) -> Self {
        Blob {
            center: [0, 1, 2].map(|a| rng.random_range(0.0..dims[a] as f64)),
            radius: rng.random_range(1.5..3.5),
            amplitude: rng.random_range(-amplitude..amplitude),
        }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        self.amplitude * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

fn blob_sum(blobs: &[Blob], p: [f64; 3]) -> f64 {
    blobs.iter().map(|b| b.at(p)).sum()
}

/// Brain-shaped support: a centred ellipsoid filling most of the grid.
fn in_mask(dims: [usize; 3], x: usize, y: usize, z: usize) -> bool {
    let p = [x, y, z];
    (0..3)
        .map(|a| {
            let n = dims[a] as f64;
            let d = (p[a] as f64 + 0.5 - n / 2.0) / (0.48 * n);
            d * d
        })
        .sum::<f64>()
        <= 1.0
}

const SHARED_BLOBS: usize = 4;
const OWN_BLOBS: usize = 3;
const BLOB_AMPLITUDE: f64 = 0.15;

fn generate_sample(spec: &SyntheticTaskSpec, label: Label, rng: &mut Rng) -> Result<Sample> {
    let dims = spec.dims;
    let shared: Vec<Blob> = (0..SHARED_BLOBS).map(|_| Blob::random(rng, dims, BLOB_AMPLITUDE)).collect();
    let own_gm: Vec<Blob> = (0..OWN_BLOBS).map(|_| Blob::random(rng, dims, BLOB_AMPLITUDE)).collect();
    let own_wm: Vec<Blob> = (0..OWN_BLOBS).map(|_| Blob::random(rng, dims, BLOB_AMPLITUDE)).collect();
    let base_gm = rng.random_range(0.5..0.6);
    let base_wm = rng.random_range(0.4..0.5);
    let e = spec.class_effect;
    let strength = match label {
        Label::Pd if e.max_strength > e.min_strength => rng.random_range(e.min_strength..=e.max_strength),
        Label::Pd => e.min_strength,
        Label::Hc => 0.0,
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let field = |base: f64, scale: f64, own: &[Blob], rng: &mut Rng| {
        Volume::from_fn(dims, [spec.voxel_mm; 3], |x, y, z| {
            let mut v = 0.0;
            if in_mask(dims, x, y, z) {
                let p = [x as f64, y as f64, z as f64];
                v = (base + scale * blob_sum(&shared, p) + blob_sum(own, p)).clamp(0.0, 1.0);
                if spec.in_effect_region(x, y, z) {
                    v *= 1.0 - strength;
                }
            }
            if spec.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
    };
    let gm = field(base_gm, 1.0, &own_gm, rng)?
        .with_tissue(Tissue::Gm)
        .with_label(Some(label));
    let wm = field(base_wm, 0.7, &own_wm, rng)?
        .with_tissue(Tissue::Wm)
        .with_label(Some(label));
    Ok(Sample { gm, wm, label })
}

/// `2·n_per_class` samples alternating PD, HC. Sample `i` depends only on
/// `(spec, seed, i)`.
pub fn generate_classification_task(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..2 * spec.n_per_class)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Pd } else { Label::Hc };
            let mut rng = seed::rng(seed, &[seed::label("classification"), i as u64]);
            generate_sample(spec, label, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("synthetic-{seed}"), samples)
}

/// Multi-class 2-D images shaped like model input, `[N, K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProxyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images `[K, H, W]` of sample `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let per: usize = self.images.shape()[1..].iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> ProxyDataset {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let data = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        ProxyDataset {
            images: Tensor::new(&shape, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

pub const MAX_PROXY_CLASSES: usize = 8;

/// Floor on the proxy images' noise; above it they share the task's noise level.
pub const PROXY_MIN_NOISE: f64 = 0.05;

/// Membership test for shape class `c` at offset `(dx, dy)` from the centre
/// of an object with radius `r`.
fn shape_contains(c: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match c {
        0 => d < r,
        1 => dx.abs().max(dy.abs()) < r,
        2 => d < r && d > 0.55 * r,
        3 => dx.abs().max(dy.abs()) < r && (dx.abs() < 0.3 * r || dy.abs() < 0.3 * r),
        4 => dx.abs() + dy.abs() < r,
        5 => dx.abs() < r && dy.abs() < 0.4 * r,
        6 => dx.abs() < 0.4 * r && dy.abs() < r,
        _ => dx.abs().max(dy.abs()) < r && dx.abs().min(dy.abs()) > 0.35 * r,
    }
}

/// Shape images: class `c` is shape family `c / 2` (disc, square, ring,
/// cross) drawn darker than the background for even `c` and brighter for
/// odd `c`, with random position, size and contrast over a smooth
/// background. Channels are cross-sections through
/// a 3-D object, like the axial slices of a volume.
pub fn generate_proxy_pretraining_task(spec: &SyntheticTaskSpec, slices: usize, seed: u64) -> Result<ProxyDataset> {
    spec.validate()?;
    let k = spec.n_proxy_classes;
    if !(2..=MAX_PROXY_CLASSES).contains(&k) {
        return Err(Error::Config(format!(
            "n_proxy_classes must lie in 2..={MAX_PROXY_CLASSES}, got {k}"
        )));
    }
    slice_indices(spec.dims[2], slices)?;
    let (w, h) = (spec.dims[0], spec.dims[1]);
    let n = k * spec.proxy_per_class;
    if n == 0 {
        return Err(Error::Config("proxy_per_class must be at least 1".into()));
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(PROXY_MIN_NOISE)).unwrap();
    let mut data = Vec::with_capacity(n * slices * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let mut rng = seed::rng(seed, &[seed::label("proxy"), i as u64]);
        let rng = &mut rng;
        let dims = [w, h, slices];
        let background: Vec<Blob> = (0..4).map(|_| Blob::random(rng, dims, 0.2)).collect();
        let base = rng.random_range(0.3..0.6);
        // even classes are darker than the background, odd ones brighter
        let contrast = rng.random_range(0.25..0.45) * if class % 2 == 0 { -1.0 } else { 1.0 };
        let side = w.min(h) as f64;
        let radius = rng.random_range(0.25 * side..0.45 * side);
        let cx = rng.random_range(0.3 * w as f64..0.7 * w as f64);
        let cy = rng.random_range(0.3 * h as f64..0.7 * h as f64);
        let cz = rng.random_range(0.25..0.75) * (slices as f64 - 1.0);
        let depth = rng.random_range(0.4..0.9) * slices as f64;
        for ch in 0..slices {
            let t = (ch as f64 - cz) / depth;
            let r = radius * (1.0 - t * t).max(0.0).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let p = [x as f64, y as f64, ch as f64];
                    let mut v = base + blob_sum(&background, p);
                    if r > 0.5 && shape_contains(class / 2, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                        v += contrast;
                    }
                    v += noise.sample(rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class);
    }
    Ok(ProxyDataset {
        images: Tensor::new(&[n, slices, h, w], data)?,
        labels,
        num_classes: k,
    })
}
