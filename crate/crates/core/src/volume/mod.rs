//! Volumes and the in-scope preprocessing stages: intensity normalization,
//! artifact clipping, FWHM Gaussian smoothing, and slicing to model input.

mod io;

pub use io::{decode_native, encode_native, read_nifti, read_volume, write_volume, NATIVE_MAGIC};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic spacing of the 121×145×121 MNI grid.
pub const DEFAULT_VOXEL_MM: f32 = 1.5;

/// Kernel support in standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tissue {
    Whole,
    Gm,
    Wm,
}

impl Tissue {
    pub fn code(self) -> u8 {
        match self {
            Tissue::Whole => 0,
            Tissue::Gm => 1,
            Tissue::Wm => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Tissue::Whole),
            1 => Some(Tissue::Gm),
            2 => Some(Tissue::Wm),
            _ => None,
        }
    }
}

/// Diagnostic class. The discriminant is the class index used for logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Pd = 0,
    Hc = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Pd),
            1 => Some(Label::Hc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Pd => "PD",
            Label::Hc => "HC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PD" => Some(Label::Pd),
            "HC" => Some(Label::Hc),
            _ => None,
        }
    }

    /// Native file code: 0 unlabeled, 1 PD, 2 HC.
    pub(crate) fn code(label: Option<Label>) -> u8 {
        label.map_or(0, |l| l as u8 + 1)
    }

    pub(crate) fn from_code(code: u8) -> Option<Option<Label>> {
        match code {
            0 => Some(None),
            1 => Some(Some(Label::Pd)),
            2 => Some(Some(Label::Hc)),
            _ => None,
        }
    }
}

/// A scalar field on an `X×Y×Z` grid, stored with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_mm: [f32; 3],
    values: Vec<f32>,
    pub tissue: Tissue,
    pub smoothed: bool,
    pub label: Option<Label>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_mm: [f32; 3], values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("volume", format!("dims must be positive, got {dims:?}")));
        }
        if voxel_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!(
                "voxel size must be positive, got {voxel_mm:?}"
            )));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape("volume", format!("dims {dims:?} overflow")))?;
        if values.len() != n {
            return Err(Error::shape(
                "volume",
                format!("dims {dims:?} need {n} values, got {}", values.len()),
            ));
        }
        Ok(Volume {
            dims,
            voxel_mm,
            values,
            tissue: Tissue::Whole,
            smoothed: false,
            label: None,
        })
    }

    pub fn from_fn(dims: [usize; 3], voxel_mm: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, voxel_mm, values)
    }

    pub fn with_tissue(mut self, tissue: Tissue) -> Self {
        self.tissue = tissue;
        self
    }

    pub fn with_label(mut self, label: Option<Label>) -> Self {
        self.label = label;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> [f32; 3] {
        self.voxel_mm
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    fn coords(&self, i: usize) -> (usize, usize, usize) {
        let [nx, ny, _] = self.dims;
        (i % nx, (i / nx) % ny, i / (nx * ny))
    }

    fn map_values(&self, values: Vec<f32>) -> Volume {
        Volume {
            values,
            ..self.clone()
        }
    }

    /// Fails on the first NaN or infinity, reporting its grid position.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let (x, y, z) = self.coords(i);
                Err(Error::NonFiniteVoxel {
                    x,
                    y,
                    z,
                    value: self.values[i],
                })
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Maps `[min, max]` affinely onto `[0, 1]`; a constant volume becomes zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    v.check_finite()?;
    let (lo, hi) = v.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    let values = if hi > lo {
        let span = hi - lo;
        v.values
            .iter()
            .map(|&x| ((x as f64 - lo) / span) as f32)
            .collect()
    } else {
        vec![0.0; v.len()]
    };
    Ok(v.map_values(values))
}

/// Clamps every voxel into `[0, 1]`.
pub fn clip_artifacts(v: &Volume) -> Volume {
    v.map_values(v.values.iter().map(|&x| x.clamp(0.0, 1.0)).collect())
}

/// Standard deviation in voxels of a Gaussian with the given full width at
/// half maximum.
pub fn fwhm_to_sigma(fwhm_mm: f64, voxel_mm: f64) -> Result<f64> {
    if !(fwhm_mm.is_finite() && fwhm_mm >= 0.0) {
        return Err(Error::Config(format!("fwhm must be non-negative, got {fwhm_mm}")));
    }
    if !(voxel_mm.is_finite() && voxel_mm > 0.0) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_mm}")));
    }
    Ok(fwhm_mm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()) / voxel_mm)
}

/// Separable truncated Gaussian; `weights[a]` has `2·radius[a] + 1` taps.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingKernel {
    pub fwhm_mm: f64,
    pub sigma_voxels: [f64; 3],
    pub radius: [usize; 3],
    pub weights: [Vec<f64>; 3],
}

impl SmoothingKernel {
    pub fn new(fwhm_mm: f64, voxel_mm: [f32; 3]) -> Result<Self> {
        let mut sigma_voxels = [0.0; 3];
        for (s, &vox) in sigma_voxels.iter_mut().zip(&voxel_mm) {
            *s = fwhm_to_sigma(fwhm_mm, vox as f64)?;
        }
        let radius = sigma_voxels.map(|s| (TRUNCATE_SIGMAS * s).ceil() as usize);
        let weights = [0, 1, 2].map(|a| gaussian_taps(sigma_voxels[a], radius[a]));
        Ok(SmoothingKernel {
            fwhm_mm,
            sigma_voxels,
            radius,
            weights,
        })
    }
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Smooths with an isotropic Gaussian of the given FWHM in millimetres.
/// Taps that fall outside the grid are dropped and the rest renormalized.
pub fn gaussian_smooth(v: &Volume, fwhm_mm: f64) -> Result<Volume> {
    let kernel = SmoothingKernel::new(fwhm_mm, v.voxel_mm)?;
    let mut field: Vec<f64> = v.values.iter().map(|&x| x as f64).collect();
    let dims = v.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        if kernel.radius[axis] == 0 {
            continue;
        }
        field = smooth_axis(&field, dims, strides, axis, kernel.radius[axis], &kernel.weights[axis]);
    }
    let mut out = v.map_values(field.into_iter().map(|x| x as f32).collect());
    out.smoothed = true;
    Ok(out)
}

fn smooth_axis(
    field: &[f64],
    dims: [usize; 3],
    strides: [usize; 3],
    axis: usize,
    radius: usize,
    weights: &[f64],
) -> Vec<f64> {
    let n = dims[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; field.len()];
    let mut line = vec![0.0; n];
    for (start, _) in field.iter().enumerate().filter(|&(i, _)| (i / stride) % n == 0) {
        for (j, l) in line.iter_mut().enumerate() {
            *l = field[start + j * stride];
        }
        for j in 0..n {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(n - 1);
            let (mut acc, mut mass) = (0.0, 0.0);
            for (t, &value) in line.iter().enumerate().take(hi + 1).skip(lo) {
                let w = weights[t + radius - j];
                acc += w * value;
                mass += w;
            }
            out[start + j * stride] = acc / mass;
        }
    }
    out
}

/// Slice indices `round(i·(Z−1)/(k−1))` for `i = 0..k`.
pub fn slice_indices(z: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Config("slice count must be at least 1".into()));
    }
    if k > z {
        return Err(Error::Config(format!(
            "cannot take {k} slices from a volume with {z} axial slices"
        )));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    Ok((0..k)
        .map(|i| (2 * i * (z - 1) + (k - 1)) / (2 * (k - 1)))
        .collect())
}

/// `k` evenly spaced axial slices stacked as channels: `[1, k, Y, X]`.
pub fn slice_to_input(v: &Volume, k: usize) -> Result<Tensor<f32>> {
    let [nx, ny, nz] = v.dims;
    let indices = slice_indices(nz, k)?;
    let plane = nx * ny;
    let mut data = Vec::with_capacity(k * plane);
    for z in indices {
        data.extend_from_slice(&v.values[z * plane..(z + 1) * plane]);
    }
    Tensor::new(&[1, k, ny, nx], data)
}
