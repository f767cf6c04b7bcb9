use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Geometry, Image3D, Interp};
use crate::error::{Error, Result};

/// Intensity conditioning and channel weighting for the blended image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    /// Weight of the normalized CT channel; PET gets `1 - alpha`.
    pub alpha: f64,
    /// Upper HU clip applied to CT before normalization (metal suppression).
    pub ct_clip_max: f64,
    pub ct_norm_range: (f64, f64),
    /// SUV bounds; anything above `hi` saturates at 1.
    pub pet_norm_range: (f64, f64),
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            alpha: 0.2,
            ct_clip_max: 750.0,
            ct_norm_range: (-1000.0, 750.0),
            pet_norm_range: (0.0, 35.0),
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.ct_clip_max.is_finite() {
            return Err(Error::Config("ct_clip_max must be finite".into()));
        }
        for (name, (lo, hi)) in [("ct_norm_range", self.ct_norm_range), ("pet_norm_range", self.pet_norm_range)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} requires lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Clip + normalize CT, normalize PET, and blend. PET is resampled onto
    /// the CT grid (linear) when the geometries differ.
    pub fn apply(&self, ct: &Image3D, pet: &Image3D) -> Result<Image3D> {
        self.validate()?;
        let nct = self.normalize_ct(ct)?;
        let npet = self.normalize_pet(pet, ct.geometry())?;
        blend(&nct, &npet, self.alpha)
    }

    pub fn normalize_ct(&self, ct: &Image3D) -> Result<Image3D> {
        let (lo, hi) = self.ct_norm_range;
        normalize(&clip_intensity(ct, self.ct_clip_max), lo, hi)
    }

    /// Normalized PET on `target` geometry.
    pub fn normalize_pet(&self, pet: &Image3D, target: &Geometry) -> Result<Image3D> {
        let (lo, hi) = self.pet_norm_range;
        let pet = if pet.geometry().matches(target) {
            pet.clone()
        } else {
            resample(pet, target, Interp::Linear)
        };
        normalize(&pet, lo, hi)
    }
}

pub fn clip_intensity(img: &Image3D, max_val: f64) -> Image3D {
    img.map(|v| v.min(max_val))
}

/// Linear map of `[lo, hi]` onto `[0, 1]`, clamping outside values.
pub fn normalize(img: &Image3D, lo: f64, hi: f64) -> Result<Image3D> {
    if !(lo < hi) {
        return Err(Error::Config(format!("normalize: degenerate range ({lo}, {hi})")));
    }
    let w = hi - lo;
    Ok(img.map(|v| ((v - lo) / w).clamp(0.0, 1.0)))
}

/// `alpha * nct + (1 - alpha) * npet`, voxelwise.
pub fn blend(nct: &Image3D, npet: &Image3D, alpha: f64) -> Result<Image3D> {
    nct.geometry().ensure_matches(npet.geometry(), "blend")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let data = nct
        .data()
        .iter()
        .zip(npet.data())
        .map(|(&c, &p)| alpha * c + (1.0 - alpha) * p)
        .collect();
    Ok(Image3D::from_parts_unchecked(*nct.geometry(), data))
}

/// Resample onto `target` in physical space with edge clamping.
pub fn resample(img: &Image3D, target: &Geometry, interp: Interp) -> Image3D {
    if img.geometry() == target {
        return img.clone();
    }
    let data = (0..target.len())
        .into_par_iter()
        .map(|idx| img.sample(target.physical_of(idx), interp))
        .collect();
    Image3D::from_parts_unchecked(*target, data)
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with per-axis sigma in voxels; edges clamp.
/// Axes with sigma <= 0 or a single voxel are left untouched.
pub fn gaussian_smooth(img: &Image3D, sigma_vox: [f64; 3]) -> Image3D {
    let geom = *img.geometry();
    let mut data = img.data().to_vec();
    for axis in 0..3 {
        let n = geom.dims[axis];
        if sigma_vox[axis] <= 0.0 || n == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma_vox[axis]);
        data = convolve_axis(&data, &geom, axis, &kernel);
    }
    Image3D::from_parts_unchecked(geom, data)
}

fn convolve_axis(src: &[f64], geom: &Geometry, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, _] = geom.dims;
    let n = geom.dims[axis] as isize;
    let stride = [1, nx, nx * ny][axis];
    let radius = (kernel.len() / 2) as isize;
    (0..src.len())
        .into_par_iter()
        .map(|idx| {
            let pos = geom.coords(idx)[axis] as isize;
            let line0 = idx - pos as usize * stride;
            kernel
                .iter()
                .enumerate()
                .map(|(t, &w)| {
                    let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                    w * src[line0 + q * stride]
                })
                .sum()
        })
        .collect()
}

/// Gaussian anti-aliasing (sigma = 0.5 * factor voxels) followed by
/// subsampling every `factor` voxels; spacing scales by `factor`.
pub fn downsample(img: &Image3D, factor: usize) -> Result<Image3D> {
    if factor < 1 {
        return Err(Error::Config("downsample factor must be >= 1".into()));
    }
    let sigma = 0.5 * factor as f64;
    let smooth = gaussian_smooth(img, [sigma; 3]);
    if factor == 1 {
        return Ok(smooth);
    }
    let g = img.geometry();
    let dims = g.dims.map(|n| n.div_ceil(factor));
    let spacing = g.spacing.map(|s| s * factor as f64);
    let out_geom = Geometry::new(dims, spacing, g.origin)?;
    let mut data = Vec::with_capacity(out_geom.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                data.push(smooth.at(i * factor, j * factor, k * factor));
            }
        }
    }
    Ok(Image3D::from_parts_unchecked(out_geom, data))
}
