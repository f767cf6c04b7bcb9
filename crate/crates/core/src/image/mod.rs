//! Geometry-aware 3D scalar volumes and the intensity-conditioning operators
//! that turn CT/PET channels into a single blended grayscale image.

mod geometry;
mod ops;

pub use geometry::Geometry;
pub use ops::{blend, clip_intensity, downsample, gaussian_smooth, normalize, resample, BlendConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation scheme used for resampling and warping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Linear,
    Nearest,
}

/// Scalar volume, x-fastest, double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Image3D {
    geom: Geometry,
    data: Vec<f64>,
}

/// Binary label volume sharing the [`Geometry`] conventions of [`Image3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    geom: Geometry,
    data: Vec<bool>,
}

impl Image3D {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "voxel count {} != {}",
                data.len(),
                geom.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite voxel at index {i}")));
        }
        Ok(Image3D { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        Image3D {
            geom,
            data: vec![value; geom.len()],
        }
    }

    /// Build by evaluating `f` at every voxel's physical position.
    pub fn from_fn(geom: Geometry, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.physical_of(i))).collect();
        Image3D { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.index(i, j, k)]
    }

    /// Applies `f` voxelwise, keeping geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image3D {
        Image3D {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(geom: Geometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(geom.len(), data.len());
        Image3D { geom, data }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Sample at a physical point; positions outside the grid clamp to the edge.
    pub fn sample(&self, p: [f64; 3], interp: Interp) -> f64 {
        self.sample_index(self.geom.continuous_index(p), interp)
    }

    /// Sample at a continuous voxel index.
    #[inline]
    pub(crate) fn sample_index(&self, c: [f64; 3], interp: Interp) -> f64 {
        match interp {
            Interp::Nearest => {
                let [nx, ny, nz] = self.geom.dims;
                let r = |x: f64, n: usize| (x.round().max(0.0) as usize).min(n - 1);
                self.at(r(c[0], nx), r(c[1], ny), r(c[2], nz))
            }
            Interp::Linear => self.trilinear(c).0,
        }
    }

    /// Trilinear sample plus its exact spatial gradient (per mm). Gradient
    /// components are zero along axes where the point is clamped.
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        self.sample_with_gradient_index(self.geom.continuous_index(p))
    }

    #[inline]
    pub(crate) fn sample_with_gradient_index(&self, c: [f64; 3]) -> (f64, [f64; 3]) {
        let (v, g) = self.trilinear(c);
        (
            v,
            [
                g[0] / self.geom.spacing[0],
                g[1] / self.geom.spacing[1],
                g[2] / self.geom.spacing[2],
            ],
        )
    }

    /// Trilinear interpolation at a continuous index; gradient in index units.
    fn trilinear(&self, c: [f64; 3]) -> (f64, [f64; 3]) {
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut live = [true; 3];
        for a in 0..3 {
            let n = self.geom.dims[a];
            if n == 1 {
                live[a] = false;
                continue;
            }
            let hi = (n - 1) as f64;
            let x = c[a];
            if x <= 0.0 {
                live[a] = x == 0.0;
                base[a] = 0;
                t[a] = 0.0;
            } else if x >= hi {
                live[a] = x == hi;
                base[a] = n - 2;
                t[a] = 1.0;
            } else {
                let f = x.floor();
                base[a] = (f as usize).min(n - 2);
                t[a] = x - base[a] as f64;
            }
        }
        let [nx, ny, _] = self.geom.dims;
        let sx = usize::from(self.geom.dims[0] > 1);
        let sy = if self.geom.dims[1] > 1 { nx } else { 0 };
        let sz = if self.geom.dims[2] > 1 { nx * ny } else { 0 };
        let i0 = self.geom.index(base[0], base[1], base[2]);
        let d = &self.data;
        let c000 = d[i0];
        let c100 = d[i0 + sx];
        let c010 = d[i0 + sy];
        let c110 = d[i0 + sx + sy];
        let c001 = d[i0 + sz];
        let c101 = d[i0 + sx + sz];
        let c011 = d[i0 + sy + sz];
        let c111 = d[i0 + sx + sy + sz];
        let [tx, ty, tz] = t;
        // (1-t)a + tb is exact at both t = 0 and t = 1
        let lerp = |a: f64, b: f64, t: f64| (1.0 - t) * a + t * b;
        let c00 = lerp(c000, c100, tx);
        let c10 = lerp(c010, c110, tx);
        let c01 = lerp(c001, c101, tx);
        let c11 = lerp(c011, c111, tx);
        let c0 = lerp(c00, c10, ty);
        let c1 = lerp(c01, c11, ty);
        let v = lerp(c0, c1, tz);

        let mut g = [0.0; 3];
        if live[0] {
            let d00 = c100 - c000;
            let d10 = c110 - c010;
            let d01 = c101 - c001;
            let d11 = c111 - c011;
            let d0 = d00 + (d10 - d00) * ty;
            let d1 = d01 + (d11 - d01) * ty;
            g[0] = d0 + (d1 - d0) * tz;
        }
        if live[1] {
            g[1] = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * tz;
        }
        if live[2] {
            g[2] = c1 - c0;
        }
        (v, g)
    }

    /// Central-difference gradient per voxel in physical units (one-sided at borders).
    pub fn gradient(&self) -> Vec<[f64; 3]> {
        let g = &self.geom;
        let [nx, ny, nz] = g.dims;
        let mut out = vec![[0.0; 3]; g.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = g.index(i, j, k);
                    let ijk = [i, j, k];
                    for a in 0..3 {
                        let n = g.dims[a];
                        if n == 1 {
                            continue;
                        }
                        let stride = [1, nx, nx * ny][a];
                        let (lo, hi, div) = if ijk[a] == 0 {
                            (idx, idx + stride, 1.0)
                        } else if ijk[a] == n - 1 {
                            (idx - stride, idx, 1.0)
                        } else {
                            (idx - stride, idx + stride, 2.0)
                        };
                        out[idx][a] = (self.data[hi] - self.data[lo]) / (div * g.spacing[a]);
                    }
                }
            }
        }
        out
    }

    /// Copy of the voxels inside the index box `[lo, hi)`.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Image3D> {
        let geom = self.geom.sub_grid(lo, hi)?;
        let mut data = Vec::with_capacity(geom.len());
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    data.push(self.at(i, j, k));
                }
            }
        }
        Ok(Image3D { geom, data })
    }
}

impl Mask3D {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "mask voxel count {} != {}",
                data.len(),
                geom.len()
            )));
        }
        Ok(Mask3D { geom, data })
    }

    pub fn from_fn(geom: Geometry, f: impl Fn([f64; 3]) -> bool) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.physical_of(i))).collect();
        Mask3D { geom, data }
    }

    /// Foreground wherever `img > threshold`.
    pub fn threshold(img: &Image3D, threshold: f64) -> Self {
        Mask3D {
            geom: *img.geometry(),
            data: img.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geom.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Errors unless at least one voxel is set.
    pub fn ensure_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::Input(format!("{what}: mask is empty")))
        } else {
            Ok(())
        }
    }

    pub fn to_image(&self) -> Image3D {
        Image3D {
            geom: self.geom,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Centroid of foreground voxels in physical mm.
    pub fn centroid(&self) -> Result<[f64; 3]> {
        self.ensure_nonempty("centroid")?;
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (idx, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let p = self.geom.physical_of(idx);
            for a in 0..3 {
                acc[a] += p[a];
            }
            n += 1;
        }
        Ok(acc.map(|s| s / n as f64))
    }

    /// Index box `[lo, hi)` of the foreground dilated by `margin_mm`, clipped to the grid.
    pub fn bounding_box(&self, margin_mm: f64) -> Result<([usize; 3], [usize; 3])> {
        self.ensure_nonempty("bounding box")?;
        let mut lo = self.geom.dims;
        let mut hi = [0usize; 3];
        for (idx, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.geom.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
        for a in 0..3 {
            let pad = (margin_mm / self.geom.spacing[a]).ceil().max(0.0) as usize;
            lo[a] = lo[a].saturating_sub(pad);
            hi[a] = (hi[a] + pad).min(self.geom.dims[a]);
        }
        Ok((lo, hi))
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Mask3D> {
        let geom = self.geom.sub_grid(lo, hi)?;
        let mut data = Vec::with_capacity(geom.len());
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    data.push(self.at(i, j, k));
                }
            }
        }
        Ok(Mask3D { geom, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image3D {
        let g = Geometry::new([5, 4, 3], [1.0, 2.0, 0.5], [1.0, -2.0, 0.0]).unwrap();
        Image3D::from_fn(g, |p| 2.0 * p[0] - 3.0 * p[1] + 4.0 * p[2] + 1.0)
    }

    #[test]
    fn rejects_bad_geometry_and_nan() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Geometry::cube(2, 1.0).unwrap();
        assert!(Image3D::new(g, vec![0.0; 7]).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f64::NAN;
        assert!(Image3D::new(g, d).is_err());
    }

    #[test]
    fn trilinear_reproduces_affine_function_and_gradient() {
        let img = ramp();
        let (v, g) = img.sample_with_gradient([2.3, -0.7, 0.6]);
        assert!((v - (2.0 * 2.3 + 3.0 * 0.7 + 4.0 * 0.6 + 1.0)).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 3.0).abs() < 1e-12);
        assert!((g[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_clamps_outside_the_grid() {
        let img = ramp();
        let inside = img.sample([1.0, -2.0, 0.0], Interp::Linear);
        let outside = img.sample([-10.0, -20.0, -5.0], Interp::Linear);
        assert_eq!(inside, outside);
        let (_, g) = img.sample_with_gradient([-10.0, 0.0, 0.5]);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn central_gradient_exact_on_affine_image() {
        let img = ramp();
        for g in img.gradient() {
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 3.0).abs() < 1e-9 && (g[2] - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_centroid_and_bbox() {
        let g = Geometry::new([10, 10, 10], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut d = vec![false; g.len()];
        d[g.index(3, 4, 5)] = true;
        let m = Mask3D::new(g, d).unwrap();
        assert_eq!(m.centroid().unwrap(), [6.0, 4.0, 5.0]);
        let (lo, hi) = m.bounding_box(2.0).unwrap();
        assert_eq!(lo, [2, 2, 3]);
        assert_eq!(hi, [5, 7, 8]);
        let empty = Mask3D::new(g, vec![false; g.len()]).unwrap();
        assert!(empty.centroid().is_err());
    }
}
