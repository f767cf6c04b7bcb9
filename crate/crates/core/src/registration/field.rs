use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Geometry, Image3D, Interp, Mask3D};

/// Dense displacement field in mm: fixed-image point `x` maps to `x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    geom: Geometry,
    vectors: Vec<[f64; 3]>,
}

/// Corner indices and weights of a clamped trilinear stencil.
#[derive(Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    #[inline]
    pub(crate) fn at_index(geom: &Geometry, c: [f64; 3]) -> Stencil {
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = geom.dims[a];
            if n == 1 {
                continue;
            }
            let x = c[a].clamp(0.0, (n - 1) as f64);
            let b = (x.floor() as usize).min(n - 2);
            base[a] = b;
            t[a] = x - b as f64;
        }
        let [nx, ny, _] = geom.dims;
        let sx = usize::from(geom.dims[0] > 1);
        let sy = if geom.dims[1] > 1 { nx } else { 0 };
        let sz = if geom.dims[2] > 1 { nx * ny } else { 0 };
        let i0 = geom.index(base[0], base[1], base[2]);
        let [tx, ty, tz] = t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        Stencil {
            idx: [
                i0,
                i0 + sx,
                i0 + sy,
                i0 + sx + sy,
                i0 + sz,
                i0 + sx + sz,
                i0 + sy + sz,
                i0 + sx + sy + sz,
            ],
            w: [
                ux * uy * uz,
                tx * uy * uz,
                ux * ty * uz,
                tx * ty * uz,
                ux * uy * tz,
                tx * uy * tz,
                ux * ty * tz,
                tx * ty * tz,
            ],
        }
    }
}

impl DeformationField {
    pub fn new(geom: Geometry, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != geom.len() {
            return Err(Error::Shape(format!(
                "field has {} vectors for {} voxels",
                vectors.len(),
                geom.len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite displacement".into()));
        }
        Ok(DeformationField { geom, vectors })
    }

    pub(crate) fn from_parts_unchecked(geom: Geometry, vectors: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(geom.len(), vectors.len());
        DeformationField { geom, vectors }
    }

    pub fn zeros(geom: Geometry) -> Self {
        DeformationField {
            geom,
            vectors: vec![[0.0; 3]; geom.len()],
        }
    }

    pub fn constant(geom: Geometry, u: [f64; 3]) -> Self {
        DeformationField {
            geom,
            vectors: vec![u; geom.len()],
        }
    }

    /// Evaluates `f` at each voxel's physical position.
    pub fn from_fn(geom: Geometry, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        let vectors = (0..geom.len()).into_par_iter().map(|i| f(geom.physical_of(i))).collect();
        DeformationField { geom, vectors }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<[f64; 3]> {
        self.vectors
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().flatten().all(|v| v.is_finite())
    }

    /// Trilinear, edge-clamped displacement at a physical point.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        self.sample_index(self.geom.continuous_index(p))
    }

    /// Trilinear, edge-clamped displacement at a continuous voxel index.
    #[inline]
    pub(crate) fn sample_index(&self, c: [f64; 3]) -> [f64; 3] {
        let s = Stencil::at_index(&self.geom, c);
        let mut out = [0.0; 3];
        for c in 0..8 {
            let v = &self.vectors[s.idx[c]];
            let w = s.w[c];
            out[0] += w * v[0];
            out[1] += w * v[1];
            out[2] += w * v[2];
        }
        out
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean displacement over the masked voxels (all voxels when `mask` is `None`).
    pub fn mean_vector(&self, mask: Option<&Mask3D>) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (i, v) in self.vectors.iter().enumerate() {
            if mask.is_none_or(|m| m.data()[i]) {
                for a in 0..3 {
                    acc[a] += v[a];
                }
                n += 1;
            }
        }
        acc.map(|s| s / n.max(1) as f64)
    }

    pub fn scaled(&self, s: f64) -> DeformationField {
        DeformationField {
            geom: self.geom,
            vectors: self.vectors.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect(),
        }
    }

    /// `out(x) = img(x + u(x))`, edge-clamped.
    pub fn warp(&self, img: &Image3D, interp: Interp) -> Image3D {
        let g = self.geom;
        let data = if img.geometry() == &g {
            let inv = g.spacing.map(|s| 1.0 / s);
            g.par_map(|idx, ijk| {
                let u = self.vectors[idx];
                img.sample_index([0, 1, 2].map(|a| ijk[a] as f64 + u[a] * inv[a]), interp)
            })
        } else {
            g.par_map(|idx, ijk| {
                let p = g.physical(ijk[0], ijk[1], ijk[2]);
                let u = self.vectors[idx];
                img.sample([p[0] + u[0], p[1] + u[1], p[2] + u[2]], interp)
            })
        };
        Image3D::new(g, data).expect("warp of finite image stays finite")
    }

    /// Warps a mask by linear interpolation of its indicator, thresholded at 0.5.
    pub fn warp_mask(&self, mask: &Mask3D) -> Mask3D {
        let warped = self.warp(&mask.to_image(), Interp::Linear);
        Mask3D::new(self.geom, warped.data().iter().map(|&v| v >= 0.5).collect()).unwrap()
    }

    /// Nearest-neighbour warp of a mask (no thresholding involved).
    pub fn warp_mask_nearest(&self, mask: &Mask3D) -> Mask3D {
        let warped = self.warp(&mask.to_image(), Interp::Nearest);
        Mask3D::new(self.geom, warped.data().iter().map(|&v| v > 0.5).collect()).unwrap()
    }

    /// Composition that applies `self` first, then `next`:
    /// `x -> x + u(x) + v(x + u(x))`, on `self`'s grid.
    pub fn then(&self, next: &DeformationField) -> DeformationField {
        let g = self.geom;
        let vectors = if next.geom == g {
            let inv = g.spacing.map(|s| 1.0 / s);
            g.par_map(|idx, ijk| {
                let u = self.vectors[idx];
                let v = next.sample_index([0, 1, 2].map(|a| ijk[a] as f64 + u[a] * inv[a]));
                [u[0] + v[0], u[1] + v[1], u[2] + v[2]]
            })
        } else {
            g.par_map(|idx, ijk| {
                let p = g.physical(ijk[0], ijk[1], ijk[2]);
                let u = self.vectors[idx];
                let v = next.sample([p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
                [u[0] + v[0], u[1] + v[1], u[2] + v[2]]
            })
        };
        DeformationField { geom: g, vectors }
    }

    /// Group exponential of a stationary velocity field by scaling and squaring.
    pub fn exp(velocity: &DeformationField, squarings: u32) -> DeformationField {
        let mut phi = velocity.scaled(1.0 / f64::from(1u32 << squarings));
        for _ in 0..squarings {
            phi = phi.then(&phi);
        }
        phi
    }

    /// Numerical inverse by fixed-point iteration `w(y) = -u(y + w(y))`.
    pub fn invert(&self, iterations: usize) -> DeformationField {
        let g = self.geom;
        let inv = g.spacing.map(|s| 1.0 / s);
        let vectors = g.par_map(|idx, ijk| {
            let u0 = self.vectors[idx];
            let mut w = [-u0[0], -u0[1], -u0[2]];
            for _ in 0..iterations {
                let u = self.sample_index([0, 1, 2].map(|a| ijk[a] as f64 + w[a] * inv[a]));
                w = [-u[0], -u[1], -u[2]];
            }
            w
        });
        DeformationField { geom: g, vectors }
    }

    /// Resamples the displacement vectors onto another grid (linear).
    pub fn resample(&self, target: &Geometry) -> DeformationField {
        if &self.geom == target {
            return self.clone();
        }
        let vectors = (0..target.len())
            .into_par_iter()
            .map(|i| self.sample(target.physical_of(i)))
            .collect();
        DeformationField {
            geom: *target,
            vectors,
        }
    }

    /// Places this field into a larger grid whose voxel `offset` holds our
    /// voxel (0,0,0); voxels outside our box get zero displacement.
    pub fn embed(&self, full: &Geometry, offset: [usize; 3]) -> DeformationField {
        let mut vectors = vec![[0.0; 3]; full.len()];
        let [nx, ny, nz] = self.geom.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let dst = full.index(i + offset[0], j + offset[1], k + offset[2]);
                    vectors[dst] = self.vectors[self.geom.index(i, j, k)];
                }
            }
        }
        DeformationField {
            geom: *full,
            vectors,
        }
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<DeformationField> {
        let geom = self.geom.sub_grid(lo, hi)?;
        let mut vectors = Vec::with_capacity(geom.len());
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    vectors.push(self.vectors[self.geom.index(i, j, k)]);
                }
            }
        }
        Ok(DeformationField { geom, vectors })
    }

    /// Local Jacobian matrices `A = I + grad u` (row = component, column =
    /// derivative axis), central differences in mm, one-sided at borders.
    pub fn jacobian_matrices(&self) -> Vec<[[f64; 3]; 3]> {
        let g = self.geom;
        let [nx, ny, _] = g.dims;
        (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let ijk = g.coords(idx);
                let mut a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                for ax in 0..3 {
                    let n = g.dims[ax];
                    if n == 1 {
                        continue;
                    }
                    let stride = [1, nx, nx * ny][ax];
                    let (lo, hi, div) = fd_pair(idx, ijk[ax], n, stride);
                    let h = div * g.spacing[ax];
                    for (r, row) in a.iter_mut().enumerate() {
                        row[ax] += (self.vectors[hi][r] - self.vectors[lo][r]) / h;
                    }
                }
                a
            })
            .collect()
    }

    /// `mean ||(phi o phi_inv)(y) - y||` over the grid, in mm.
    pub fn inverse_consistency_error(&self, inverse: &DeformationField) -> f64 {
        let composed = inverse.then(self);
        let total: f64 = composed
            .vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .sum();
        total / composed.vectors.len() as f64
    }

    /// Mean Euclidean distance to another field on the same grid, in mm.
    pub fn mean_distance(&self, other: &DeformationField) -> Result<f64> {
        self.geom.ensure_matches(&other.geom, "field distance")?;
        let total: f64 = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum();
        Ok(total / self.vectors.len() as f64)
    }

    /// Shifts the displacement by a constant vector.
    pub fn plus_constant(&self, t: [f64; 3]) -> DeformationField {
        DeformationField {
            geom: self.geom,
            vectors: self.vectors.iter().map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]]).collect(),
        }
    }
}

/// Finite-difference neighbours along one axis: `(lo, hi, divisor)`.
#[inline]
pub(crate) fn fd_pair(idx: usize, pos: usize, n: usize, stride: usize) -> (usize, usize, f64) {
    if pos == 0 {
        (idx, idx + stride, 1.0)
    } else if pos == n - 1 {
        (idx - stride, idx, 1.0)
    } else {
        (idx - stride, idx + stride, 2.0)
    }
}

pub(crate) fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}
