use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel grid placement in physical space (axis-aligned, x-fastest storage).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// mm per voxel.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Config(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    /// Isotropic grid at the origin.
    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn physical(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn physical_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.physical(i, j, k)
    }

    /// Continuous voxel index of a physical point. Indices within 1e-9 of an
    /// integer snap to it so grid points round-trip exactly.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let c = (p[a] - self.origin[a]) / self.spacing[a];
            let r = c.round();
            if (c - r).abs() < 1e-9 {
                r
            } else {
                c
            }
        })
    }

    /// Maps every voxel `f(flat index, [i, j, k])` in storage order; slices
    /// run in parallel, the output order is fixed.
    pub(crate) fn par_map<T: Send + Copy + Default>(&self, f: impl Fn(usize, [usize; 3]) -> T + Sync) -> Vec<T> {
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        let mut out = vec![T::default(); self.len()];
        out.par_chunks_mut(slab).enumerate().for_each(|(k, chunk)| {
            let mut idx = k * slab;
            for j in 0..ny {
                for (i, o) in chunk[j * nx..(j + 1) * nx].iter_mut().enumerate() {
                    *o = f(idx, [i, j, k]);
                    idx += 1;
                }
            }
        });
        out
    }

    /// Physical extent covered by voxel centers, per axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Equality up to floating-point noise in spacing/origin.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-9 * self.spacing[a].abs().max(1.0)
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-9 * self.origin[a].abs().max(1.0)
            })
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: geometry {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Sub-grid covering voxel index box `[lo, hi)` per axis.
    pub fn sub_grid(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Geometry> {
        let dims = [0, 1, 2].map(|a| hi[a].saturating_sub(lo[a]));
        let origin = [0, 1, 2].map(|a| self.origin[a] + lo[a] as f64 * self.spacing[a]);
        Geometry::new(dims, self.spacing, origin)
    }
}
