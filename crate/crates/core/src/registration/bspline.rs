//! Uniform cubic B-spline control lattices over an image grid.
//!
//! Control point `j` along an axis sits at `origin + (j - 1) * mesh`, so a
//! lattice with `c` cells carries `c + 3` control points and every voxel
//! sees a full 4-point support. All lattice operators are separable and are
//! applied one axis at a time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::Geometry;

/// Cubic B-spline basis weights at fractional position `t` within a cell.
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// First derivative of [`cubic_weights`] with respect to `t`.
#[inline]
pub fn cubic_weights_d1(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let u = 1.0 - t;
    [-0.5 * u * u, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2]
}

/// Second derivative of [`cubic_weights`] with respect to `t`.
#[inline]
pub fn cubic_weights_d2(t: f64) -> [f64; 4] {
    [1.0 - t, 3.0 * t - 2.0, -3.0 * t + 1.0, t]
}

/// Cubic B-spline kernel centred at 0 (support `(-2, 2)`).
#[inline]
pub fn beta3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`beta3`].
#[inline]
pub fn beta3_d1(x: f64) -> f64 {
    let a = x.abs();
    let s = x.signum();
    if a < 1.0 {
        s * (-2.0 * a + 1.5 * a * a)
    } else if a < 2.0 {
        let b = 2.0 - a;
        -s * 0.5 * b * b
    } else {
        0.0
    }
}

/// Per-axis mapping from voxels to their four supporting control points.
#[derive(Clone, Debug)]
struct AxisBasis {
    n_ctrl: usize,
    first: Vec<usize>,
    weights: Vec<[f64; 4]>,
    /// Inverse of the Gram matrix `B^T B` for least-squares fitting.
    gram_inv: DMatrix<f64>,
    /// `int B_a^(d) B_b^(d)` over the axis extent, for d = 0, 1, 2.
    sobolev: [DMatrix<f64>; 3],
    extent: f64,
}

impl AxisBasis {
    fn new(n_vox: usize, spacing: f64, mesh: f64) -> Self {
        let extent = (n_vox - 1) as f64 * spacing;
        let cells = ((extent / mesh) - 1e-9).ceil().max(1.0) as usize;
        let n_ctrl = cells + 3;
        let mut first = Vec::with_capacity(n_vox);
        let mut weights = Vec::with_capacity(n_vox);
        for i in 0..n_vox {
            let u = i as f64 * spacing / mesh;
            let cell = (u.floor() as usize).min(cells - 1);
            first.push(cell);
            weights.push(cubic_weights(u - cell as f64));
        }
        let mut gram = DMatrix::<f64>::zeros(n_ctrl, n_ctrl);
        for (f, w) in first.iter().zip(&weights) {
            for a in 0..4 {
                for b in 0..4 {
                    gram[(f + a, f + b)] += w[a] * w[b];
                }
            }
        }
        let ridge = 1e-12 * (0..n_ctrl).map(|i| gram[(i, i)]).sum::<f64>() / n_ctrl as f64;
        for i in 0..n_ctrl {
            gram[(i, i)] += ridge;
        }
        let gram_inv = gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| gram.try_inverse())
            .expect("B-spline Gram matrix is positive definite after ridge");
        let sobolev = Self::sobolev_grams(n_ctrl, cells, mesh, extent);
        AxisBasis {
            n_ctrl,
            first,
            weights,
            gram_inv,
            sobolev,
            extent,
        }
    }

    /// 4-point Gauss-Legendre quadrature per cell (exact for the degree-6
    /// products involved).
    fn sobolev_grams(n_ctrl: usize, cells: usize, mesh: f64, extent: f64) -> [DMatrix<f64>; 3] {
        let mut out = [
            DMatrix::zeros(n_ctrl, n_ctrl),
            DMatrix::zeros(n_ctrl, n_ctrl),
            DMatrix::zeros(n_ctrl, n_ctrl),
        ];
        if extent <= 0.0 {
            let w = cubic_weights(0.0);
            for a in 0..4 {
                for b in 0..4 {
                    out[0][(a, b)] = w[a] * w[b];
                }
            }
            return out;
        }
        const NODES: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const WEIGHTS: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        for cell in 0..cells {
            let x0 = cell as f64 * mesh;
            let x1 = ((cell + 1) as f64 * mesh).min(extent);
            if x1 <= x0 {
                continue;
            }
            let half = 0.5 * (x1 - x0);
            let mid = 0.5 * (x1 + x0);
            for (node, qw) in NODES.iter().zip(WEIGHTS) {
                let x = mid + half * node;
                let t = x / mesh - cell as f64;
                let basis = [
                    cubic_weights(t),
                    cubic_weights_d1(t).map(|v| v / mesh),
                    cubic_weights_d2(t).map(|v| v / (mesh * mesh)),
                ];
                for (d, w) in basis.iter().enumerate() {
                    for a in 0..4 {
                        for b in 0..4 {
                            out[d][(cell + a, cell + b)] += qw * half * w[a] * w[b];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Applies `f(line_in, line_out)` to every line along `axis`, changing that
/// axis' length from `dims[axis]` to `new_len`.
fn map_lines(
    data: &[[f64; 3]],
    dims: [usize; 3],
    axis: usize,
    new_len: usize,
    f: impl Fn(&[[f64; 3]], &mut [[f64; 3]]),
) -> Vec<[f64; 3]> {
    let mut out_dims = dims;
    out_dims[axis] = new_len;
    let n_in = dims[axis];
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    let out_stride = [1, out_dims[0], out_dims[0] * out_dims[1]][axis];
    let mut out = vec![[0.0; 3]; out_dims[0] * out_dims[1] * out_dims[2]];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut line_in = vec![[0.0; 3]; n_in];
    let mut line_out = vec![[0.0; 3]; new_len];
    for b in 0..dims[o2] {
        for a in 0..dims[o1] {
            let mut pos_in = [0usize; 3];
            pos_in[o1] = a;
            pos_in[o2] = b;
            let base_in = pos_in[0] + dims[0] * (pos_in[1] + dims[1] * pos_in[2]);
            let base_out = pos_in[0] + out_dims[0] * (pos_in[1] + out_dims[1] * pos_in[2]);
            for (t, v) in line_in.iter_mut().enumerate() {
                *v = data[base_in + t * in_stride];
            }
            line_out.iter_mut().for_each(|v| *v = [0.0; 3]);
            f(&line_in, &mut line_out);
            for (t, v) in line_out.iter().enumerate() {
                out[base_out + t * out_stride] = *v;
            }
        }
    }
    out
}

fn apply_dense(m: &DMatrix<f64>, line_in: &[[f64; 3]], line_out: &mut [[f64; 3]]) {
    for (r, out) in line_out.iter_mut().enumerate() {
        let mut acc = [0.0; 3];
        for (c, v) in line_in.iter().enumerate() {
            let w = m[(r, c)];
            if w != 0.0 {
                acc[0] += w * v[0];
                acc[1] += w * v[1];
                acc[2] += w * v[2];
            }
        }
        *out = acc;
    }
}

/// Control lattice of mesh spacing `mesh` (mm) covering an image grid.
#[derive(Clone, Debug)]
pub struct BSplineLattice {
    image: Geometry,
    mesh: f64,
    axes: [AxisBasis; 3],
}

impl BSplineLattice {
    pub fn new(image: Geometry, mesh: f64) -> Result<Self> {
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(Error::Config(format!("B-spline mesh spacing must be > 0, got {mesh}")));
        }
        let axes = [0, 1, 2].map(|a| AxisBasis::new(image.dims[a], image.spacing[a], mesh));
        Ok(BSplineLattice { image, mesh, axes })
    }

    pub fn image_geometry(&self) -> &Geometry {
        &self.image
    }

    pub fn mesh_spacing(&self) -> f64 {
        self.mesh
    }

    pub fn ctrl_dims(&self) -> [usize; 3] {
        [self.axes[0].n_ctrl, self.axes[1].n_ctrl, self.axes[2].n_ctrl]
    }

    pub fn n_ctrl(&self) -> usize {
        self.ctrl_dims().iter().product()
    }

    pub fn ctrl_index(&self, i: usize, j: usize, k: usize) -> usize {
        let d = self.ctrl_dims();
        i + d[0] * (j + d[1] * k)
    }

    /// Dense displacement `B c` on the image grid.
    pub fn evaluate(&self, coeffs: &[[f64; 3]]) -> Vec<[f64; 3]> {
        assert_eq!(coeffs.len(), self.n_ctrl());
        let mut dims = self.ctrl_dims();
        let mut data = coeffs.to_vec();
        for axis in 0..3 {
            let basis = &self.axes[axis];
            let n_vox = self.image.dims[axis];
            data = map_lines(&data, dims, axis, n_vox, |cin, vout| {
                for (i, out) in vout.iter_mut().enumerate() {
                    let f = basis.first[i];
                    let w = &basis.weights[i];
                    let mut acc = [0.0; 3];
                    for t in 0..4 {
                        let c = &cin[f + t];
                        acc[0] += w[t] * c[0];
                        acc[1] += w[t] * c[1];
                        acc[2] += w[t] * c[2];
                    }
                    *out = acc;
                }
            });
            dims[axis] = n_vox;
        }
        data
    }

    /// Adjoint `B^T f`: scatters a dense voxel field onto the control lattice.
    pub fn adjoint(&self, dense: &[[f64; 3]]) -> Vec<[f64; 3]> {
        assert_eq!(dense.len(), self.image.len());
        let mut dims = self.image.dims;
        let mut data = dense.to_vec();
        for axis in 0..3 {
            let basis = &self.axes[axis];
            data = map_lines(&data, dims, axis, basis.n_ctrl, |vin, cout| {
                for (i, v) in vin.iter().enumerate() {
                    let f = basis.first[i];
                    let w = &basis.weights[i];
                    for t in 0..4 {
                        let c = &mut cout[f + t];
                        c[0] += w[t] * v[0];
                        c[1] += w[t] * v[1];
                        c[2] += w[t] * v[2];
                    }
                }
            });
            dims[axis] = basis.n_ctrl;
        }
        data
    }

    /// Least-squares projection of a dense field onto the lattice:
    /// `c = (B^T B)^-1 B^T f`.
    pub fn fit(&self, dense: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut data = self.adjoint(dense);
        let dims = self.ctrl_dims();
        for axis in 0..3 {
            let m = &self.axes[axis].gram_inv;
            data = map_lines(&data, dims, axis, dims[axis], |cin, cout| apply_dense(m, cin, cout));
        }
        data
    }

    /// Applies a Kronecker product of per-axis lattice matrices.
    fn kron_apply(&self, mats: [&DMatrix<f64>; 3], coeffs: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let dims = self.ctrl_dims();
        let mut data = coeffs.to_vec();
        for (axis, m) in mats.iter().enumerate() {
            data = map_lines(&data, dims, axis, dims[axis], |cin, cout| apply_dense(m, cin, cout));
        }
        data
    }

    fn domain_volume(&self) -> f64 {
        self.axes.iter().map(|a| if a.extent > 0.0 { a.extent } else { 1.0 }).product()
    }

    /// Bending energy `(1/V) int sum_c (u_xx^2 + u_yy^2 + u_zz^2 + 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2)`
    /// and its gradient with respect to the coefficients.
    pub fn bending_energy(&self, coeffs: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
        const TERMS: [([usize; 3], f64); 6] = [
            ([2, 0, 0], 1.0),
            ([0, 2, 0], 1.0),
            ([0, 0, 2], 1.0),
            ([1, 1, 0], 2.0),
            ([1, 0, 1], 2.0),
            ([0, 1, 1], 2.0),
        ];
        let vol = self.domain_volume();
        let mut grad = vec![[0.0; 3]; coeffs.len()];
        for (orders, weight) in TERMS {
            let mats = [0, 1, 2].map(|a| &self.axes[a].sobolev[orders[a]]);
            let kc = self.kron_apply(mats, coeffs);
            for (g, v) in grad.iter_mut().zip(&kc) {
                for d in 0..3 {
                    g[d] += weight * v[d];
                }
            }
        }
        let energy: f64 = coeffs
            .iter()
            .zip(&grad)
            .map(|(c, g)| c[0] * g[0] + c[1] * g[1] + c[2] * g[2])
            .sum::<f64>()
            / vol;
        grad.iter_mut().for_each(|g| *g = g.map(|v| 2.0 * v / vol));
        (energy, grad)
    }
}

/// A lattice together with its coefficients.
#[derive(Clone, Debug)]
pub struct BSplineGrid {
    pub lattice: BSplineLattice,
    pub coeffs: Vec<[f64; 3]>,
}

impl BSplineGrid {
    pub fn zeros(lattice: BSplineLattice) -> Self {
        let n = lattice.n_ctrl();
        BSplineGrid {
            lattice,
            coeffs: vec![[0.0; 3]; n],
        }
    }

    /// Spline order of the basis.
    pub const ORDER: usize = 3;

    pub fn evaluate(&self) -> Vec<[f64; 3]> {
        self.lattice.evaluate(&self.coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity_and_match_kernel() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let w = cubic_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(cubic_weights_d1(t).iter().sum::<f64>().abs() < 1e-14);
            assert!(cubic_weights_d2(t).iter().sum::<f64>().abs() < 1e-14);
            for (m, wm) in w.iter().enumerate() {
                assert!((wm - beta3(t + 1.0 - m as f64)).abs() < 1e-14);
            }
        }
        // derivative kernel vs finite differences
        for x in [-1.7, -0.6, 0.0, 0.3, 1.2, 1.99] {
            let h = 1e-6;
            let fd = (beta3(x + h) - beta3(x - h)) / (2.0 * h);
            assert!((fd - beta3_d1(x)).abs() < 1e-8, "x={x}");
        }
    }

    fn geom() -> Geometry {
        Geometry::new([17, 13, 11], [2.0, 2.5, 3.0], [-5.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn fit_reproduces_cubic_polynomials() {
        let g = geom();
        let lat = BSplineLattice::new(g, 8.0).unwrap();
        let f = |p: [f64; 3]| {
            let x = p[0] / 10.0;
            let y = p[1] / 10.0;
            let z = p[2] / 10.0;
            [x * x * x - y, x * y * z + 2.0, z * z]
        };
        let dense: Vec<_> = (0..g.len()).map(|i| f(g.physical_of(i))).collect();
        let back = lat.evaluate(&lat.fit(&dense));
        for (a, b) in dense.iter().zip(&back) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-7, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn adjoint_is_transpose_of_evaluate() {
        let g = geom();
        let lat = BSplineLattice::new(g, 9.0).unwrap();
        let c: Vec<[f64; 3]> = (0..lat.n_ctrl()).map(|i| [(i as f64).sin(), (i as f64 * 0.3).cos(), 0.1 * i as f64]).collect();
        let v: Vec<[f64; 3]> = (0..g.len()).map(|i| [(i as f64 * 0.7).cos(), 1.0, (i as f64).sqrt()]).collect();
        let bc = lat.evaluate(&c);
        let btv = lat.adjoint(&v);
        let lhs: f64 = bc.iter().zip(&v).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let rhs: f64 = c.iter().zip(&btv).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn bending_energy_closed_forms() {
        let g = Geometry::new([21, 21, 21], [1.0; 3], [0.0; 3]).unwrap();
        let lat = BSplineLattice::new(g, 5.0).unwrap();
        let affine: Vec<_> = (0..g.len())
            .map(|i| {
                let p = g.physical_of(i);
                [0.1 * p[0] - 0.2 * p[2], 0.3 * p[1], 1.0]
            })
            .collect();
        let (e, _) = lat.bending_energy(&lat.fit(&affine));
        assert!(e.abs() < 1e-10, "affine bending energy {e}");
        // u_x = x^2 -> u_xx = 2 everywhere, energy density 4
        let quad: Vec<_> = (0..g.len()).map(|i| [g.physical_of(i)[0].powi(2), 0.0, 0.0]).collect();
        let (e, _) = lat.bending_energy(&lat.fit(&quad));
        assert!((e - 4.0).abs() < 1e-6, "quadratic bending energy {e}");
        // u_x = x*y -> u_xy = 1, density 2
        let mixed: Vec<_> = (0..g.len()).map(|i| {
            let p = g.physical_of(i);
            [p[0] * p[1], 0.0, 0.0]
        }).collect();
        let (e, _) = lat.bending_energy(&lat.fit(&mixed));
        assert!((e - 2.0).abs() < 1e-6, "mixed bending energy {e}");
    }

    #[test]
    fn bending_energy_gradient_matches_finite_differences() {
        let g = Geometry::cube(9, 1.0).unwrap();
        let lat = BSplineLattice::new(g, 3.0).unwrap();
        let c: Vec<[f64; 3]> = (0..lat.n_ctrl()).map(|i| [(i as f64 * 1.3).sin(), (i as f64 * 0.4).cos(), 0.0]).collect();
        let (_, grad) = lat.bending_energy(&c);
        for &(idx, d) in &[(5usize, 0usize), (40, 1), (77, 0)] {
            let h = 1e-5;
            let mut cp = c.clone();
            cp[idx][d] += h;
            let mut cm = c.clone();
            cm[idx][d] -= h;
            let fd = (lat.bending_energy(&cp).0 - lat.bending_energy(&cm).0) / (2.0 * h);
            assert!((fd - grad[idx][d]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
