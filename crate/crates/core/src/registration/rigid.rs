use crate::error::Result;
use crate::image::Mask3D;

use super::field::{det3, fd_pair, DeformationField};

/// Translation (mm) that superimposes the moving mask's centroid onto the
/// fixed mask's centroid: `centroid(moving) - centroid(fixed)`.
pub fn rigid_center_align(fixed_mask: &Mask3D, moving_mask: &Mask3D) -> Result<[f64; 3]> {
    let f = fixed_mask.centroid()?;
    let m = moving_mask.centroid()?;
    Ok([m[0] - f[0], m[1] - f[1], m[2] - f[2]])
}

/// Per-voxel rigidity residual `||A^T A - I||_F^2 + (det A - 1)^2` and its
/// derivative with respect to `A`.
fn local_penalty(a: &[[f64; 3]; 3]) -> (f64, [[f64; 3]; 3]) {
    // E = A^T A - I
    let mut e = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            e[i][j] = (0..3).map(|k| a[k][i] * a[k][j]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
        }
    }
    let det = det3(a);
    let ortho: f64 = e.iter().flatten().map(|v| v * v).sum();
    let value = ortho + (det - 1.0).powi(2);
    // d||E||^2/dA = 4 A E ; d(det-1)^2/dA = 2 (det-1) cof(A)
    let cof = [
        [
            a[1][1] * a[2][2] - a[1][2] * a[2][1],
            a[1][2] * a[2][0] - a[1][0] * a[2][2],
            a[1][0] * a[2][1] - a[1][1] * a[2][0],
        ],
        [
            a[0][2] * a[2][1] - a[0][1] * a[2][2],
            a[0][0] * a[2][2] - a[0][2] * a[2][0],
            a[0][1] * a[2][0] - a[0][0] * a[2][1],
        ],
        [
            a[0][1] * a[1][2] - a[0][2] * a[1][1],
            a[0][2] * a[1][0] - a[0][0] * a[1][2],
            a[0][0] * a[1][1] - a[0][1] * a[1][0],
        ],
    ];
    let mut g = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let ae: f64 = (0..3).map(|k| a[r][k] * e[k][c]).sum();
            g[r][c] = 4.0 * ae + 2.0 * (det - 1.0) * cof[r][c];
        }
    }
    (value, g)
}

/// Mean over the mask of the local rigidity residual of `x -> x + u(x)`;
/// zero exactly where the transform is locally a proper rotation.
pub fn rigidity_penalty(field: &DeformationField, mask: &Mask3D) -> Result<f64> {
    Ok(rigidity_penalty_with_gradient(field, mask)?.0)
}

/// Penalty plus its gradient with respect to every voxel displacement.
pub fn rigidity_penalty_with_gradient(field: &DeformationField, mask: &Mask3D) -> Result<(f64, Vec<[f64; 3]>)> {
    let g = *field.geometry();
    g.ensure_matches(mask.geometry(), "rigidity penalty")?;
    let n = mask.count();
    let mut grad = vec![[0.0; 3]; g.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let jac = field.jacobian_matrices();
    let [nx, ny, _] = g.dims;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for (idx, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
        let (value, d_a) = local_penalty(&jac[idx]);
        total += value;
        // adjoint of the finite-difference stencil used for A
        let ijk = g.coords(idx);
        for ax in 0..3 {
            let n_ax = g.dims[ax];
            if n_ax == 1 {
                continue;
            }
            let stride = [1, nx, nx * ny][ax];
            let (lo, hi, div) = fd_pair(idx, ijk[ax], n_ax, stride);
            let h = div * g.spacing[ax];
            for r in 0..3 {
                let w = d_a[r][ax] * inv_n / h;
                grad[hi][r] += w;
                grad[lo][r] -= w;
            }
        }
    }
    Ok((total * inv_n, grad))
}
