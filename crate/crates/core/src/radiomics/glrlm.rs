//! Gray-level run-length matrices and their statistics.

use nalgebra::DMatrix;

use super::QuantizedRoi;
use crate::error::{Error, Result};

pub const GLRLM_FEATURE_NAMES: [&str; 11] = [
    "Short Run",
    "Long Run",
    "Grey Level Nonuniformity",
    "Run Length Nonuniformity",
    "Run Percentage",
    "Low Grey Level",
    "High Grey Level",
    "Short Run Low Grey Level",
    "Short Run High Grey Level",
    "Long Run Low Grey Level",
    "Long Run High Grey Level",
];

/// Run-length counts along `direction`: entry `(g - 1, len - 1)` counts the
/// maximal runs of gray level `g` with length `len`. Runs stop at the mask
/// boundary. Columns cover the longest possible run on the grid.
pub fn glrlm(q: &QuantizedRoi, direction: [i64; 3]) -> Result<DMatrix<f64>> {
    if direction == [0, 0, 0] || direction.iter().any(|c| c.abs() > 1) {
        return Err(Error::Input(format!("run direction must be a unit step, got {direction:?}")));
    }
    let max_run = q.dims.iter().copied().max().unwrap_or(1).max(1);
    let mut m = DMatrix::<f64>::zeros(q.n_bins, max_run);
    let step = |p: [i64; 3], s: i64| [p[0] + s * direction[0], p[1] + s * direction[1], p[2] + s * direction[2]];
    for k in 0..q.dims[2] {
        for j in 0..q.dims[1] {
            for i in 0..q.dims[0] {
                let g = q.labels[q.index(i, j, k)];
                let p = [i as i64, j as i64, k as i64];
                if g == 0 || q.label_at(step(p, -1)) == g {
                    continue;
                }
                let mut len = 1;
                while q.label_at(step(p, len as i64)) == g {
                    len += 1;
                }
                m[(g as usize - 1, len - 1)] += 1.0;
            }
        }
    }
    Ok(m)
}

/// The eleven run-length emphases, gray levels and run lengths numbered
/// from 1; all except run percentage are normalized by the run count.
pub fn glrlm_features(m: &DMatrix<f64>) -> Result<[f64; 11]> {
    let runs = m.sum();
    if runs == 0.0 {
        return Err(Error::Degenerate("run-length matrix has no runs".into()));
    }
    let mut acc = [0.0; 11];
    let mut voxels = 0.0;
    for g in 0..m.nrows() {
        let i2 = ((g + 1) * (g + 1)) as f64;
        for l in 0..m.ncols() {
            let p = m[(g, l)];
            if p == 0.0 {
                continue;
            }
            let j2 = ((l + 1) * (l + 1)) as f64;
            voxels += p * (l + 1) as f64;
            acc[0] += p / j2;
            acc[1] += p * j2;
            acc[5] += p / i2;
            acc[6] += p * i2;
            acc[7] += p / (i2 * j2);
            acc[8] += p * i2 / j2;
            acc[9] += p * j2 / i2;
            acc[10] += p * i2 * j2;
        }
    }
    acc[2] = m.row_iter().map(|r| r.sum().powi(2)).sum();
    acc[3] = m.column_iter().map(|c| c.sum().powi(2)).sum();
    for (idx, v) in acc.iter_mut().enumerate() {
        if idx != 4 {
            *v /= runs;
        }
    }
    acc[4] = runs / voxels;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(dims: [usize; 3], labels: &[u16], n: usize) -> QuantizedRoi {
        QuantizedRoi::from_labels(dims, labels.to_vec(), n).unwrap()
    }

    #[test]
    fn hand_enumerated_runs() {
        let q = roi([4, 1, 1], &[1, 1, 1, 2], 2);
        let m = glrlm(&q, [1, 0, 0]).unwrap();
        assert_eq!(m[(0, 2)], 1.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m.sum(), 2.0);
    }

    #[test]
    fn constant_line_is_one_run() {
        let q = roi([1, 1, 5], &[3; 5], 3);
        let m = glrlm(&q, [0, 0, 1]).unwrap();
        assert_eq!(m[(2, 4)], 1.0);
        assert_eq!(m.sum(), 1.0);
        let f = glrlm_features(&m).unwrap();
        assert!((f[1] - 25.0).abs() < 1e-12);
        assert!((f[4] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn alternating_labels_have_unit_runs() {
        let q = roi([6, 1, 1], &[1, 2, 1, 2, 1, 2], 2);
        let m = glrlm(&q, [1, 0, 0]).unwrap();
        assert_eq!(m.column(0).sum(), 6.0);
        let f = glrlm_features(&m).unwrap();
        assert_eq!(f[0], 1.0);
        assert_eq!(f[4], 1.0);
    }

    #[test]
    fn runs_stop_at_mask_boundary() {
        let q = roi([5, 1, 1], &[2, 2, 0, 2, 2], 2);
        let m = glrlm(&q, [1, 0, 0]).unwrap();
        assert_eq!(m[(1, 1)], 2.0);
        assert_eq!(m.sum(), 2.0);
    }

    #[test]
    fn emphasis_closed_forms() {
        // one run of level 2 length 3, two runs of level 1 length 1
        let mut m = DMatrix::zeros(2, 3);
        m[(1, 2)] = 1.0;
        m[(0, 0)] = 2.0;
        let f = glrlm_features(&m).unwrap();
        let r = 3.0;
        assert!((f[0] - (2.0 + 1.0 / 9.0) / r).abs() < 1e-12);
        assert!((f[1] - (2.0 + 9.0) / r).abs() < 1e-12);
        assert!((f[2] - (4.0 + 1.0) / r).abs() < 1e-12);
        assert!((f[3] - (4.0 + 1.0) / r).abs() < 1e-12);
        assert!((f[4] - 3.0 / 5.0).abs() < 1e-12);
        assert!((f[6] - (2.0 + 4.0) / r).abs() < 1e-12);
        assert!((f[10] - (2.0 + 36.0) / r).abs() < 1e-12);
    }

    #[test]
    fn bad_direction_and_empty_rejected() {
        let q = roi([2, 1, 1], &[1, 1], 1);
        assert!(glrlm(&q, [2, 0, 0]).is_err());
        assert!(glrlm_features(&DMatrix::zeros(2, 2)).is_err());
    }
}
