//! Gray-level co-occurrence matrices and their Haralick statistics.

use nalgebra::DMatrix;

use super::QuantizedRoi;
use crate::error::{Error, Result};

pub const GLCM_FEATURE_NAMES: [&str; 14] = [
    "Energy",
    "Entropy",
    "Correlation",
    "Haralick Correlation",
    "Contrast",
    "Inverse Difference Moment",
    "Sum Average",
    "Sum Variance",
    "Sum Entropy",
    "Difference Variance",
    "Difference Entropy",
    "Cluster Shade",
    "Cluster Prominence",
    "Autocorrelation",
];

/// Symmetric, normalized co-occurrence matrix for one offset.
///
/// Every pair `(p, p + offset)` with both voxels in the ROI is counted at
/// `(a, b)` and `(b, a)`. Row/column `i` holds gray level `i + 1`.
pub fn glcm(q: &QuantizedRoi, offset: [i64; 3]) -> Result<DMatrix<f64>> {
    if offset == [0, 0, 0] {
        return Err(Error::Input("co-occurrence offset must be nonzero".into()));
    }
    let n = q.n_bins;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut pairs = 0usize;
    for k in 0..q.dims[2] {
        for j in 0..q.dims[1] {
            for i in 0..q.dims[0] {
                let a = q.labels[q.index(i, j, k)];
                if a == 0 {
                    continue;
                }
                let b = q.label_at([i as i64 + offset[0], j as i64 + offset[1], k as i64 + offset[2]]);
                if b == 0 {
                    continue;
                }
                let (a, b) = (a as usize - 1, b as usize - 1);
                m[(a, b)] += 1.0;
                m[(b, a)] += 1.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Degenerate(format!("no in-mask voxel pairs at offset {offset:?}")));
    }
    m /= 2.0 * pairs as f64;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlcmFeatures {
    /// In [`GLCM_FEATURE_NAMES`] order.
    pub values: [f64; 14],
    /// A marginal had zero variance; the correlation terms were set to 0.
    pub degenerate: bool,
}

impl GlcmFeatures {
    pub fn get(&self, name: &str) -> Option<f64> {
        GLCM_FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }
}

/// Haralick statistics of a normalized symmetric matrix, gray levels
/// numbered from 1.
///
/// `Haralick Correlation` follows the ITK texture filter: with 0-based
/// indices, `(sum i j p(i,j) - m^2) / s^2` where `m` and `s^2` are the mean
/// and population variance of the marginal probabilities taken as a list.
pub fn glcm_features(m: &DMatrix<f64>) -> GlcmFeatures {
    let n = m.nrows();
    let lvl = |i: usize| (i + 1) as f64;
    let px: Vec<f64> = (0..n).map(|i| m.row(i).sum()).collect();
    let py: Vec<f64> = (0..n).map(|j| m.column(j).sum()).collect();
    let mu_x: f64 = px.iter().enumerate().map(|(i, p)| lvl(i) * p).sum();
    let mu_y: f64 = py.iter().enumerate().map(|(j, p)| lvl(j) * p).sum();
    let var_x: f64 = px.iter().enumerate().map(|(i, p)| (lvl(i) - mu_x).powi(2) * p).sum();
    let var_y: f64 = py.iter().enumerate().map(|(j, p)| (lvl(j) - mu_y).powi(2) * p).sum();

    let mut p_sum = vec![0.0; 2 * n + 1];
    let mut p_diff = vec![0.0; n];
    let (mut energy, mut entropy, mut cov, mut contrast, mut idm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut shade, mut prominence, mut auto, mut ij0) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let p = m[(i, j)];
            if p == 0.0 {
                continue;
            }
            let (a, b) = (lvl(i), lvl(j));
            energy += p * p;
            entropy -= p * p.ln();
            cov += (a - mu_x) * (b - mu_y) * p;
            contrast += (a - b).powi(2) * p;
            idm += p / (1.0 + (a - b).powi(2));
            let t = a + b - mu_x - mu_y;
            shade += t.powi(3) * p;
            prominence += t.powi(4) * p;
            auto += a * b * p;
            ij0 += (i * j) as f64 * p;
            p_sum[i + j + 2] += p;
            p_diff[i.abs_diff(j)] += p;
        }
    }
    let plogp = |v: &[f64]| -v.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let sum_avg: f64 = p_sum.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let sum_var: f64 = p_sum.iter().enumerate().map(|(k, p)| (k as f64 - sum_avg).powi(2) * p).sum();
    let diff_mean: f64 = p_diff.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let diff_var: f64 = p_diff.iter().enumerate().map(|(k, p)| (k as f64 - diff_mean).powi(2) * p).sum();

    let mut degenerate = false;
    let correlation = if var_x > 0.0 && var_y > 0.0 {
        cov / (var_x * var_y).sqrt()
    } else {
        degenerate = true;
        0.0
    };
    let marg_mean = px.iter().sum::<f64>() / n as f64;
    let marg_var = px.iter().map(|p| (p - marg_mean).powi(2)).sum::<f64>() / n as f64;
    let haralick = if marg_var > 0.0 {
        (ij0 - marg_mean * marg_mean) / marg_var
    } else {
        degenerate = true;
        0.0
    };
    GlcmFeatures {
        values: [
            energy,
            entropy,
            correlation,
            haralick,
            contrast,
            idm,
            sum_avg,
            sum_var,
            plogp(&p_sum),
            diff_var,
            plogp(&p_diff),
            shade,
            prominence,
            auto,
        ],
        degenerate,
    }
}
