//! First-order and texture features of a Jacobian map inside a mask.
//!
//! The feature vector has a fixed layout of 56 entries:
//!
//! - 6 first-order statistics of the raw in-mask values,
//! - mean and SD over the 13 unit offsets of 14 co-occurrence features,
//! - mean and SD over the 13 unit directions of 11 run-length features.
//!
//! Gray levels come from equal-width binning over the in-mask range, so
//! every texture feature ignores a constant added to the map. Entropies use
//! the natural logarithm.

mod glcm;
mod glrlm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image3D, Mask3D};

pub use glcm::{glcm, glcm_features, GlcmFeatures, GLCM_FEATURE_NAMES};
pub use glrlm::{glrlm, glrlm_features, GLRLM_FEATURE_NAMES};

pub const DEFAULT_BINS: usize = 32;
pub const N_FEATURES: usize = 56;

pub const FIRST_ORDER_NAMES: [&str; 6] = [
    "Intensity Mean",
    "Intensity SD",
    "Intensity Skewness",
    "Intensity Kurtosis",
    "Intensity Energy",
    "Intensity Entropy",
];

/// The 13 unit offsets whose first nonzero component is positive, in
/// lexicographic order. Each undirected neighbor direction appears once.
pub fn unit_offsets() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(13);
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let first = [dx, dy, dz].into_iter().find(|&c| c != 0);
                if first == Some(1) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Gray-level labels of the voxels inside a mask.
///
/// `labels` is laid out like the source grid; 0 marks voxels outside the
/// mask and in-mask voxels carry `1..=n_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedRoi {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub n_bins: usize,
    /// `n_bins + 1` strictly increasing bin edges.
    pub edges: Vec<f64>,
    /// Set when the in-mask values are constant; the ROI then holds a
    /// single gray level.
    pub degenerate: bool,
}

impl QuantizedRoi {
    /// Builds an ROI straight from labels (0 = outside). Handy for oracles.
    pub fn from_labels(dims: [usize; 3], labels: Vec<u16>, n_bins: usize) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        if n_bins == 0 || labels.iter().any(|&l| l as usize > n_bins) {
            return Err(Error::Input(format!("labels must lie in 0..={n_bins}")));
        }
        let edges = (0..=n_bins).map(|k| k as f64 + 0.5).collect();
        Ok(QuantizedRoi { dims, labels, n_bins, edges, degenerate: false })
    }

    pub(crate) fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub(crate) fn label_at(&self, p: [i64; 3]) -> u16 {
        if (0..3).any(|a| p[a] < 0 || p[a] >= self.dims[a] as i64) {
            return 0;
        }
        self.labels[self.index(p[0] as usize, p[1] as usize, p[2] as usize)]
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Equal-width binning of the in-mask values of `jmap` into `1..=n_bins`;
/// the minimum maps to bin 1 and the maximum to bin `n_bins`.
pub fn quantize(jmap: &Image3D, mask: &Mask3D, n_bins: usize) -> Result<QuantizedRoi> {
    jmap.geometry().ensure_matches(mask.geometry(), "quantize")?;
    mask.ensure_nonempty("ROI mask")?;
    if n_bins < 2 || n_bins > u16::MAX as usize {
        return Err(Error::Config(format!("n_bins must be in 2..=65535, got {n_bins}")));
    }
    let inside = || jmap.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v);
    let (lo, hi) = inside().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let dims = jmap.geometry().dims;
    if !(hi > lo) {
        let labels = mask.data().iter().map(|&m| u16::from(m)).collect();
        return Ok(QuantizedRoi { dims, labels, n_bins: 1, edges: vec![lo - 0.5, lo + 0.5], degenerate: true });
    }
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|k| lo + k as f64 * width).collect();
    edges[n_bins] = hi;
    let labels = jmap
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if !m {
                return 0;
            }
            let b = ((v - lo) / (hi - lo) * n_bins as f64).floor() as usize;
            (b.min(n_bins - 1) + 1) as u16
        })
        .collect();
    Ok(QuantizedRoi { dims, labels, n_bins, edges, degenerate: false })
}

/// Named 56-entry feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Constant ROI, or a texture statistic fell back to its degenerate value.
    pub degenerate: bool,
}

impl FeatureVector {
    /// Column names in storage order.
    pub fn names() -> Vec<String> {
        let mut names: Vec<String> = FIRST_ORDER_NAMES.iter().map(|s| s.to_string()).collect();
        for agg in ["Mean", "SD"] {
            names.extend(GLCM_FEATURE_NAMES.iter().map(|n| format!("{agg} {n}")));
        }
        for agg in ["Mean", "SD"] {
            names.extend(GLRLM_FEATURE_NAMES.iter().map(|n| format!("{agg} {n}")));
        }
        names
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::names().iter().position(|n| n == name).map(|i| self.values[i])
    }
}

fn first_order(values: &[f64], q: &QuantizedRoi) -> [f64; 6] {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let moment = |p: i32| values.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));
    let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2)) } else { (0.0, 0.0) };
    let energy = values.iter().map(|v| v * v).sum::<f64>();
    let mut hist = vec![0usize; q.n_bins + 1];
    for &l in &q.labels {
        hist[l as usize] += 1;
    }
    let entropy = -hist[1..]
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    [mean, m2.sqrt(), skew, kurt, energy, entropy]
}

fn mean_sd<const N: usize>(rows: &[[f64; N]]) -> ([f64; N], [f64; N]) {
    let mut mean = [0.0; N];
    let mut sd = [0.0; N];
    if rows.is_empty() {
        return (mean, sd);
    }
    let n = rows.len() as f64;
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut sd {
        *s = s.sqrt();
    }
    (mean, sd)
}

/// Full feature vector of `jmap` inside `mask`.
///
/// Offsets without any in-mask pair are skipped; if none has pairs the
/// co-occurrence block is zero and the vector is flagged degenerate.
/// Aggregate SDs are population SDs over the contributing offsets.
pub fn extract_all(jmap: &Image3D, mask: &Mask3D, n_bins: usize) -> Result<FeatureVector> {
    let q = quantize(jmap, mask, n_bins)?;
    let values: Vec<f64> = jmap.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let fo = first_order(&values, &q);

    let offsets = unit_offsets();
    let per_offset: Vec<Option<GlcmFeatures>> = offsets
        .par_iter()
        .map(|o| glcm(&q, *o).ok().map(|m| glcm_features(&m)))
        .collect();
    let mut degenerate = q.degenerate;
    let glcm_rows: Vec<[f64; 14]> = per_offset
        .iter()
        .flatten()
        .map(|f| {
            degenerate |= f.degenerate;
            f.values
        })
        .collect();
    degenerate |= glcm_rows.is_empty();
    let glrlm_rows: Vec<[f64; 11]> = offsets.par_iter().map(|d| glrlm_features(&glrlm(&q, *d)?)).collect::<Result<_>>()?;

    let (gm, gs) = mean_sd(&glcm_rows);
    let (rm, rs) = mean_sd(&glrlm_rows);
    let mut out = Vec::with_capacity(N_FEATURES);
    out.extend_from_slice(&fo);
    out.extend_from_slice(&gm);
    out.extend_from_slice(&gs);
    out.extend_from_slice(&rm);
    out.extend_from_slice(&rs);
    debug_assert_eq!(out.len(), N_FEATURES);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!("feature {} is not finite", FeatureVector::names()[i])));
    }
    Ok(FeatureVector { values: out, degenerate })
}

/// Writes `case_id` plus the 56 named columns, one row per case.
pub fn write_features_csv<W: std::io::Write>(w: W, rows: &[(String, FeatureVector)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["case_id".to_string()];
    header.extend(FeatureVector::names());
    out.write_record(&header)?;
    for (id, fv) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(fv.values.iter().map(|v| format!("{v:.12e}")));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("feature csv", e))
}

/// Reads a table written by [`write_features_csv`] (any numeric columns).
pub fn read_features_csv<R: std::io::Read>(r: R) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("case_id") {
        return Err(Error::Input("feature table must start with a case_id column".into()));
    }
    let names = header[1..].to_vec();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Input(format!("bad number {s:?} in case {}", &rec[0]))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((ids, names, rows))
}
