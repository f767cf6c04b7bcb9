//! Jacobian-determinant maps and registration evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image3D, Mask3D};
use crate::registration::{det3, DeformationField};

/// Per-voxel `det(I + grad u)`, unitless, on the field's grid.
pub type JacobianMap = Image3D;

/// Jacobian determinant of `x -> x + u(x)` per voxel, central differences
/// in mm (one-sided at the borders).
pub fn jacobian_map(field: &DeformationField) -> JacobianMap {
    let data = field.jacobian_matrices().iter().map(det3).collect();
    Image3D::new(*field.geometry(), data).expect("finite field gives finite determinants")
}

/// `100 (1 - mean J)` over the mask: positive for shrinkage.
pub fn jacobian_integral_change(jmap: &JacobianMap, baseline_mask: &Mask3D) -> Result<f64> {
    jmap.geometry().ensure_matches(baseline_mask.geometry(), "Jacobian map vs mask")?;
    baseline_mask.ensure_nonempty("baseline mask")?;
    let (sum, n) = jmap
        .data()
        .iter()
        .zip(baseline_mask.data())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&j, _)| (s + j, n + 1));
    Ok(100.0 * (1.0 - sum / n as f64))
}

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)`.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.geometry().ensure_matches(b.geometry(), "Dice")?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Err(Error::Input("Dice of two empty masks is undefined".into()));
    }
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Estimated change and overlap for one registered pair: the Jacobian
/// integral of `forward` over the baseline mask, and the Dice between the
/// baseline mask and the follow-up mask pulled back through `forward`.
pub fn evaluate_case(forward: &DeformationField, baseline_mask: &Mask3D, followup_mask: &Mask3D) -> Result<(f64, f64)> {
    let est = jacobian_integral_change(&jacobian_map(forward), baseline_mask)?;
    forward.geometry().ensure_matches(followup_mask.geometry(), "follow-up mask")?;
    let pulled = forward.warp_mask(followup_mask);
    Ok((est, dice(&pulled, baseline_mask)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub est_change_pct: f64,
    pub gt_change_pct: f64,
    pub dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: Vec<CaseEvaluation>,
    pub n: usize,
    /// `None` only from [`summarize_cohort`] when a series is constant.
    pub pearson_r: Option<f64>,
    /// Mean of `|est - gt|` in percentage points.
    pub mean_abs_diff_pct: f64,
    pub dsc_mean: f64,
    /// Sample standard deviation (n - 1).
    pub dsc_sd: f64,
}

impl EvaluationReport {
    /// Per-case rows as CSV.
    pub fn write_cases_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["case_id", "est_change_pct", "gt_change_pct", "abs_diff_pct", "dsc"])?;
        for c in &self.cases {
            out.write_record([
                c.case_id.clone(),
                format!("{:.6}", c.est_change_pct),
                format!("{:.6}", c.gt_change_pct),
                format!("{:.6}", (c.est_change_pct - c.gt_change_pct).abs()),
                format!("{:.6}", c.dsc),
            ])?;
        }
        out.flush().map_err(|e| Error::io("evaluation csv", e))
    }

    /// One-row cohort summary as CSV.
    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n", "pearson_r", "mean_abs_diff_pct", "dsc_mean", "dsc_sd"])?;
        out.write_record([
            self.n.to_string(),
            self.pearson_r.map(|r| format!("{r:.6}")).unwrap_or_default(),
            format!("{:.6}", self.mean_abs_diff_pct),
            format!("{:.6}", self.dsc_mean),
            format!("{:.6}", self.dsc_sd),
        ])?;
        out.flush().map_err(|e| Error::io("evaluation csv", e))
    }
}

/// Reads `case_id, est_change_pct, gt_change_pct, dsc` rows (header
/// required, extra columns ignored).
pub fn read_cases_csv<R: std::io::Read>(r: R) -> Result<Vec<CaseEvaluation>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |names: &[&str]| {
        header
            .iter()
            .position(|h| names.contains(&h.as_str()))
            .ok_or_else(|| Error::Input(format!("cases csv lacks a {} column", names[0])))
    };
    let (ci, ei, gi, di) = (col(&["case_id"])?, col(&["est_change_pct", "est"])?, col(&["gt_change_pct", "gt"])?, col(&["dsc"])?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Input(format!("case {}: bad number in column {}", &rec[ci], header[i])))
        };
        out.push(CaseEvaluation {
            case_id: rec[ci].to_string(),
            est_change_pct: num(ei)?,
            gt_change_pct: num(gi)?,
            dsc: num(di)?,
        });
    }
    Ok(out)
}

/// Pearson correlation; errors when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::CorrelationUndefined(format!("need >= 2 pairs, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::CorrelationUndefined("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Cohort summary: Pearson r of estimated vs true change, mean absolute
/// difference, and DSC mean and SD. Errors when r is undefined.
pub fn evaluate_cohort(cases: &[CaseEvaluation]) -> Result<EvaluationReport> {
    let est: Vec<f64> = cases.iter().map(|c| c.est_change_pct).collect();
    let gt: Vec<f64> = cases.iter().map(|c| c.gt_change_pct).collect();
    let mut report = summarize_cohort(cases)?;
    report.pearson_r = Some(pearson(&est, &gt)?);
    Ok(report)
}

/// As [`evaluate_cohort`], but a constant series (for example an
/// all-identity cohort) leaves `pearson_r` empty instead of failing.
pub fn summarize_cohort(cases: &[CaseEvaluation]) -> Result<EvaluationReport> {
    let n = cases.len();
    if n < 3 {
        return Err(Error::Input(format!("cohort evaluation needs >= 3 cases, got {n}")));
    }
    if let Some(c) = cases.iter().find(|c| !(0.0..=1.0).contains(&c.dsc)) {
        return Err(Error::Input(format!("case {}: DSC {} outside [0, 1]", c.case_id, c.dsc)));
    }
    let est: Vec<f64> = cases.iter().map(|c| c.est_change_pct).collect();
    let gt: Vec<f64> = cases.iter().map(|c| c.gt_change_pct).collect();
    let pearson_r = match pearson(&est, &gt) {
        Ok(r) => Some(r),
        Err(Error::CorrelationUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    let mean_abs_diff_pct = est.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let dsc_mean = cases.iter().map(|c| c.dsc).sum::<f64>() / n as f64;
    let dsc_sd = (cases.iter().map(|c| (c.dsc - dsc_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(EvaluationReport {
        cases: cases.to_vec(),
        n,
        pearson_r,
        mean_abs_diff_pct,
        dsc_mean,
        dsc_sd,
    })
}
