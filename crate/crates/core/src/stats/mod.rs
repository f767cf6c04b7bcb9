//! Univariate response tests and the cross-validated RF-LASSO predictor.

mod cluster;
mod cv;
mod forest;
mod lasso;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub use cluster::{cluster_distinct, DEFAULT_CORR_THRESHOLD};
pub use cv::{cross_validate, CvConfig, CvReport, CurvePoint, MetricSummary};
pub use forest::{rf_train, RandomForest};
pub use lasso::{lasso_select, LASSO_PATH_LEN};

/// Cases by features with a binary label (`true` = responder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    /// Row-major, one row per case.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl CaseTable {
    pub fn new(ids: Vec<String>, names: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let t = CaseTable { ids, names, rows, labels };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if self.ids.len() != n || self.labels.len() != n {
            return Err(Error::Shape(format!(
                "{} rows, {} ids, {} labels",
                n,
                self.ids.len(),
                self.labels.len()
            )));
        }
        if self.names.is_empty() {
            return Err(Error::Input("case table has no feature columns".into()));
        }
        for (id, r) in self.ids.iter().zip(&self.rows) {
            if r.len() != self.names.len() {
                return Err(Error::Shape(format!("case {id}: {} values for {} features", r.len(), self.names.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("case {id}: missing or non-finite value")));
            }
        }
        let pos = self.labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == n {
            return Err(Error::Input("labels must contain both classes".into()));
        }
        Ok(())
    }

    pub fn n_cases(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Joins a feature table with labels keyed by case id; every feature
    /// row needs a label.
    pub fn join(ids: Vec<String>, names: Vec<String>, rows: Vec<Vec<f64>>, labels: &[(String, bool)]) -> Result<Self> {
        let lookup: std::collections::HashMap<&str, bool> = labels.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let y = ids
            .iter()
            .map(|id| lookup.get(id.as_str()).copied().ok_or_else(|| Error::Input(format!("no label for case {id}"))))
            .collect::<Result<Vec<bool>>>()?;
        CaseTable::new(ids, names, rows, y)
    }
}

/// Reads `case_id,label` rows; labels are `1`/`0` or `true`/`false`.
pub fn read_labels_csv<R: std::io::Read>(r: R) -> Result<Vec<(String, bool)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Input("label rows need case_id and label".into()));
        }
        let label = match rec[1].trim() {
            "1" | "true" | "True" | "responder" => true,
            "0" | "false" | "False" | "non-responder" => false,
            other => return Err(Error::Input(format!("case {}: unrecognized label {other:?}", &rec[0]))),
        };
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

/// Midranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney `U` of `a` against `b` (number of pairs with `a > b`, ties
/// counting one half).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let n1 = a.len() as f64;
    ranks[..a.len()].iter().sum::<f64>() - n1 * (n1 + 1.0) / 2.0
}

/// Largest combined sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

fn check_samples(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("rank-sum test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("rank-sum test on non-finite values".into()));
    }
    let first = a[0];
    Ok(a.iter().chain(b).all(|&v| v == first))
}

/// Two-sided Wilcoxon rank-sum p-value: exact when `|a| + |b| <= 12`,
/// otherwise the tie- and continuity-corrected normal approximation.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() + b.len() <= EXACT_MAX_N {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// Exact permutation p-value over all `C(n, |a|)` relabelings of the pooled
/// midranks; extreme means at least as far from the null mean as observed.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    if check_samples(a, b)? {
        return Ok(1.0);
    }
    let n = a.len() + b.len();
    if n > 24 {
        return Err(Error::Input(format!("exact enumeration limited to n <= 24, got {n}")));
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let k = a.len();
    let mean = k as f64 * (n as f64 + 1.0) / 2.0;
    let observed = (ranks[..k].iter().sum::<f64>() - mean).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for subset in 0u32..(1u32 << n) {
        if subset.count_ones() as usize != k {
            continue;
        }
        let w: f64 = (0..n).filter(|&i| subset >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if (w - mean).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64> {
    if check_samples(a, b)? {
        return Ok(1.0);
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let u = mann_whitney_u(a, b);
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = all[i..].iter().take_while(|&&v| v == all[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - n1 * n2 / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

/// Area under the ROC curve, `U / (n_pos n_neg)` with midranks; higher
/// scores are expected for `true` labels.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    Ok(mann_whitney_u(&pos, &neg) / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnivariateResult {
    pub name: String,
    /// `max(auc, 1 - auc)`.
    pub auc: f64,
    /// True when responders have the higher values.
    pub higher_in_positive: bool,
    pub p_value: f64,
}

/// Per-feature AUC and rank-sum p-value, sorted by AUC (descending) then
/// name.
pub fn univariate(table: &CaseTable) -> Result<Vec<UnivariateResult>> {
    table.validate()?;
    let mut out = Vec::with_capacity(table.n_features());
    for (j, name) in table.names.iter().enumerate() {
        let col = table.column(j);
        let raw = auc(&col, &table.labels)?;
        let pos: Vec<f64> = col.iter().zip(&table.labels).filter(|(_, &l)| l).map(|(&v, _)| v).collect();
        let neg: Vec<f64> = col.iter().zip(&table.labels).filter(|(_, &l)| !l).map(|(&v, _)| v).collect();
        out.push(UnivariateResult {
            name: name.clone(),
            auc: raw.max(1.0 - raw),
            higher_in_positive: raw >= 0.5,
            p_value: wilcoxon_rank_sum(&pos, &neg)?,
        });
    }
    out.sort_by(|a, b| b.auc.total_cmp(&a.auc).then_with(|| a.name.cmp(&b.name)));
    Ok(out)
}

pub fn write_univariate_csv<W: std::io::Write>(w: W, rows: &[UnivariateResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "auc", "p_value", "higher_in_positive"])?;
    for r in rows {
        out.write_record([r.name.clone(), format!("{:.6}", r.auc), format!("{:.6e}", r.p_value), r.higher_in_positive.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("univariate csv", e))
}
