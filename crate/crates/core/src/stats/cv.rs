//! Repeated stratified cross-validation of the cluster, LASSO, forest chain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, cluster_distinct, lasso_select, rf_train, CaseTable, RandomForest, DEFAULT_CORR_THRESHOLD};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub n_trees: usize,
    /// LASSO keeps this many features; the curve sweeps `1..=max_features`.
    pub max_features: usize,
    pub corr_threshold: f64,
    /// Also train one forest per feature count for the accuracy curve.
    pub curve: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            repeats: 10,
            seed: 0,
            n_trees: 200,
            max_features: 10,
            corr_threshold: DEFAULT_CORR_THRESHOLD,
            curve: true,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.repeats == 0 || self.n_trees == 0 || self.max_features == 0 {
            return Err(Error::Config("need folds >= 2 and repeats, n_trees, max_features >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corr_threshold) {
            return Err(Error::Config(format!("corr_threshold {} outside [0, 1]", self.corr_threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample SD across repeats (0 for a single repeat).
    pub sd: f64,
    pub per_repeat: Vec<f64>,
}

impl MetricSummary {
    fn from(per_repeat: Vec<f64>) -> Self {
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let sd = if per_repeat.len() > 1 {
            (per_repeat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, sd, per_repeat }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_features: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
}

/// Cross-validated performance.
///
/// Each repeat predicts every case exactly once (from the fold that held it
/// out); sensitivity, specificity, accuracy and AUC are computed on those
/// pooled predictions, so a test fold containing one class never leaves a
/// metric undefined. `single_class_test_folds` counts such folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: CvConfig,
    pub n_cases: usize,
    pub n_positive: usize,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub accuracy: MetricSummary,
    pub auc: MetricSummary,
    /// How often each feature was among the selected ones, over all folds.
    pub feature_frequency: Vec<(String, usize)>,
    /// Accuracy when the forest uses the first `n` LASSO-ranked features.
    pub curve: Vec<CurvePoint>,
    pub single_class_test_folds: usize,
}

impl CvReport {
    pub fn write_curve_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n_features", "accuracy_mean", "accuracy_sd"])?;
        for p in &self.curve {
            out.write_record([p.n_features.to_string(), format!("{:.6}", p.accuracy_mean), format!("{:.6}", p.accuracy_sd)])?;
        }
        out.flush().map_err(|e| Error::io("curve csv", e))
    }
}

/// Everything learned from one training fold.
#[derive(Debug)]
pub(crate) struct FoldModel {
    pub selected: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    /// Forest for feature counts `1..=max_features` (index `c - 1`); a
    /// single entry (the full count) when the curve is off.
    forests: Vec<Option<RandomForest>>,
    prevalence: f64,
}

impl FoldModel {
    fn standardized(&self, row: &[f64], count: usize) -> Vec<f64> {
        self.selected[..count.min(self.selected.len())]
            .iter()
            .map(|&j| (row[j] - self.mean[j]) / self.sd[j])
            .collect()
    }

    fn predict(&self, row: &[f64], slot: usize, count: usize) -> f64 {
        match &self.forests[slot] {
            Some(f) => f.predict_proba(&self.standardized(row, count)),
            None => self.prevalence,
        }
    }
}

/// Fits the selection chain and forests using only the `train` rows.
pub(crate) fn fit_fold(table: &CaseTable, train: &[usize], cfg: &CvConfig, rf_seed: u64) -> Result<FoldModel> {
    let p = table.n_features();
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| table.rows[i].clone()).collect();
    let labels: Vec<bool> = train.iter().map(|&i| table.labels[i]).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let prevalence = labels.iter().filter(|&&l| l).count() as f64 / n;
    let slots = if cfg.curve { cfg.max_features } else { 1 };
    if prevalence == 0.0 || prevalence == 1.0 {
        return Ok(FoldModel { selected: Vec::new(), mean, sd, forests: vec![None; slots], prevalence });
    }
    let train_table = CaseTable {
        ids: train.iter().map(|&i| table.ids[i].clone()).collect(),
        names: table.names.clone(),
        rows: rows.clone(),
        labels: labels.clone(),
    };
    let reps = cluster_distinct(&train_table, cfg.corr_threshold)?;
    let x_reps: Vec<Vec<f64>> = rows.iter().map(|r| reps.iter().map(|&j| r[j]).collect()).collect();
    let selected: Vec<usize> = lasso_select(&x_reps, &labels, cfg.max_features)?.into_iter().map(|k| reps[k]).collect();
    let std_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| selected.iter().map(|&j| (r[j] - mean[j]) / sd[j]).collect())
        .collect();
    let counts: Vec<usize> = if cfg.curve { (1..=cfg.max_features).collect() } else { vec![cfg.max_features] };
    let mut forests: Vec<Option<RandomForest>> = Vec::with_capacity(counts.len());
    for &c in &counts {
        let used = c.min(selected.len());
        if used == 0 {
            forests.push(None);
        } else if c > used && !forests.is_empty() {
            let prev = forests.last().cloned().flatten();
            forests.push(prev);
        } else {
            let x: Vec<Vec<f64>> = std_rows.iter().map(|r| r[..used].to_vec()).collect();
            forests.push(Some(rf_train(&x, &labels, cfg.n_trees, rf_seed)?));
        }
    }
    Ok(FoldModel { selected, mean, sd, forests, prevalence })
}

/// Stratified fold index per case: each class is shuffled and dealt round
/// robin, the second class continuing where the first stopped.
pub(crate) fn stratified_folds(labels: &[bool], folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        for i in idx {
            assign[i] = next % folds;
            next += 1;
        }
    }
    assign
}

fn fold_seed(seed: u64, repeat: usize, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((repeat as u64) << 32 | fold as u64)
}

fn metrics(prob: &[f64], labels: &[bool]) -> Result<[f64; 4]> {
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&q, &l) in prob.iter().zip(labels) {
        let pred = q >= 0.5;
        if pred && l {
            tp += 1;
        } else if !pred && !l {
            tn += 1;
        }
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    Ok([
        tp as f64 / pos as f64,
        tn as f64 / neg as f64,
        (tp + tn) as f64 / labels.len() as f64,
        auc(prob, labels)?,
    ])
}

/// `repeats` rounds of stratified `folds`-fold cross-validation. Inside each
/// training fold: standardization, [`cluster_distinct`], [`lasso_select`]
/// and [`rf_train`]; the held-out fold only ever sees the fitted model.
/// Each (repeat, fold) task derives its own seeds from `cfg.seed`, so
/// results do not depend on thread count.
pub fn cross_validate(table: &CaseTable, cfg: &CvConfig) -> Result<CvReport> {
    cfg.validate()?;
    table.validate()?;
    let n = table.n_cases();
    let assignments: Vec<Vec<usize>> = (0..cfg.repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            stratified_folds(&table.labels, cfg.folds, &mut rng)
        })
        .collect();
    let tasks: Vec<(usize, usize)> = (0..cfg.repeats).flat_map(|r| (0..cfg.folds).map(move |f| (r, f))).collect();
    let slots = if cfg.curve { cfg.max_features } else { 1 };

    type FoldOut = (Vec<usize>, Vec<(usize, Vec<f64>)>, bool);
    let outputs: Vec<FoldOut> = tasks
        .par_iter()
        .map(|&(r, f)| -> Result<FoldOut> {
            let test: Vec<usize> = (0..n).filter(|&i| assignments[r][i] == f).collect();
            if test.is_empty() {
                return Ok((Vec::new(), Vec::new(), false));
            }
            let train: Vec<usize> = (0..n).filter(|&i| assignments[r][i] != f).collect();
            let model = fit_fold(table, &train, cfg, fold_seed(cfg.seed, r, f))?;
            let preds = test
                .iter()
                .map(|&i| {
                    let row = &table.rows[i];
                    let per_slot = (0..slots)
                        .map(|s| {
                            let count = if cfg.curve { s + 1 } else { cfg.max_features };
                            model.predict(row, s, count)
                        })
                        .collect();
                    (i, per_slot)
                })
                .collect();
            let first = table.labels[test[0]];
            let single = test.iter().all(|&i| table.labels[i] == first);
            Ok((model.selected, preds, single))
        })
        .collect::<Result<_>>()?;

    let mut frequency = vec![0usize; table.n_features()];
    let mut single_class_test_folds = 0;
    // prob[repeat][slot][case]
    let mut prob = vec![vec![vec![0.0; n]; slots]; cfg.repeats];
    for (&(r, _), (selected, preds, single)) in tasks.iter().zip(&outputs) {
        for &j in selected {
            frequency[j] += 1;
        }
        single_class_test_folds += usize::from(*single);
        for (i, per_slot) in preds {
            for (s, &q) in per_slot.iter().enumerate() {
                prob[r][s][*i] = q;
            }
        }
    }

    let main_slot = slots - 1;
    let per_repeat: Vec<[f64; 4]> = prob.iter().map(|p| metrics(&p[main_slot], &table.labels)).collect::<Result<_>>()?;
    let col = |k: usize| MetricSummary::from(per_repeat.iter().map(|m| m[k]).collect());
    let curve = if cfg.curve {
        (0..slots)
            .map(|s| {
                let acc: Vec<f64> = prob
                    .iter()
                    .map(|p| metrics(&p[s], &table.labels).map(|m| m[2]))
                    .collect::<Result<_>>()?;
                let m = MetricSummary::from(acc);
                Ok(CurvePoint { n_features: s + 1, accuracy_mean: m.mean, accuracy_sd: m.sd })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut feature_frequency: Vec<(String, usize)> = table
        .names
        .iter()
        .cloned()
        .zip(frequency)
        .filter(|(_, c)| *c > 0)
        .collect();
    feature_frequency.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    Ok(CvReport {
        config: cfg.clone(),
        n_cases: n,
        n_positive: table.labels.iter().filter(|&&l| l).count(),
        sensitivity: col(0),
        specificity: col(1),
        accuracy: col(2),
        auc: col(3),
        feature_frequency,
        curve,
        single_class_test_folds,
    })
}
