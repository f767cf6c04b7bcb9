//! Redundancy reduction by complete-linkage clustering of features.

use super::{auc, CaseTable};
use crate::error::Result;
use crate::jacobian::pearson;

pub const DEFAULT_CORR_THRESHOLD: f64 = 0.9;

/// Groups features by complete linkage on `1 - |r|`, cutting at
/// `1 - corr_threshold`, and keeps one feature per group: the one with the
/// highest orientation-free AUC, ties going to the smaller name. Constant
/// features count as uncorrelated with everything.
///
/// Returns column indices in ascending order.
pub fn cluster_distinct(table: &CaseTable, corr_threshold: f64) -> Result<Vec<usize>> {
    table.validate()?;
    let p = table.n_features();
    let cols: Vec<Vec<f64>> = (0..p).map(|j| table.column(j)).collect();
    let mut dist = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in a + 1..p {
            let r = pearson(&cols[a], &cols[b]).unwrap_or(0.0);
            dist[a][b] = 1.0 - r.abs();
            dist[b][a] = dist[a][b];
        }
    }
    let cut = 1.0 - corr_threshold;
    let mut clusters: Vec<Vec<usize>> = (0..p).map(|j| vec![j]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let d = clusters[x]
                    .iter()
                    .flat_map(|&a| clusters[y].iter().map(move |&b| (a, b)))
                    .map(|(a, b)| dist[a][b])
                    .fold(0.0, f64::max);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        match best {
            Some((d, x, y)) if d <= cut + 1e-12 => {
                let merged = clusters.remove(y);
                clusters[x].extend(merged);
            }
            _ => break,
        }
    }
    let scores: Vec<f64> = cols
        .iter()
        .map(|c| auc(c, &table.labels).map(|a| a.max(1.0 - a)))
        .collect::<Result<_>>()?;
    let mut reps: Vec<usize> = clusters
        .iter()
        .map(|members| {
            *members
                .iter()
                .min_by(|&&a, &&b| scores[b].total_cmp(&scores[a]).then_with(|| table.names[a].cmp(&table.names[b])))
                .expect("clusters are nonempty")
        })
        .collect();
    reps.sort_unstable();
    Ok(reps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[Vec<f64>], labels: &[bool]) -> CaseTable {
        let n = labels.len();
        CaseTable::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..cols.len()).map(|j| format!("f{}", j + 1)).collect(),
            (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect(),
            labels.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn perfectly_correlated_pair_collapses() {
        let f1 = vec![1.0, 2.0, 3.0, 4.0];
        let f2: Vec<f64> = f1.iter().map(|v| 3.0 * v - 1.0).collect();
        let t = table(&[f1, f2], &[false, false, true, true]);
        assert_eq!(cluster_distinct(&t, 0.9).unwrap().len(), 1);
    }

    #[test]
    fn uncorrelated_features_all_kept() {
        // orthogonal contrasts over four cases
        let t = table(
            &[vec![1.0, 1.0, -1.0, -1.0], vec![1.0, -1.0, 1.0, -1.0], vec![1.0, -1.0, -1.0, 1.0]],
            &[true, true, false, false],
        );
        assert_eq!(cluster_distinct(&t, 0.9).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn near_duplicate_merges_and_keeps_best_auc() {
        let f1 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        // r(f1, f2) ~ 0.96, f2 separates the labels less well
        let f2 = vec![1.0, 2.0, 4.0, 3.0, 5.0, 6.5];
        let f3 = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let labels = [false, false, false, true, true, true];
        let t = table(&[f1.clone(), f2.clone(), f3.clone()], &labels);
        assert!(pearson(&f1, &f2).unwrap() > 0.9);
        let reps = cluster_distinct(&t, 0.9).unwrap();
        assert_eq!(reps, vec![0, 2]);
    }
}
