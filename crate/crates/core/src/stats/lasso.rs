//! L1-penalized logistic regression path used to rank features.

use crate::error::{Error, Result};

pub const LASSO_PATH_LEN: usize = 50;
const LAMBDA_MIN_RATIO: f64 = 1e-3;
const MAX_OUTER: usize = 100;
const MAX_INNER: usize = 1000;
const TOL: f64 = 1e-7;

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Columns standardized to zero mean and unit population variance;
/// constant columns become all zeros.
fn standardize(x: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    (0..p)
        .map(|j| {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd <= 1e-12 * mean.abs().max(1.0) {
                vec![0.0; x.len()]
            } else {
                x.iter().map(|r| (r[j] - mean) / sd).collect()
            }
        })
        .collect()
}

/// Orders features by when they enter the L1 logistic path and returns the
/// first `k`.
///
/// Columns are standardized inside the call. The path has 50 log-spaced
/// penalties from the smallest all-zero value down to `1e-3` of it; each
/// penalty is solved by iteratively reweighted least squares with cyclic
/// coordinate descent, warm-started from the previous one. Features entering
/// at the same penalty are ordered by coefficient magnitude, then index.
/// The path stops early once `k` features are active or the fit saturates.
pub fn lasso_select(x: &[Vec<f64>], y: &[bool], k: usize) -> Result<Vec<usize>> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::Shape(format!("{} rows vs {} labels", n, y.len())));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == n {
        return Err(Error::Input("LASSO needs both classes".into()));
    }
    let cols = standardize(x, p);
    let yv: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v))).collect();
    let nf = n as f64;
    let ybar = pos as f64 / nf;

    let lambda_max = cols
        .iter()
        .map(|c| c.iter().zip(&yv).map(|(a, b)| a * (b - ybar)).sum::<f64>().abs() / nf)
        .fold(0.0, f64::max);
    if lambda_max == 0.0 {
        return Ok(Vec::new());
    }
    let null_dev = -2.0 * (pos as f64 * ybar.ln() + (n - pos) as f64 * (1.0 - ybar).ln());

    let mut beta0 = (ybar / (1.0 - ybar)).ln();
    let mut beta = vec![0.0; p];
    let mut eta = vec![beta0; n];
    let mut entered: Vec<usize> = Vec::new();

    for step in 0..LASSO_PATH_LEN {
        let lambda = lambda_max * LAMBDA_MIN_RATIO.powf(step as f64 / (LASSO_PATH_LEN - 1) as f64);
        let mut converged = false;
        let mut last_delta = f64::NAN;
        for _ in 0..MAX_OUTER {
            let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
            let w: Vec<f64> = prob.iter().map(|&q| (q * (1.0 - q)).max(1e-5)).collect();
            let z: Vec<f64> = (0..n).map(|i| eta[i] + (yv[i] - prob[i]) / w[i]).collect();
            // residual of the working response
            let mut r: Vec<f64> = (0..n).map(|i| z[i] - eta[i]).collect();
            let old: Vec<f64> = beta.clone();
            let old0 = beta0;
            let mut inner_ok = false;
            for _ in 0..MAX_INNER {
                let mut max_change: f64 = 0.0;
                let wsum: f64 = w.iter().sum();
                let d0 = (0..n).map(|i| w[i] * r[i]).sum::<f64>() / wsum;
                beta0 += d0;
                for i in 0..n {
                    r[i] -= d0;
                }
                max_change = max_change.max(d0.abs());
                for (j, c) in cols.iter().enumerate() {
                    let denom = (0..n).map(|i| w[i] * c[i] * c[i]).sum::<f64>() / nf;
                    if denom == 0.0 {
                        continue;
                    }
                    let grad = (0..n).map(|i| w[i] * c[i] * r[i]).sum::<f64>() / nf + denom * beta[j];
                    let next = grad.signum() * (grad.abs() - lambda).max(0.0) / denom;
                    let d = next - beta[j];
                    if d != 0.0 {
                        for i in 0..n {
                            r[i] -= d * c[i];
                        }
                        beta[j] = next;
                        max_change = max_change.max(d.abs());
                    }
                }
                if max_change < TOL {
                    inner_ok = true;
                    break;
                }
            }
            if !inner_ok {
                return Err(Error::Convergence(format!(
                    "coordinate descent stalled at path step {step} (lambda {lambda:.3e}, {} active)",
                    beta.iter().filter(|b| **b != 0.0).count()
                )));
            }
            for i in 0..n {
                eta[i] = beta0 + cols.iter().zip(&beta).map(|(c, b)| c[i] * b).sum::<f64>();
            }
            last_delta = old.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold((old0 - beta0).abs(), f64::max);
            if last_delta < 1e-6 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "IRLS did not settle at path step {step} (lambda {lambda:.3e}, last change {last_delta:.3e})"
            )));
        }
        let mut newcomers: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0 && !entered.contains(&j)).collect();
        newcomers.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
        entered.extend(newcomers);
        if entered.len() >= k {
            break;
        }
        let dev: f64 = -2.0
            * (0..n)
                .map(|i| {
                    let q = sigmoid(eta[i]).clamp(1e-15, 1.0 - 1e-15);
                    yv[i] * q.ln() + (1.0 - yv[i]) * (1.0 - q).ln()
                })
                .sum::<f64>();
        if dev < 1e-3 * null_dev {
            break;
        }
    }
    entered.truncate(k);
    Ok(entered)
}
