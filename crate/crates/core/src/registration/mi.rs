//! Mutual information with cubic B-spline Parzen windowing.
//!
//! Intensities map onto a continuous bin coordinate in `[2, bins - 3]` so that
//! every 4-bin kernel support stays inside the histogram. Both images use the
//! same kernel, which makes the estimator symmetric in its two arguments and
//! differentiable in either.

use crate::error::{Error, Result};
use crate::image::{Image3D, Mask3D};

use super::bspline::{cubic_weights, cubic_weights_d1};

/// Fixed intensity-to-bin mapping for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinMap {
    lo: f64,
    hi: f64,
    bins: usize,
}

impl BinMap {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        BinMap { lo, hi, bins }
    }

    pub fn for_image(img: &Image3D, bins: usize) -> Self {
        let (lo, hi) = img.min_max();
        BinMap { lo, hi, bins }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.hi > self.lo)
    }

    /// `(continuous bin coordinate, d coordinate / d intensity)`.
    #[inline]
    fn coord(&self, v: f64) -> (f64, f64) {
        let scale = (self.bins - 5) as f64 / (self.hi - self.lo);
        let t = (v - self.lo) * scale;
        let max = (self.bins - 5) as f64;
        if t <= 0.0 {
            (2.0, 0.0)
        } else if t >= max {
            (2.0 + max, 0.0)
        } else {
            (2.0 + t, scale)
        }
    }

    /// First supporting bin and the 4 kernel weights (plus derivatives wrt intensity).
    #[inline]
    fn kernel(&self, v: f64) -> (usize, [f64; 4], [f64; 4]) {
        let (c, dc) = self.coord(v);
        let cell = c.floor();
        let f = c - cell;
        let dw = cubic_weights_d1(f).map(|d| d * dc);
        (cell as usize - 1, cubic_weights(f), dw)
    }
}

/// Joint/marginal Parzen histogram and the resulting mutual information.
#[derive(Clone, Debug)]
pub struct MiEvaluation {
    pub value: f64,
    pub bins: usize,
    /// Row-major `joint[a * bins + b]`, `a` = fixed bin, `b` = moving bin.
    pub joint: Vec<f64>,
    pub fixed_marginal: Vec<f64>,
    pub moving_marginal: Vec<f64>,
    /// dMI/d(fixed sample i), when requested.
    pub d_fixed: Option<Vec<f64>>,
    /// dMI/d(moving sample i), when requested.
    pub d_moving: Option<Vec<f64>>,
}

/// Parzen-window mutual information estimator.
#[derive(Clone, Copy, Debug)]
pub struct ParzenMi {
    pub fixed: BinMap,
    pub moving: BinMap,
}

impl ParzenMi {
    pub fn new(fixed: BinMap, moving: BinMap) -> Result<Self> {
        if fixed.bins != moving.bins || fixed.bins < 8 {
            return Err(Error::Config(format!(
                "MI needs >= 8 bins on both axes, got {} / {}",
                fixed.bins, moving.bins
            )));
        }
        Ok(ParzenMi { fixed, moving })
    }

    pub fn for_images(fixed: &Image3D, moving: &Image3D, bins: usize) -> Result<Self> {
        Self::new(BinMap::for_image(fixed, bins), BinMap::for_image(moving, bins))
    }

    /// Evaluates MI over paired samples; `want_grad` adds per-sample
    /// derivatives for both arguments.
    pub fn evaluate(&self, fixed: &[f64], moving: &[f64], roi: Option<&[bool]>, want_grad: bool) -> MiEvaluation {
        let bins = self.fixed.bins;
        let mut joint = vec![0.0; bins * bins];
        let n_used = match roi {
            Some(r) => r.iter().filter(|&&b| b).count(),
            None => fixed.len(),
        };
        let degenerate = self.fixed.is_degenerate() || self.moving.is_degenerate() || n_used == 0;
        if degenerate {
            return MiEvaluation {
                value: 0.0,
                bins,
                joint,
                fixed_marginal: vec![0.0; bins],
                moving_marginal: vec![0.0; bins],
                d_fixed: want_grad.then(|| vec![0.0; fixed.len()]),
                d_moving: want_grad.then(|| vec![0.0; fixed.len()]),
            };
        }
        let inv_n = 1.0 / n_used as f64;
        let used = |i: usize| roi.is_none_or(|r| r[i]);
        let kernels: Vec<_> = (0..fixed.len())
            .map(|i| {
                if used(i) {
                    Some((self.fixed.kernel(fixed[i]), self.moving.kernel(moving[i])))
                } else {
                    None
                }
            })
            .collect();
        for &((fa, wa, _), (fb, wb, _)) in kernels.iter().flatten() {
            for s in 0..4 {
                let row = (fa + s) * bins;
                for t in 0..4 {
                    joint[row + fb + t] += wa[s] * wb[t];
                }
            }
        }
        joint.iter_mut().for_each(|p| *p *= inv_n);
        let mut pf = vec![0.0; bins];
        let mut pm = vec![0.0; bins];
        for a in 0..bins {
            for b in 0..bins {
                let p = joint[a * bins + b];
                pf[a] += p;
                pm[b] += p;
            }
        }
        let mut value = 0.0;
        for a in 0..bins {
            for b in 0..bins {
                let p = joint[a * bins + b];
                if p > 0.0 {
                    value += p * (p / (pf[a] * pm[b])).ln();
                }
            }
        }
        let (d_fixed, d_moving) = if want_grad {
            // log p(a,b)/p_m(b) and log p(a,b)/p_f(a); zero where p = 0 since
            // the kernel derivative vanishes wherever the kernel does.
            let mut log_cond_m = vec![0.0; bins * bins];
            let mut log_cond_f = vec![0.0; bins * bins];
            for a in 0..bins {
                for b in 0..bins {
                    let p = joint[a * bins + b];
                    if p > 0.0 {
                        log_cond_m[a * bins + b] = (p / pm[b]).ln();
                        log_cond_f[a * bins + b] = (p / pf[a]).ln();
                    }
                }
            }
            let mut dfix = vec![0.0; fixed.len()];
            let mut dmov = vec![0.0; fixed.len()];
            for (i, k) in kernels.iter().enumerate() {
                let Some(((fa, wa, dwa), (fb, wb, dwb))) = *k else {
                    continue;
                };
                let mut gm = 0.0;
                let mut gf = 0.0;
                for s in 0..4 {
                    let row = (fa + s) * bins + fb;
                    for t in 0..4 {
                        gm += wa[s] * dwb[t] * log_cond_m[row + t];
                        gf += dwa[s] * wb[t] * log_cond_f[row + t];
                    }
                }
                dmov[i] = gm * inv_n;
                dfix[i] = gf * inv_n;
            }
            (Some(dfix), Some(dmov))
        } else {
            (None, None)
        };
        MiEvaluation {
            value,
            bins,
            joint,
            fixed_marginal: pf,
            moving_marginal: pm,
            d_fixed,
            d_moving,
        }
    }
}

/// Parzen-window MI between two images on the same grid, binned over each
/// image's own intensity range. Constant images give 0.
pub fn mutual_information(fixed: &Image3D, warped_moving: &Image3D, bins: usize, roi: Option<&Mask3D>) -> Result<f64> {
    fixed.geometry().ensure_matches(warped_moving.geometry(), "mutual information")?;
    if let Some(m) = roi {
        fixed.geometry().ensure_matches(m.geometry(), "mutual information roi")?;
    }
    let est = ParzenMi::for_images(fixed, warped_moving, bins)?;
    Ok(est
        .evaluate(fixed.data(), warped_moving.data(), roi.map(|m| m.data()), false)
        .value)
}

/// Shannon entropy (nats) of a discrete distribution given as counts or probabilities.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}

/// Plain hard-binned histogram MI (no Parzen smoothing), equal-width bins
/// over each input's range.
pub fn histogram_mutual_information(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let bin_of = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let range = |x: &[f64]| x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for (&x, &y) in a.iter().zip(b) {
        let i = bin_of(x, alo, ahi);
        let j = bin_of(y, blo, bhi);
        joint[i * bins + j] += 1.0;
        pa[i] += 1.0;
        pb[j] += 1.0;
    }
    entropy(&pa) + entropy(&pb) - entropy(&joint)
}
