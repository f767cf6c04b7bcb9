//! Symmetric diffeomorphic registration with B-spline projected updates.
//!
//! Both images are warped towards a common midpoint by `exp(v_f)` and
//! `exp(v_m)`. Each iteration computes the mutual information force on both
//! midpoint images, projects it onto the cubic B-spline lattice of the
//! current level and adds the antisymmetric part to the two velocities, which
//! keeps the midpoint halfway (`v_f = -v_m`). Steps are accepted
//! only if they lower the energy and keep both half-transforms invertible.

use crate::error::{Error, Result};
use crate::image::{Geometry, Image3D, Interp};

use super::bspline::BSplineLattice;
use super::field::DeformationField;
use super::mi::ParzenMi;
use super::{ensure_same_grid, min_det, pyramid, Plateau, CostTerms, RegistrationConfig, RegistrationResult, Stage};

/// Registers `moving` onto `fixed` (same grid). The forward field maps fixed
/// space to moving space through the midpoint, `exp(-v_f)` then `exp(v_m)`;
/// the inverse is `exp(-v_m)` then `exp(v_f)`.
pub fn register_bsd(fixed: &Image3D, moving: &Image3D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    ensure_same_grid(fixed, moving)?;
    let fixed_pyr = pyramid(fixed, cfg)?;
    let moving_pyr = pyramid(moving, cfg)?;
    let mut trace = Vec::new();
    let mut velocities: Option<(DeformationField, DeformationField)> = None;
    let mut converged = false;
    let (mut initial_mi, mut final_mi) = (0.0, 0.0);

    for level in 0..cfg.levels {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        let geom = *f.geometry();
        let lvl = Level {
            fixed: f,
            moving: m,
            lattice: BSplineLattice::new(geom, cfg.mesh_at(level))?,
            mi: ParzenMi::for_images(f, m, cfg.mi_bins)?,
            cfg,
        };
        let (vf, vm) = match velocities.take() {
            Some((vf, vm)) => (vf.resample(&geom), vm.resample(&geom)),
            None => (DeformationField::zeros(geom), DeformationField::zeros(geom)),
        };
        let diverged = |reason: String, len: usize| Error::Diverged {
            level,
            reason,
            trace_len: len,
        };
        let mut state = lvl.eval(vf, vm);
        if !state.cost.is_finite() {
            return Err(diverged("non-finite energy".into(), trace.len()));
        }
        if level + 1 == cfg.levels {
            initial_mi = state.mi;
        }
        let h = geom.min_spacing();
        let gamma = cfg.step_size;
        let mut step = gamma;
        let mut plateau = Plateau::new(cfg, state.cost);
        converged = false;
        for _ in 0..cfg.iterations[level] {
            let (df, dm, residual, raw) = lvl.direction(&state);
            let dmax = df.iter().chain(&dm).map(norm).fold(0.0, f64::max);
            if dmax <= 1e-9 * raw {
                converged = true;
                break;
            }
            let mut accepted = false;
            loop {
                let scale = step * h / dmax;
                let next = lvl.eval(axpy(&state.vf, scale, &df), axpy(&state.vm, scale, &dm));
                if !next.cost.is_finite() {
                    return Err(diverged("non-finite energy".into(), trace.len()));
                }
                let invertible = next.min_jacobian > 0.0;
                if invertible && next.cost < state.cost {
                    state = next;
                    accepted = true;
                    break;
                }
                let folded = !invertible;
                step *= 0.5;
                if folded && step < 1e-4 {
                    return Err(diverged(
                        format!("half-transform folds even at step {step:.2e} (min det {:.3e})", next.min_jacobian),
                        trace.len(),
                    ));
                }
                if !folded && step < gamma / 64.0 {
                    break;
                }
            }
            trace.push(CostTerms {
                stage: Stage::Bsd,
                level,
                similarity: state.mi,
                geodesic: state.geodesic,
                regularizer: residual,
                step,
                accepted,
            });
            if !accepted || plateau.push(state.cost) {
                converged = true;
                break;
            }
            step = (step * 1.5).min(gamma);
        }
        if level + 1 == cfg.levels {
            final_mi = state.mi;
        }
        velocities = Some((state.vf, state.vm));
    }

    let (vf, vm) = velocities.expect("at least one level");
    let target = fixed.geometry();
    let (vf, vm) = (vf.resample(target), vm.resample(target));
    let n = cfg.squarings;
    let forward = DeformationField::exp(&vf.scaled(-1.0), n).then(&DeformationField::exp(&vm, n));
    let inverse = DeformationField::exp(&vm.scaled(-1.0), n).then(&DeformationField::exp(&vf, n));
    Ok(RegistrationResult {
        min_jacobian: min_det(&forward),
        forward_field: forward,
        inverse_field: inverse,
        cost_trace: trace,
        converged,
        initial_mi,
        final_mi,
        translation: [0.0; 3],
    })
}

struct Level<'a> {
    fixed: &'a Image3D,
    moving: &'a Image3D,
    lattice: BSplineLattice,
    mi: ParzenMi,
    cfg: &'a RegistrationConfig,
}

struct State {
    vf: DeformationField,
    vm: DeformationField,
    mid_f: Image3D,
    mid_m: Image3D,
    mi: f64,
    d_fixed: Vec<f64>,
    d_moving: Vec<f64>,
    geodesic: f64,
    cost: f64,
    min_jacobian: f64,
}

impl Level<'_> {
    fn eval(&self, vf: DeformationField, vm: DeformationField) -> State {
        let phi_f = DeformationField::exp(&vf, self.cfg.squarings);
        let phi_m = DeformationField::exp(&vm, self.cfg.squarings);
        let mid_f = phi_f.warp(self.fixed, Interp::Linear);
        let mid_m = phi_m.warp(self.moving, Interp::Linear);
        let ev = self.mi.evaluate(mid_f.data(), mid_m.data(), None, true);
        let geodesic = mean_sq(&vf) + mean_sq(&vm);
        let cost = -self.cfg.similarity_weight * ev.value + self.cfg.geodesic_weight * geodesic;
        State {
            min_jacobian: min_det(&phi_f).min(min_det(&phi_m)),
            vf,
            vm,
            mid_f,
            mid_m,
            mi: ev.value,
            d_fixed: ev.d_fixed.expect("gradient requested"),
            d_moving: ev.d_moving.expect("gradient requested"),
            geodesic,
            cost,
        }
    }

    /// Descent directions for both velocities (dense, smooth), the share of
    /// force energy discarded by the lattice projection, and the largest
    /// projected force before the common mode was removed.
    fn direction(&self, s: &State) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, f64, f64) {
        let n = s.mid_f.data().len() as f64;
        let ws = self.cfg.similarity_weight * n;
        let wg = 2.0 * self.cfg.geodesic_weight;
        let force = |mid: &Image3D, d: &[f64], v: &DeformationField| -> Vec<[f64; 3]> {
            mid.gradient()
                .iter()
                .zip(d)
                .zip(v.vectors())
                .map(|((g, &di), vi)| [0, 1, 2].map(|c| ws * di * g[c] - wg * vi[c]))
                .collect()
        };
        let ff = force(&s.mid_f, &s.d_fixed, &s.vf);
        let fm = force(&s.mid_m, &s.d_moving, &s.vm);
        let mut pf = self.lattice.evaluate(&self.lattice.fit(&ff));
        let mut pm = self.lattice.evaluate(&self.lattice.fit(&fm));
        let raw = pf.iter().chain(&pm).map(norm).fold(0.0, f64::max);
        // Drop the common mode so the midpoint stays halfway (v_f = -v_m).
        // Moving both images the same way leaves the composed transform
        // unchanged and only lets MI raise the midpoint image's entropy.
        for (a, b) in pf.iter_mut().zip(pm.iter_mut()) {
            for c in 0..3 {
                let common = 0.5 * (a[c] + b[c]);
                a[c] -= common;
                b[c] -= common;
            }
        }
        let total: f64 = ff.iter().chain(&fm).map(|v| dot(v, v)).sum();
        let removed: f64 = ff
            .iter()
            .zip(&pf)
            .chain(fm.iter().zip(&pm))
            .map(|(a, b)| {
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                dot(&d, &d)
            })
            .sum();
        let residual = if total > 0.0 { removed / total } else { 0.0 };
        (pf, pm, residual, raw)
    }
}

fn axpy(v: &DeformationField, s: f64, d: &[[f64; 3]]) -> DeformationField {
    let geom: Geometry = *v.geometry();
    let out = v
        .vectors()
        .iter()
        .zip(d)
        .map(|(a, b)| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]])
        .collect();
    DeformationField::from_parts_unchecked(geom, out)
}

fn mean_sq(v: &DeformationField) -> f64 {
    let vs = v.vectors();
    vs.iter().map(|a| dot(a, a)).sum::<f64>() / vs.len() as f64
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(v: &[f64; 3]) -> f64 {
    dot(v, v).sqrt()
}
