//! Free-form deformation: a cubic B-spline displacement field optimized by
//! normalized gradient descent with backtracking.

use crate::error::{Error, Result};
use crate::image::{Image3D, Mask3D};

use super::bspline::BSplineLattice;
use super::field::DeformationField;
use super::mi::ParzenMi;
use super::rigid::rigidity_penalty_with_gradient;
use super::{ensure_same_grid, mask_on, min_det, pyramid, Plateau, CostTerms, RegistrationConfig, RegistrationResult, Stage};

/// Registers `moving` onto `fixed` (same grid) with a bending-energy
/// regularized B-spline displacement.
pub fn register_ffd(fixed: &Image3D, moving: &Image3D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    ensure_same_grid(fixed, moving)?;
    run(fixed, moving, cfg, None, &cfg.iterations)
}

/// Mutual information between `fixed` and `moving` warped by the lattice
/// displacement `coeffs`, and its gradient with respect to every coefficient.
pub fn similarity_gradient(
    fixed: &Image3D,
    moving: &Image3D,
    lattice: &BSplineLattice,
    coeffs: &[[f64; 3]],
    bins: usize,
) -> Result<(f64, Vec<[f64; 3]>)> {
    ensure_same_grid(fixed, moving)?;
    fixed.geometry().ensure_matches(lattice.image_geometry(), "lattice")?;
    if coeffs.len() != lattice.n_ctrl() {
        return Err(Error::Shape(format!("expected {} coefficients, got {}", lattice.n_ctrl(), coeffs.len())));
    }
    let mi = ParzenMi::for_images(fixed, moving, bins)?;
    let sampled = sample_warped(moving, fixed.geometry(), &lattice.evaluate(coeffs));
    let warped: Vec<f64> = sampled.iter().map(|s| s.0).collect();
    let ev = mi.evaluate(fixed.data(), &warped, None, true);
    let d = ev.d_moving.expect("gradient requested");
    let force: Vec<[f64; 3]> = sampled.iter().zip(&d).map(|((_, g), &dm)| g.map(|x| dm * x)).collect();
    Ok((ev.value, lattice.adjoint(&force)))
}

/// Moving intensities and their spatial gradients at `x + u(x)`.
fn sample_warped(moving: &Image3D, geom: &crate::image::Geometry, u: &[[f64; 3]]) -> Vec<(f64, [f64; 3])> {
    if moving.geometry() == geom {
        let inv = geom.spacing.map(|s| 1.0 / s);
        geom.par_map(|idx, ijk| {
            let d = u[idx];
            moving.sample_with_gradient_index([0, 1, 2].map(|a| ijk[a] as f64 + d[a] * inv[a]))
        })
    } else {
        geom.par_map(|idx, ijk| {
            let p = geom.physical(ijk[0], ijk[1], ijk[2]);
            let d = u[idx];
            moving.sample_with_gradient([p[0] + d[0], p[1] + d[1], p[2] + d[2]])
        })
    }
}

struct Level<'a> {
    fixed: &'a Image3D,
    moving: &'a Image3D,
    lattice: BSplineLattice,
    mi: ParzenMi,
    rigidity: Option<Mask3D>,
    w_sim: f64,
    w_be: f64,
    w_rig: f64,
}

struct State {
    coeffs: Vec<[f64; 3]>,
    mi: f64,
    regularizer: f64,
    cost: f64,
    grad: Vec<[f64; 3]>,
}

impl Level<'_> {
    fn eval(&self, coeffs: Vec<[f64; 3]>) -> Result<State> {
        let geom = self.fixed.geometry();
        let u = self.lattice.evaluate(&coeffs);
        let sampled = sample_warped(self.moving, geom, &u);
        let warped: Vec<f64> = sampled.iter().map(|s| s.0).collect();
        let ev = self.mi.evaluate(self.fixed.data(), &warped, None, true);
        let d = ev.d_moving.expect("gradient requested");
        let mut dense: Vec<[f64; 3]> = sampled
            .iter()
            .zip(&d)
            .map(|((_, g), &dm)| g.map(|x| -self.w_sim * dm * x))
            .collect();
        let mut regularizer = 0.0;
        if let Some(mask) = &self.rigidity {
            let field = DeformationField::from_parts_unchecked(*geom, u);
            let (r, rg) = rigidity_penalty_with_gradient(&field, mask)?;
            regularizer += self.w_rig * r;
            for (a, b) in dense.iter_mut().zip(&rg) {
                for c in 0..3 {
                    a[c] += self.w_rig * b[c];
                }
            }
        }
        let mut grad = self.lattice.adjoint(&dense);
        if self.w_be > 0.0 {
            let (be, be_grad) = self.lattice.bending_energy(&coeffs);
            regularizer += self.w_be * be;
            for (a, b) in grad.iter_mut().zip(&be_grad) {
                for c in 0..3 {
                    a[c] += self.w_be * b[c];
                }
            }
        }
        let cost = -self.w_sim * ev.value + regularizer;
        if !cost.is_finite() {
            return Err(Error::Diverged {
                level: 0,
                reason: "non-finite cost".into(),
                trace_len: 0,
            });
        }
        Ok(State {
            coeffs,
            mi: ev.value,
            regularizer,
            cost,
            grad,
        })
    }
}

/// Shared optimizer for the plain engine and the rigidity pre-pass.
/// Levels with a zero iteration budget only carry the field forward.
pub(crate) fn run(
    fixed: &Image3D,
    moving: &Image3D,
    cfg: &RegistrationConfig,
    rigidity: Option<&Mask3D>,
    iterations: &[usize],
) -> Result<RegistrationResult> {
    let fixed_pyr = pyramid(fixed, cfg)?;
    let moving_pyr = pyramid(moving, cfg)?;
    let stage = if rigidity.is_some() { Stage::Rigidity } else { Stage::Ffd };
    let mut trace = Vec::new();
    let mut dense: Option<DeformationField> = None;
    let mut converged = false;
    let (mut initial_mi, mut final_mi) = (0.0, 0.0);

    for level in 0..cfg.levels {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        let geom = *f.geometry();
        let lattice = BSplineLattice::new(geom, cfg.mesh_at(level))?;
        let coeffs = match &dense {
            Some(prev) => lattice.fit(prev.resample(&geom).vectors()),
            None => vec![[0.0; 3]; lattice.n_ctrl()],
        };
        let lvl = Level {
            fixed: f,
            moving: m,
            mi: ParzenMi::for_images(f, m, cfg.mi_bins)?,
            rigidity: rigidity.map(|mk| mask_on(mk, &geom)),
            lattice,
            w_sim: cfg.similarity_weight,
            w_be: if rigidity.is_some() { 0.0 } else { cfg.bending_weight },
            w_rig: cfg.rigidity_weight,
        };
        let with_level = |e: Error, len: usize| match e {
            Error::Diverged { reason, .. } => Error::Diverged {
                level,
                reason,
                trace_len: len,
            },
            e => e,
        };
        let mut state = lvl.eval(coeffs).map_err(|e| with_level(e, trace.len()))?;
        if level + 1 == cfg.levels {
            initial_mi = state.mi;
        }
        let h = geom.min_spacing();
        let gamma = cfg.step_size;
        let mut step = gamma;
        let mut plateau = Plateau::new(cfg, state.cost);
        converged = false;
        for _ in 0..iterations[level] {
            let gmax = state.grad.iter().map(|g| norm(g)).fold(0.0, f64::max);
            if gmax == 0.0 {
                converged = true;
                break;
            }
            let mut accepted = false;
            loop {
                let scale = step * h / gmax;
                let trial: Vec<[f64; 3]> = state
                    .coeffs
                    .iter()
                    .zip(&state.grad)
                    .map(|(c, g)| [c[0] - scale * g[0], c[1] - scale * g[1], c[2] - scale * g[2]])
                    .collect();
                let next = lvl.eval(trial).map_err(|e| with_level(e, trace.len()))?;
                if next.cost < state.cost {
                    state = next;
                    accepted = true;
                    break;
                }
                step *= 0.5;
                if step < gamma / 64.0 {
                    break;
                }
            }
            trace.push(CostTerms {
                stage,
                level,
                similarity: state.mi,
                geodesic: 0.0,
                regularizer: state.regularizer,
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
        dense = Some(DeformationField::from_parts_unchecked(geom, lvl.lattice.evaluate(&state.coeffs)));
    }

    let mut forward = dense.expect("at least one level");
    forward = forward.resample(fixed.geometry());
    let inverse = forward.invert(cfg.inverse_iterations);
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

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Geometry;

    fn blob(g: Geometry, c: [f64; 3], r: f64) -> Image3D {
        Image3D::from_fn(g, |p| {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            1.0 / (1.0 + ((d - r) / 1.5).exp())
        })
    }

    #[test]
    fn similarity_gradient_matches_finite_differences() {
        let g = Geometry::cube(8, 1.0).unwrap();
        let fixed = blob(g, [3.6, 3.4, 3.5], 2.2);
        let moving = blob(g, [3.9, 3.2, 3.7], 2.0);
        let lattice = BSplineLattice::new(g, 3.0).unwrap();
        let base: Vec<[f64; 3]> = (0..lattice.n_ctrl()).map(|_| [0.3, 0.2, 0.1]).collect();
        let (_, grad) = similarity_gradient(&fixed, &moving, &lattice, &base, 16).unwrap();
        let eps = 1e-5;
        let centre = lattice.ctrl_index(2, 3, 2);
        for idx in [centre, lattice.ctrl_index(3, 2, 3)] {
            for c in 0..3 {
                let mut plus = base.clone();
                plus[idx][c] += eps;
                let mut minus = base.clone();
                minus[idx][c] -= eps;
                let fp = similarity_gradient(&fixed, &moving, &lattice, &plus, 16).unwrap().0;
                let fm = similarity_gradient(&fixed, &moving, &lattice, &minus, 16).unwrap().0;
                let fd = (fp - fm) / (2.0 * eps);
                let an = grad[idx][c];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{idx} {c}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn recovers_small_shift() {
        let g = Geometry::cube(24, 2.0).unwrap();
        let fixed = blob(g, [23.0, 23.0, 23.0], 10.0);
        let moving = blob(g, [25.0, 23.0, 23.0], 10.0);
        let cfg = RegistrationConfig {
            mesh_spacing: 32.0,
            iterations: vec![40, 30, 20],
            ..Default::default()
        };
        let res = register_ffd(&fixed, &moving, &cfg).unwrap();
        assert!(res.final_mi > res.initial_mi);
        let u = res.forward_field.sample([23.0, 23.0, 23.0]);
        assert!((u[0] - 2.0).abs() < 0.6, "{u:?}");
        assert!(!res.cost_trace.is_empty());
    }
}
