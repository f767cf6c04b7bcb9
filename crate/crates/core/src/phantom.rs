//! Synthetic baseline/follow-up sphere pairs with analytically known
//! deformation and volume change.
//!
//! The follow-up tumour is the baseline sphere scaled towards its centre by
//! a factor `s(d)` that may vary with direction `d` (per-octant multipliers
//! blended smoothly). Inside the sphere the true map is `x -> c + s(d)(x - c)`,
//! whose Jacobian determinant is `s(d)^3`; a C1 cosine taper brings the
//! displacement to zero at twice the radius.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Geometry, Image3D, Mask3D};
use crate::registration::DeformationField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: Geometry,
    /// Sphere centre (mm).
    pub center: [f64; 3],
    pub baseline_radius: f64,
    /// Linear scale `s`; the volume ratio is `s^3`.
    pub shrink_factor: f64,
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    /// Per-octant multipliers of `s`, octant bit `a` set for the positive
    /// half of axis `a`. Rescaled so the mean volume ratio stays `s^3`.
    pub heterogeneity: Option<[f64; 8]>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// 64^3 grid at 2 mm, 20 mm sphere in the middle, no shrinkage.
    fn default() -> Self {
        let grid = Geometry::cube(64, 2.0).expect("static geometry");
        PhantomSpec {
            grid,
            center: [63.0; 3],
            baseline_radius: 20.0,
            shrink_factor: 1.0,
            foreground_intensity: 0.9,
            background_intensity: 0.1,
            heterogeneity: None,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return bad(format!("shrink factor must be in (0, 1], got {}", self.shrink_factor));
        }
        if !(self.baseline_radius > 0.0 && self.baseline_radius.is_finite()) {
            return bad(format!("radius must be > 0, got {}", self.baseline_radius));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if let Some(m) = &self.heterogeneity {
            if m.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("octant multipliers must be > 0, got {m:?}"));
            }
        }
        let g = &self.grid;
        for a in 0..3 {
            let lo = g.origin[a] + 4.0 * g.spacing[a];
            let hi = g.origin[a] + (g.dims[a] as f64 - 5.0) * g.spacing[a];
            if self.center[a] - self.baseline_radius < lo || self.center[a] + self.baseline_radius > hi {
                return bad(format!("sphere leaves the grid (4-voxel margin) along axis {a}"));
            }
        }
        Ok(())
    }

    /// Linear scale factor along unit direction `d`.
    pub fn scale_along(&self, d: [f64; 3]) -> f64 {
        ScaleProfile::new(self).along(d)
    }

    /// Displacement of the true baseline-to-follow-up map at `p` (mm).
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        ScaleProfile::new(self).displacement(self, p)
    }
}

/// Direction-dependent scale with the octant normalizer precomputed.
struct ScaleProfile {
    s: f64,
    octants: Option<([f64; 8], f64)>,
}

impl ScaleProfile {
    fn new(spec: &PhantomSpec) -> Self {
        ScaleProfile {
            s: spec.shrink_factor,
            octants: spec.heterogeneity.map(|m| (m, octant_normalizer(&m))),
        }
    }

    fn along(&self, d: [f64; 3]) -> f64 {
        match &self.octants {
            None => self.s,
            Some((m, k)) => self.s * octant_blend(m, d) * k,
        }
    }

    /// Scale for the ray through `r` (relative to the centre) and `|r|`.
    fn at(&self, r: [f64; 3]) -> (f64, f64) {
        let dist = norm(r);
        let s = if dist > 0.0 { self.along(r.map(|v| v / dist)) } else { self.s };
        (s, dist)
    }

    fn displacement(&self, spec: &PhantomSpec, p: [f64; 3]) -> [f64; 3] {
        let r = [p[0] - spec.center[0], p[1] - spec.center[1], p[2] - spec.center[2]];
        let (s, dist) = self.at(r);
        let big_r = spec.baseline_radius;
        let w = if dist <= big_r {
            1.0
        } else if dist >= 2.0 * big_r {
            return [0.0; 3];
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (dist - big_r) / big_r).cos())
        };
        r.map(|v| (s - 1.0) * w * v)
    }
}

/// Smooth blend of octant multipliers: weights `prod_a (1 + sign_a d_a) / 2`
/// sum to one and reduce to a single octant along its diagonal.
fn octant_blend(m: &[f64; 8], d: [f64; 3]) -> f64 {
    (0..8)
        .map(|k| {
            let w: f64 = (0..3)
                .map(|a| {
                    let sign = if k >> a & 1 == 1 { 1.0 } else { -1.0 };
                    0.5 * (1.0 + sign * d[a])
                })
                .product();
            w * m[k]
        })
        .sum()
}

/// Factor making the direction average of `(blend * factor)^3` equal one
/// (Fibonacci-sphere quadrature).
fn octant_normalizer(m: &[f64; 8]) -> f64 {
    const N: usize = 4096;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mean: f64 = (0..N)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / N as f64;
            let rho = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            octant_blend(m, [rho * t.cos(), rho * t.sin(), z]).powi(3)
        })
        .sum::<f64>()
        / N as f64;
    mean.powf(-1.0 / 3.0)
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub baseline_img: Image3D,
    pub followup_img: Image3D,
    pub baseline_mask: Mask3D,
    pub followup_mask: Mask3D,
    /// Baseline point -> follow-up point.
    pub true_field: DeformationField,
    /// `100 (1 - |followup mask| / |baseline mask|)`.
    pub true_change_pct: f64,
}

impl PhantomCase {
    /// Heterogeneous shrinkage is the positive (responder) class.
    pub fn label(&self) -> bool {
        self.spec.heterogeneity.is_some()
    }
}

/// Builds a phantom pair. Intensities ramp across one voxel at the sphere
/// surface to mimic partial volume.
pub fn make_sphere_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let g = spec.grid;
    let c = spec.center;
    let width = g.min_spacing();
    let big_r = spec.baseline_radius;
    let (fg, bg) = (spec.foreground_intensity, spec.background_intensity);
    // signed distance (mm) inside the surface at radius `edge`
    let profile = |inside: f64| bg + (fg - bg) * (0.5 + inside / width).clamp(0.0, 1.0);
    let scale = ScaleProfile::new(spec);
    let radius_at = |p: [f64; 3]| -> (f64, f64) {
        let (s, dist) = scale.at([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        (dist, s * big_r)
    };

    let baseline_clean = Image3D::from_fn(g, |p| profile(big_r - radius_at(p).0));
    let followup_clean = Image3D::from_fn(g, |p| {
        let (dist, edge) = radius_at(p);
        profile(edge - dist)
    });
    let baseline_mask = Mask3D::from_fn(g, |p| radius_at(p).0 <= big_r);
    let followup_mask = Mask3D::from_fn(g, |p| {
        let (dist, edge) = radius_at(p);
        dist <= edge
    });
    let baseline_img = add_noise(&baseline_clean, spec.noise_sd, spec.seed, 0)?;
    let followup_img = add_noise(&followup_clean, spec.noise_sd, spec.seed, 1)?;
    let true_field = DeformationField::from_fn(g, |p| scale.displacement(spec, p));
    let true_change_pct = 100.0 * (1.0 - followup_mask.count() as f64 / baseline_mask.count() as f64);
    Ok(PhantomCase {
        spec: spec.clone(),
        baseline_img,
        followup_img,
        baseline_mask,
        followup_mask,
        true_field,
        true_change_pct,
    })
}

fn add_noise(img: &Image3D, sd: f64, seed: u64, stream: u64) -> Result<Image3D> {
    if sd == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let data = img.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    Image3D::new(*img.geometry(), data)
}

/// Random octant multipliers `1 + U(-amplitude, amplitude)`.
pub fn random_octants<R: Rng>(rng: &mut R, amplitude: f64) -> [f64; 8] {
    std::array::from_fn(|_| 1.0 + rng.random_range(-amplitude..=amplitude))
}

/// `n` cases on the default grid with target changes evenly spanning
/// `change_range` (percent). Roughly half the cases get heterogeneous
/// shrinkage; noise seeds are drawn from `seed`.
pub fn make_cohort(n: usize, change_range: (f64, f64), seed: u64) -> Result<Vec<PhantomCase>> {
    let base = PhantomSpec {
        noise_sd: 0.02,
        ..PhantomSpec::default()
    };
    make_cohort_from(&base, n, change_range, seed)
}

/// As [`make_cohort`], starting from an arbitrary base [`PhantomSpec`].
pub fn make_cohort_from(base: &PhantomSpec, n: usize, change_range: (f64, f64), seed: u64) -> Result<Vec<PhantomCase>> {
    cohort_specs(base, n, change_range, seed)?
        .iter()
        .map(make_sphere_phantom)
        .collect()
}

/// The [`PhantomSpec`]s [`make_cohort_from`] would build, without rendering.
pub fn cohort_specs(base: &PhantomSpec, n: usize, change_range: (f64, f64), seed: u64) -> Result<Vec<PhantomSpec>> {
    let (lo, hi) = change_range;
    if n < 2 {
        return Err(Error::Config(format!("cohort needs n >= 2, got {n}")));
    }
    if !(0.0..100.0).contains(&lo) || !(0.0..100.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("invalid change range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let change = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let heterogeneous = rng.random_bool(0.5);
            let amplitude = rng.random_range(0.1..0.25);
            let octants = random_octants(&mut rng, amplitude);
            let case_seed: u64 = rng.random();
            let spec = PhantomSpec {
                shrink_factor: (1.0 - change / 100.0).cbrt(),
                heterogeneity: (heterogeneous && change > 0.0).then_some(octants),
                seed: case_seed,
                ..base.clone()
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::jacobian_map;

    #[test]
    fn no_shrink_gives_identical_images() {
        let case = make_sphere_phantom(&PhantomSpec::default()).unwrap();
        assert_eq!(case.baseline_img, case.followup_img);
        assert_eq!(case.true_change_pct, 0.0);
        assert_eq!(case.true_field.max_norm(), 0.0);
    }

    #[test]
    fn half_volume_change() {
        let spec = PhantomSpec {
            shrink_factor: 0.5f64.cbrt(),
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        assert!((case.true_change_pct - 50.0).abs() < 2.0, "{}", case.true_change_pct);
    }

    #[test]
    fn small_sphere_volume_ratio() {
        let spec = PhantomSpec {
            grid: Geometry::cube(48, 1.0).unwrap(),
            center: [23.5; 3],
            baseline_radius: 10.0,
            shrink_factor: 0.5,
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        let ratio = case.followup_mask.count() as f64 / case.baseline_mask.count() as f64;
        assert!((ratio - 0.125).abs() < 0.01, "{ratio}");
        // a point on the baseline surface lands on the 5 mm follow-up surface
        let p = [33.5, 23.5, 23.5];
        let u = spec.displacement(p);
        assert!((p[0] + u[0] - 28.5).abs() < 1e-9);
    }

    #[test]
    fn true_field_jacobian_is_volume_ratio_inside() {
        let spec = PhantomSpec {
            shrink_factor: 0.8,
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        let j = jacobian_map(&case.true_field);
        let g = spec.grid;
        for idx in 0..g.len() {
            let p = g.physical_of(idx);
            let r = norm([p[0] - 63.0, p[1] - 63.0, p[2] - 63.0]);
            if r < 16.0 && r > 0.0 {
                assert!((j.data()[idx] - 0.512).abs() < 1e-6, "{}", j.data()[idx]);
            }
        }
        assert!(j.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn heterogeneous_keeps_mean_volume_ratio() {
        let m = [0.8, 1.2, 1.1, 0.9, 1.0, 1.15, 0.85, 1.05];
        let spec = PhantomSpec {
            shrink_factor: 0.5f64.cbrt(),
            heterogeneity: Some(m),
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        assert!((case.true_change_pct - 50.0).abs() < 3.0, "{}", case.true_change_pct);
        assert!(case.label());
        let a = spec.scale_along([1.0, 1.0, 1.0].map(|v: f64| v / 3f64.sqrt()));
        let b = spec.scale_along([-1.0, -1.0, -1.0].map(|v: f64| v / 3f64.sqrt()));
        assert!(a > b);
    }

    #[test]
    fn true_field_maps_baseline_mask_onto_followup() {
        let spec = PhantomSpec {
            shrink_factor: 0.5f64.cbrt(),
            heterogeneity: Some([0.9, 1.1, 1.0, 1.05, 0.95, 1.0, 1.1, 0.9]),
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        let pulled = case.true_field.warp_mask(&case.followup_mask);
        let inter = pulled.data().iter().zip(case.baseline_mask.data()).filter(|(a, b)| **a && **b).count();
        let dsc = 2.0 * inter as f64 / (pulled.count() + case.baseline_mask.count()) as f64;
        assert!(dsc >= 0.95, "{dsc}");
    }

    #[test]
    fn cohort_spacing_and_determinism() {
        let base = PhantomSpec {
            grid: Geometry::cube(32, 2.0).unwrap(),
            center: [31.0; 3],
            baseline_radius: 12.0,
            noise_sd: 0.02,
            ..PhantomSpec::default()
        };
        let specs = cohort_specs(&base, 5, (10.0, 80.0), 3).unwrap();
        let changes: Vec<f64> = specs.iter().map(|s| 100.0 * (1.0 - s.shrink_factor.powi(3))).collect();
        for (c, e) in changes.iter().zip([10.0, 27.5, 45.0, 62.5, 80.0]) {
            assert!((c - e).abs() < 1e-9);
        }
        let a = make_cohort_from(&base, 3, (10.0, 50.0), 9).unwrap();
        let b = make_cohort_from(&base, 3, (10.0, 50.0), 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.baseline_img, y.baseline_img);
            assert_eq!(x.followup_img, y.followup_img);
        }
        let ident = make_cohort_from(&base, 2, (0.0, 0.0), 1).unwrap();
        assert!(ident.iter().all(|c| c.true_change_pct == 0.0 && c.true_field.max_norm() == 0.0));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            PhantomSpec { shrink_factor: 0.0, ..PhantomSpec::default() },
            PhantomSpec { shrink_factor: 1.2, ..PhantomSpec::default() },
            PhantomSpec { baseline_radius: 60.0, ..PhantomSpec::default() },
            PhantomSpec { center: [10.0, 63.0, 63.0], ..PhantomSpec::default() },
        ] {
            assert!(matches!(make_sphere_phantom(&spec), Err(Error::Config(_))));
        }
        assert!(make_cohort(1, (0.0, 10.0), 0).is_err());
        assert!(make_cohort(3, (50.0, 10.0), 0).is_err());
    }
}
