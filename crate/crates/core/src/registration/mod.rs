//! Rigid pre-alignment plus two deformable engines under a Parzen mutual
//! information similarity:
//!
//! - [`register_ffd`]: free-form B-spline displacement, bending-energy regularized.
//! - [`register_bsd`]: symmetric diffeomorphic registration with two stationary
//!   half-velocity fields whose per-iteration updates are projected onto a
//!   cubic B-spline lattice.
//!
//! Both run a coarse-to-fine schedule whose control mesh halves at every level.

pub mod bspline;
mod bsd;
mod ffd;
mod field;
pub mod mi;
mod rigid;

pub use bsd::register_bsd;
pub use bspline::{BSplineGrid, BSplineLattice};
pub use ffd::{register_ffd, similarity_gradient};
pub use field::DeformationField;
pub(crate) use field::det3;
pub use mi::{mutual_information, ParzenMi};
pub use rigid::{rigid_center_align, rigidity_penalty, rigidity_penalty_with_gradient};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{downsample, Image3D, Interp, Mask3D};

/// Which intensity channel is being registered; selects default parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[default]
    Blend,
    Pet,
    Ct,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Blend => "blend",
            Channel::Pet => "pet",
            Channel::Ct => "ct",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blend" => Ok(Channel::Blend),
            "pet" => Ok(Channel::Pet),
            "ct" => Ok(Channel::Ct),
            _ => Err(Error::Config(format!("unknown channel {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Bsd,
    Ffd,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Bsd => "bsd",
            Engine::Ffd => "ffd",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsd" => Ok(Engine::Bsd),
            "ffd" => Ok(Engine::Ffd),
            _ => Err(Error::Config(format!("unknown engine {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Control-mesh spacing at the coarsest level (mm); halved per finer level.
    pub mesh_spacing: f64,
    /// Maximum update per iteration, in voxels of the current level.
    pub step_size: f64,
    /// Iteration budget per level, coarsest first.
    pub iterations: Vec<usize>,
    pub mi_bins: usize,
    pub similarity_weight: f64,
    /// Weight of the mean squared velocity norm (BSD).
    pub geodesic_weight: f64,
    /// Weight of the bending energy (FFD).
    pub bending_weight: f64,
    /// Weight of the rigidity penalty in the optional pre-alignment pass.
    pub rigidity_weight: f64,
    /// Iterations per level of the rigidity pre-alignment pass.
    pub rigidity_iterations: Vec<usize>,
    /// Registration domain: fixed-mask bounding box dilated by this (mm);
    /// `<= 0` disables cropping.
    pub crop_margin: f64,
    /// A level stops once the energy fell by less than this fraction over
    /// the last `convergence_window` iterations.
    pub convergence_tolerance: f64,
    pub convergence_window: usize,
    /// Scaling-and-squaring steps for velocity exponentiation.
    pub squarings: u32,
    /// Fixed-point iterations for numerical field inversion.
    pub inverse_iterations: usize,
    #[serde(skip)]
    pub rigidity_mask: Option<Mask3D>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            mesh_spacing: 32.0,
            step_size: 0.15,
            iterations: vec![100, 70, 40],
            mi_bins: 32,
            similarity_weight: 1.0,
            geodesic_weight: 0.01,
            bending_weight: 0.01,
            rigidity_weight: 0.1,
            rigidity_iterations: vec![20, 10, 0],
            crop_margin: 50.0,
            convergence_tolerance: 1e-3,
            convergence_window: 5,
            squarings: 6,
            inverse_iterations: 20,
            rigidity_mask: None,
        }
    }
}

impl RegistrationConfig {
    /// Defaults per channel: 32 mm mesh for blended and PET, 16 mm for CT;
    /// the rigidity pre-pass only for blended and PET.
    pub fn for_channel(channel: Channel) -> Self {
        match channel {
            Channel::Blend | Channel::Pet => RegistrationConfig::default(),
            Channel::Ct => RegistrationConfig {
                mesh_spacing: 16.0,
                rigidity_weight: 0.0,
                ..RegistrationConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.iterations.len() != self.levels || self.iterations.iter().any(|&n| n == 0) {
            return bad(format!("need {} positive iteration counts, got {:?}", self.levels, self.iterations));
        }
        if !self.rigidity_iterations.is_empty() && self.rigidity_iterations.len() != self.levels {
            return bad(format!("rigidity_iterations must have {} entries", self.levels));
        }
        if !(self.mesh_spacing > 0.0) {
            return bad(format!("mesh spacing must be > 0, got {}", self.mesh_spacing));
        }
        if !(self.step_size > 0.0) {
            return bad(format!("step size must be > 0, got {}", self.step_size));
        }
        if self.mi_bins < 8 {
            return bad(format!("mi_bins must be >= 8, got {}", self.mi_bins));
        }
        for (name, w) in [
            ("similarity_weight", self.similarity_weight),
            ("geodesic_weight", self.geodesic_weight),
            ("bending_weight", self.bending_weight),
            ("rigidity_weight", self.rigidity_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if self.similarity_weight == 0.0 {
            return bad("similarity_weight must be > 0".into());
        }
        if !(self.convergence_tolerance >= 0.0) || self.convergence_window == 0 {
            return bad("convergence tolerance must be >= 0 and window >= 1".into());
        }
        if self.squarings > 20 {
            return bad("squarings must be <= 20".into());
        }
        Ok(())
    }

    /// Control-mesh spacing at `level` (0 = coarsest).
    pub fn mesh_at(&self, level: usize) -> f64 {
        self.mesh_spacing / f64::from(1u32 << level)
    }

    /// Image downsampling factor at `level` (0 = coarsest).
    pub fn shrink_at(&self, level: usize) -> usize {
        1usize << (self.levels - 1 - level)
    }
}

/// One optimizer iteration's energy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub stage: Stage,
    pub level: usize,
    /// Mutual information of the current (accepted) state.
    pub similarity: f64,
    /// Mean squared velocity norm over both half-fields (mm^2); zero for FFD.
    pub geodesic: f64,
    /// FFD: bending energy (plus weighted rigidity in the pre-pass).
    /// BSD: fraction of the force energy removed by the B-spline projection.
    pub regularizer: f64,
    /// Step length tried this iteration (voxels).
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rigidity,
    Ffd,
    Bsd,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Fixed-space point -> moving-space point.
    pub forward_field: DeformationField,
    /// Moving-space point -> fixed-space point.
    pub inverse_field: DeformationField,
    pub cost_trace: Vec<CostTerms>,
    pub converged: bool,
    /// MI at the start and end of the finest level.
    pub initial_mi: f64,
    pub final_mi: f64,
    pub min_jacobian: f64,
    /// Centre-of-geometry pre-translation (mm) folded into the fields.
    pub translation: [f64; 3],
}

impl RegistrationResult {
    /// Writes the cost trace as CSV.
    pub fn write_trace<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "stage", "level", "similarity", "geodesic", "regularizer", "step", "accepted"])?;
        for (i, t) in self.cost_trace.iter().enumerate() {
            out.write_record([
                i.to_string(),
                format!("{:?}", t.stage).to_lowercase(),
                t.level.to_string(),
                format!("{:.10e}", t.similarity),
                format!("{:.10e}", t.geodesic),
                format!("{:.10e}", t.regularizer),
                format!("{:.6e}", t.step),
                t.accepted.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("trace", e))
    }
}

/// Stopping rule on the accepted energy history of one level.
pub(crate) struct Plateau {
    window: usize,
    tol: f64,
    costs: Vec<f64>,
}

impl Plateau {
    pub(crate) fn new(cfg: &RegistrationConfig, initial: f64) -> Self {
        Plateau {
            window: cfg.convergence_window,
            tol: cfg.convergence_tolerance,
            costs: vec![initial],
        }
    }

    /// Records an accepted energy; true once the level has flattened out.
    pub(crate) fn push(&mut self, cost: f64) -> bool {
        self.costs.push(cost);
        let n = self.costs.len();
        n > self.window && self.costs[n - 1 - self.window] - cost <= self.tol * cost.abs().max(1e-12)
    }
}

/// Gaussian pyramid, coarsest level first.
pub(crate) fn pyramid(img: &Image3D, cfg: &RegistrationConfig) -> Result<Vec<Image3D>> {
    (0..cfg.levels).map(|l| downsample(img, cfg.shrink_at(l))).collect()
}

/// Mask resampled (nearest) onto another grid.
pub(crate) fn mask_on(mask: &Mask3D, target: &crate::image::Geometry) -> Mask3D {
    if mask.geometry() == target {
        return mask.clone();
    }
    let img = crate::image::resample(&mask.to_image(), target, Interp::Nearest);
    Mask3D::threshold(&img, 0.5)
}

pub(crate) fn ensure_same_grid(fixed: &Image3D, moving: &Image3D) -> Result<()> {
    fixed
        .geometry()
        .ensure_matches(moving.geometry(), "registration inputs (resample moving onto fixed first)")
}

/// Optional tumour masks guiding pre-alignment and cropping.
#[derive(Clone, Copy, Debug, Default)]
pub struct RegistrationMasks<'a> {
    pub fixed: Option<&'a Mask3D>,
    pub moving: Option<&'a Mask3D>,
}

/// Full registration: centre-of-geometry translation (when both masks are
/// given), cropping around the fixed mask, the optional rigidity-penalized
/// FFD pre-pass (when `cfg.rigidity_mask` is set and its weight is > 0), then
/// the chosen deformable engine. Returned fields live on the fixed grid.
pub fn register(
    fixed: &Image3D,
    moving: &Image3D,
    engine: Engine,
    cfg: &RegistrationConfig,
    masks: RegistrationMasks<'_>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    ensure_same_grid(fixed, moving)?;
    let full = *fixed.geometry();

    let translation = match (masks.fixed, masks.moving) {
        (Some(f), Some(m)) => rigid_center_align(f, m)?,
        _ => [0.0; 3],
    };
    let shift = DeformationField::constant(full, translation);
    let moving_pre = if translation == [0.0; 3] {
        moving.clone()
    } else {
        shift.warp(moving, Interp::Linear)
    };

    let crop = match masks.fixed {
        Some(m) if cfg.crop_margin > 0.0 => Some(m.bounding_box(cfg.crop_margin)?),
        _ => None,
    };
    let (fixed_c, moving_c, rigid_mask_c) = match crop {
        Some((lo, hi)) => (
            fixed.crop(lo, hi)?,
            moving_pre.crop(lo, hi)?,
            cfg.rigidity_mask.as_ref().map(|m| mask_on(m, &full).crop(lo, hi)).transpose()?,
        ),
        None => (
            fixed.clone(),
            moving_pre,
            cfg.rigidity_mask.as_ref().map(|m| mask_on(m, &full)),
        ),
    };

    let mut trace = Vec::new();
    let mut pre_pass = None;
    let mut moving_main = moving_c.clone();
    if let Some(mask) = rigid_mask_c.as_ref().filter(|m| cfg.rigidity_weight > 0.0 && !m.is_empty()) {
        if cfg.rigidity_iterations.iter().any(|&n| n > 0) {
            let pre = ffd::run(&fixed_c, &moving_c, cfg, Some(mask), &cfg.rigidity_iterations)?;
            moving_main = pre.forward_field.warp(&moving_c, Interp::Linear);
            trace.extend(pre.cost_trace.iter().copied());
            pre_pass = Some(pre);
        }
    }

    let main = match engine {
        Engine::Bsd => register_bsd(&fixed_c, &moving_main, cfg)?,
        Engine::Ffd => register_ffd(&fixed_c, &moving_main, cfg)?,
    };
    trace.extend(main.cost_trace.iter().copied());

    let (mut forward, mut inverse) = match &pre_pass {
        Some(pre) => (
            main.forward_field.then(&pre.forward_field),
            pre.inverse_field.then(&main.inverse_field),
        ),
        None => (main.forward_field.clone(), main.inverse_field.clone()),
    };
    if let Some((lo, _)) = crop {
        forward = forward.embed(&full, lo);
        inverse = inverse.embed(&full, lo);
    }
    if translation != [0.0; 3] {
        forward = forward.plus_constant(translation);
        inverse = DeformationField::constant(full, translation.map(|t| -t)).then(&inverse);
    }
    let min_jacobian = forward
        .jacobian_matrices()
        .iter()
        .map(field::det3)
        .fold(f64::INFINITY, f64::min);
    Ok(RegistrationResult {
        forward_field: forward,
        inverse_field: inverse,
        cost_trace: trace,
        converged: main.converged,
        initial_mi: main.initial_mi,
        final_mi: main.final_mi,
        min_jacobian,
        translation,
    })
}

pub(crate) fn min_det(field: &DeformationField) -> f64 {
    field
        .jacobian_matrices()
        .iter()
        .map(field::det3)
        .fold(f64::INFINITY, f64::min)
}
