//! Local volume-change quantification from baseline/follow-up image pairs.
//!
//! The crate blends two intensity channels into one grayscale image,
//! registers the pair with a B-spline-regularized symmetric diffeomorphic
//! engine (or a free-form B-spline engine for comparison), turns the
//! resulting transformation into a Jacobian-determinant map, and extracts
//! radiomic texture features from that map for response prediction.
//!
//! Module map:
//!
//! - [`image`]: geometry-aware volumes, resampling, intensity conditioning, blending.
//! - [`metaimage`]: `.mha` reader/writer.
//! - [`phantom`]: synthetic sphere pairs with analytically known deformations.
//! - [`registration`]: rigid pre-alignment, mutual information, FFD and BSD engines.
//! - [`jacobian`]: Jacobian maps, Jacobian-integral change, Dice, cohort evaluation.
//! - [`radiomics`]: 56-feature first-order / GLCM / GLRLM vector.
//! - [`stats`]: Wilcoxon, AUC, clustering, LASSO, random forest, repeated CV.
//! - [`pipeline`]: end-to-end orchestration and parameter sweeps.

pub mod error;
pub mod image;
pub mod jacobian;
pub mod metaimage;
pub mod phantom;
pub mod pipeline;
pub mod radiomics;
pub mod registration;
pub mod stats;

pub use error::{Error, Result};
pub use image::{BlendConfig, Geometry, Image3D, Interp, Mask3D};
pub use registration::{DeformationField, RegistrationConfig, RegistrationResult};
