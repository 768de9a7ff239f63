//! Desk-scale laboratory for the Daedalus attack: adversarial perturbations
//! that break Non-Maximum Suppression in end-to-end object detectors.
//!
//! The crate hosts the whole pipeline at micro scale:
//!
//! * [`autodiff`] — a minimal reverse-mode differentiation engine (tape of
//!   primitive ops over dense `f64` tensors);
//! * [`geometry`] — boxes, IoU, hard NMS, soft-NMS and the dimension-floor
//!   defence filter;
//! * [`detector`] — a seeded single-scale YOLO-style micro-detector with
//!   feature-map decoding, a supervised trainer, and binary serialization;
//! * [`losses`] — the three NMS-breaking adversarial losses `f1`/`f2`/`f3`
//!   plus the ensemble-of-substitutes expectation;
//! * [`attack`] — the L2 and L0 optimizers (tanh change of variables,
//!   binary search over the loss/distortion trade-off constant);
//! * [`eot`] — expectation-over-transformation poster optimization with a
//!   sub-sampled non-printability score;
//! * [`evaluation`] — FP rate, all-point-interpolation mAP, distortion
//!   statistics and the sweep harness;
//! * [`scenes`] — procedural synthetic scenes with analytic ground truth.
//!
//! The `daedalus` binary ties the modules together as a CLI.

pub mod attack;
pub mod autodiff;
pub mod detector;
pub mod eot;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod scenes;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
