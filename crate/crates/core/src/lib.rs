//! Large diffeomorphic image registration by broken geodesics.
//!
//! A single stationary-velocity-field registration (a "leg") only reaches
//! deformations close to the identity. This crate chains legs: each one
//! registers the current warped image to the target, is kept only if it
//! improves the match, and is composed onto the path so far. The sum of the
//! legs' velocity norms is reported as a deformation metric.
//!
//! Modules, bottom-up:
//! - [`field`]: grids, interpolation, warping, composition, derivatives, smoothing.
//! - [`svf`]: scaling-and-squaring exponential and an Euler reference integrator.
//! - [`demons`]: one symmetric-demons leg over a dyadic pyramid.
//! - [`geodesic`]: the leg-chaining driver and the path-length metric.
//! - [`synth`]: controlled random deformations and degree sweeps.
//! - [`eval`]: MSE, label transfer, Dice and Jacobian statistics.
//! - [`metaimage`]: `.mhd`/`.mha` I/O.
//! - [`report`]: JSON/CSV run artifacts.

pub mod demons;
pub mod error;
pub mod eval;
pub mod field;
pub mod geodesic;
pub mod metaimage;
pub mod report;
pub mod svf;
pub mod synth;

pub use demons::{demons_update, energy, register_leg, LegConfig, LegResult};
pub use error::{Error, Result};
pub use eval::{dice, evaluate_pair, mse, transfer_labels, EvalReport, LabelImage};
pub use field::{
    compose, gaussian_smooth, gradient, interpolate, jacobian_determinant, warp, DisplacementTransform, Grid,
    Interpolation, Provenance, ScalarImage, VectorField,
};
pub use geodesic::{forward_backward, path_metric, run_broken_geodesic, v_norm, BrokenGeodesic, DriverConfig, ForwardBackward};
pub use svf::{exp_oracle, exp_svf, inverse_transform, ExpConfig};
pub use synth::{generate_deformation, make_pair, metric_vs_degree, SynthPair, SynthSpec, SweepRow};
