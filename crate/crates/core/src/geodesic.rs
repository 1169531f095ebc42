//! Broken-geodesic driver: chain registration legs until the image match
//! stops improving, and measure the resulting path length.
//!
//! Starting from `S_0 = moving`, each round registers the current image to
//! `fixed`, giving a velocity `u`. The candidate is kept only if it lowers the
//! mean squared error against `fixed` by at least a relative margin. Accepted
//! legs compose into `γ = exp(v_1) ∘ exp(v_2) ∘ … ∘ exp(v_N)` and the path
//! length is `Σ ‖v_i‖`, with `‖·‖` the root-mean-square vector magnitude.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::demons::{mean_squared, register_leg, LegConfig};
use crate::error::{Error, Result};
use crate::field::{compose, warp_unchecked, DisplacementTransform, Interpolation, ScalarImage, VectorField};
use crate::svf::{exp_svf, inverse_transform, ExpConfig};

/// Stopping rule and leg settings. Serializes flat: the leg keys sit next
/// to `max_legs`, `min_energy_decrease` and `patience`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverConfig {
    pub max_legs: usize,
    /// Relative improvement a leg must achieve to be accepted.
    pub min_energy_decrease: f64,
    /// Consecutive rejections tolerated before stopping. Since a leg is a
    /// deterministic function of the current image, the first rejection
    /// already decides every retry and the driver stops there.
    pub patience: usize,
    #[serde(flatten)]
    pub leg_cfg: LegConfig,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig { max_legs: 10, min_energy_decrease: 1e-3, patience: 2, leg_cfg: LegConfig::default() }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_legs == 0 {
            return Err(Error::contract("max_legs must be at least 1"));
        }
        if !(self.min_energy_decrease.is_finite() && (0.0..1.0).contains(&self.min_energy_decrease)) {
            return Err(Error::contract("min_energy_decrease must lie in [0, 1)"));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be at least 1"));
        }
        self.leg_cfg.validate()
    }
}

/// RMS vector magnitude, in voxels.
pub fn v_norm(v: &VectorField) -> f64 {
    let n = v.grid().len();
    let sum: f64 = v.data().iter().map(|x| x * x).sum();
    (sum / n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrokenGeodesic {
    /// Accepted velocities, in the order they were estimated.
    pub legs: Vec<VectorField>,
    pub leg_lengths: Vec<f64>,
    pub total_length: f64,
    /// `exp(v_1) ∘ … ∘ exp(v_N)`; warping the moving image by it gives the
    /// registered image.
    pub composed: DisplacementTransform,
    /// Energy before any leg.
    pub initial_energy: f64,
    /// Energy after each accepted leg; strictly decreasing.
    pub energy_history: Vec<f64>,
    /// Number of legs that were estimated and rejected.
    pub rejected: usize,
    /// Wall-clock seconds per accepted leg. Not deterministic.
    pub leg_seconds: Vec<f64>,
}

impl BrokenGeodesic {
    pub fn n_legs(&self) -> usize {
        self.legs.len()
    }

    /// Energy of the final registered image.
    pub fn final_energy(&self) -> f64 {
        self.energy_history.last().copied().unwrap_or(self.initial_energy)
    }

    /// Rebuilds a geodesic from stored velocities, recomputing lengths and
    /// the composed transform.
    pub fn from_legs(
        legs: Vec<VectorField>,
        initial_energy: f64,
        energy_history: Vec<f64>,
        exp_cfg: &ExpConfig,
    ) -> Result<Self> {
        let Some(first) = legs.first() else {
            return Err(Error::contract("from_legs needs a grid; use identity() for empty paths"));
        };
        let mut composed = DisplacementTransform::identity(first.grid().clone());
        for v in &legs {
            composed = compose(&composed, &exp_svf(v, exp_cfg)?)?;
        }
        let leg_lengths: Vec<f64> = legs.iter().map(v_norm).collect();
        Ok(BrokenGeodesic {
            total_length: leg_lengths.iter().fold(0.0, |a, b| a + b),
            leg_lengths,
            legs,
            composed,
            initial_energy,
            energy_history,
            rejected: 0,
            leg_seconds: Vec::new(),
        })
    }

    /// `exp(-v_N) ∘ … ∘ exp(-v_1)`: warping the fixed image by it maps back
    /// onto the moving image.
    pub fn inverse(&self, exp_cfg: &ExpConfig) -> Result<DisplacementTransform> {
        let mut inv = DisplacementTransform::identity(self.composed.grid().clone());
        for v in &self.legs {
            inv = compose(&inverse_transform(v, exp_cfg)?, &inv)?;
        }
        Ok(inv)
    }

    /// Empty path on `grid`.
    pub fn identity(grid: crate::field::Grid, initial_energy: f64) -> Self {
        BrokenGeodesic {
            legs: Vec::new(),
            leg_lengths: Vec::new(),
            total_length: 0.0,
            composed: DisplacementTransform::identity(grid),
            initial_energy,
            energy_history: Vec::new(),
            rejected: 0,
            leg_seconds: Vec::new(),
        }
    }
}

/// Path length `Σ ‖v_i‖` recomputed from the legs. An empty path gives +0.
pub fn path_metric(g: &BrokenGeodesic) -> f64 {
    g.legs.iter().map(v_norm).fold(0.0, |a, b| a + b)
}

/// Runs the broken-geodesic registration of `moving` onto `fixed`.
pub fn run_broken_geodesic(moving: &ScalarImage, fixed: &ScalarImage, cfg: &DriverConfig) -> Result<BrokenGeodesic> {
    cfg.validate()?;
    moving.grid().ensure_same(fixed.grid(), "run_broken_geodesic")?;
    let exp_cfg = &cfg.leg_cfg.exp_cfg;

    let mut e_min = mean_squared(moving, fixed);
    if !e_min.is_finite() {
        return Err(Error::Numerical("initial energy is not finite".into()));
    }
    let mut path = BrokenGeodesic::identity(moving.grid().clone(), e_min);
    if e_min == 0.0 {
        return Ok(path);
    }

    let mut current = moving.clone();
    while path.legs.len() < cfg.max_legs {
        let started = Instant::now();
        let leg = register_leg(&current, fixed, &cfg.leg_cfg).map_err(|e| match e {
            Error::Numerical(msg) if path.legs.is_empty() => {
                Error::Numerical(format!("first leg failed: {msg}"))
            }
            other => other,
        })?;
        let step = exp_svf(&leg.svf, exp_cfg)?;
        let candidate = compose(&path.composed, &step)?;
        // Resample the original image through the whole path so repeated
        // legs do not accumulate interpolation blur.
        let temp = warp_unchecked(moving, candidate.displacement(), Interpolation::Linear);
        let e = mean_squared(&temp, fixed);
        if !e.is_finite() {
            return Err(Error::Numerical(format!("leg {} produced a non-finite energy", path.legs.len() + 1)));
        }
        if e < e_min * (1.0 - cfg.min_energy_decrease) {
            log::info!("leg {} accepted: energy {:.6e} -> {:.6e}, length {:.4}", path.legs.len() + 1, e_min, e, leg.leg_length);
            path.leg_lengths.push(leg.leg_length);
            path.total_length += leg.leg_length;
            path.legs.push(leg.svf);
            path.energy_history.push(e);
            path.leg_seconds.push(started.elapsed().as_secs_f64());
            path.composed = candidate;
            current = temp;
            e_min = e;
        } else {
            log::info!("leg {} rejected: energy {:.6e} vs {:.6e}", path.legs.len() + 1, e, e_min);
            path.rejected += 1;
            // Legs are deterministic, so any of the `patience` retries from
            // this unchanged image would reproduce the rejected leg exactly.
            break;
        }
    }
    Ok(path)
}

/// Both registration directions plus their round-trip residuals.
#[derive(Clone, Debug)]
pub struct ForwardBackward {
    pub forward: BrokenGeodesic,
    pub backward: BrokenGeodesic,
    /// MSE between `moving` and `moving` warped forward then backward.
    pub moving_roundtrip_mse: f64,
    /// MSE between `fixed` and `fixed` warped backward then forward.
    pub fixed_roundtrip_mse: f64,
    /// MSE between the unregistered images.
    pub unregistered_mse: f64,
}

/// Registers `moving → fixed` and `fixed → moving` independently.
pub fn forward_backward(moving: &ScalarImage, fixed: &ScalarImage, cfg: &DriverConfig) -> Result<ForwardBackward> {
    let forward = run_broken_geodesic(moving, fixed, cfg)?;
    let backward = run_broken_geodesic(fixed, moving, cfg)?;
    let roundtrip = |img: &ScalarImage, first: &DisplacementTransform, second: &DisplacementTransform| {
        let once = warp_unchecked(img, first.displacement(), Interpolation::Linear);
        let twice = warp_unchecked(&once, second.displacement(), Interpolation::Linear);
        mean_squared(&twice, img)
    };
    Ok(ForwardBackward {
        moving_roundtrip_mse: roundtrip(moving, &forward.composed, &backward.composed),
        fixed_roundtrip_mse: roundtrip(fixed, &backward.composed, &forward.composed),
        unregistered_mse: mean_squared(moving, fixed),
        forward,
        backward,
    })
}
