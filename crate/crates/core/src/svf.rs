//! Group exponential of stationary velocity fields.
//!
//! `exp_svf` uses scaling and squaring: the field is divided by `2^K` until
//! its largest vector is at most `max_step_norm` voxels, the result is taken
//! as a first-order displacement, and that displacement is composed with
//! itself `K` times. The inverse of `exp(v)` is `exp(-v)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{compose_fields, sample_linear, DisplacementTransform, Provenance, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpConfig {
    /// Lower bound on the number of squaring steps.
    pub min_scalings: u32,
    /// Largest per-voxel displacement (voxels) allowed after the initial scaling.
    pub max_step_norm: f64,
}

impl Default for ExpConfig {
    fn default() -> Self {
        ExpConfig { min_scalings: 2, max_step_norm: 0.5 }
    }
}

impl ExpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step_norm.is_finite() && self.max_step_norm > 0.0) {
            return Err(Error::contract("max_step_norm must be finite and positive"));
        }
        if self.min_scalings > 60 {
            return Err(Error::contract("min_scalings above 60 is not meaningful"));
        }
        Ok(())
    }

    /// Number of squarings for a field whose largest vector is `max_norm`.
    pub fn scalings_for(&self, max_norm: f64) -> u32 {
        let needed = if max_norm > self.max_step_norm {
            (max_norm / self.max_step_norm).log2().ceil() as u32
        } else {
            0
        };
        needed.max(self.min_scalings)
    }
}

fn ensure_finite(v: &VectorField) -> Result<()> {
    if v.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::contract("velocity field contains non-finite values"))
    }
}

/// `exp(v)` by scaling and squaring.
pub fn exp_svf(v: &VectorField, cfg: &ExpConfig) -> Result<DisplacementTransform> {
    cfg.validate()?;
    ensure_finite(v)?;
    if v.is_zero() {
        return Ok(DisplacementTransform::identity(v.grid().clone()));
    }
    let k = cfg.scalings_for(v.max_norm());
    // Division by a power of two is exact, so exp(v) and the K-1 step
    // exponential of v/2 share every intermediate value.
    let mut d = v.scaled(0.5f64.powi(k as i32));
    for _ in 0..k {
        d = compose_fields(&d, &d);
    }
    Ok(DisplacementTransform::from_displacement(d, Provenance::Exponential))
}

/// Inverse of `exp(v)`, computed as `exp(-v)`.
pub fn inverse_transform(v: &VectorField, cfg: &ExpConfig) -> Result<DisplacementTransform> {
    exp_svf(&v.scaled(-1.0), cfg)
}

/// Explicit Euler integration of `dx/dt = v(x)` over unit time with
/// `steps` steps and linear sampling of `v`. Slow; kept as an independent
/// reference for `exp_svf`.
pub fn exp_oracle(v: &VectorField, steps: usize) -> Result<DisplacementTransform> {
    if steps == 0 {
        return Err(Error::contract("oracle needs at least one step"));
    }
    ensure_finite(v)?;
    let grid = v.grid();
    let nd = grid.ndim();
    let h = 1.0 / steps as f64;
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let c = grid.coords(i);
            let start = [c[0] as f64, c[1] as f64, c[2] as f64];
            let mut x = start;
            for _ in 0..steps {
                let u = sample_linear(grid, v.data(), nd, x);
                for a in 0..3 {
                    x[a] += h * u[a];
                }
            }
            (0..nd).map(move |a| x[a] - start[a])
        })
        .collect();
    Ok(DisplacementTransform::from_displacement(
        VectorField::new(grid.clone(), data)?,
        Provenance::Exponential,
    ))
}
