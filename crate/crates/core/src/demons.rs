//! One registration leg: estimate a single stationary velocity field that
//! pulls a moving image onto a fixed one with symmetric demons forces.
//!
//! Each iteration warps the moving image by `exp(v)`, computes the
//! normalized force
//!
//! ```text
//! f = r g / (|g|^2 + r^2),   r = fixed - warped,   g = (∇fixed + ∇warped) / 2
//! ```
//!
//! caps its magnitude, smooths it (fluid-like), adds it to `v` and smooths
//! the sum (diffusion-like). The solve runs coarse to fine over a dyadic
//! pyramid and returns the lowest-energy field seen at full resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    displacement_gradient_sq, sample_linear, smooth_iso, voxel_gradient, warp_unchecked, Grid,
    Interpolation, ScalarImage, VectorField,
};
use crate::svf::{exp_svf, ExpConfig};

/// Solver settings for a single leg. Serializes as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegConfig {
    pub iterations_per_level: usize,
    pub pyramid_levels: usize,
    /// Gaussian width (voxels) applied to each update.
    pub sigma_fluid: f64,
    /// Gaussian width (voxels) applied to the accumulated velocity.
    pub sigma_diffusion: f64,
    /// Largest per-voxel update magnitude, in voxels.
    pub force_cap: f64,
    /// Weight of the gradient penalty in the reported energy.
    pub reg_weight: f64,
    #[serde(flatten)]
    pub exp_cfg: ExpConfig,
}

impl Default for LegConfig {
    fn default() -> Self {
        LegConfig {
            iterations_per_level: 50,
            pyramid_levels: 3,
            sigma_fluid: 2.0,
            sigma_diffusion: 1.0,
            force_cap: 2.0,
            reg_weight: 0.0,
            exp_cfg: ExpConfig::default(),
        }
    }
}

impl LegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_level == 0 {
            return Err(Error::contract("iterations_per_level must be at least 1"));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::contract("pyramid_levels must be at least 1"));
        }
        for (name, s) in [("sigma_fluid", self.sigma_fluid), ("sigma_diffusion", self.sigma_diffusion)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::contract(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.force_cap.is_finite() && self.force_cap > 0.0) {
            return Err(Error::contract("force_cap must be positive"));
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return Err(Error::contract("reg_weight must be non-negative"));
        }
        self.exp_cfg.validate()
    }
}

/// Outcome of [`register_leg`].
#[derive(Clone, Debug, PartialEq)]
pub struct LegResult {
    /// Best velocity field found at full resolution.
    pub svf: VectorField,
    /// Energy of each iterate at full resolution, starting with the field
    /// inherited from the coarser level and ending with the last update.
    pub energy_trace: Vec<f64>,
    /// Per-level traces, coarsest first; the last entry equals `energy_trace`.
    pub level_traces: Vec<Vec<f64>>,
    pub final_energy: f64,
    pub leg_length: f64,
}

impl LegResult {
    /// Running minimum of `energy_trace`.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.energy_trace
            .iter()
            .scan(f64::INFINITY, |best, &e| {
                *best = best.min(e);
                Some(*best)
            })
            .collect()
    }
}

/// Mean squared difference; grids must agree.
pub(crate) fn mean_squared(a: &ScalarImage, b: &ScalarImage) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.data().len() as f64
}

fn energy_from_parts(warped: &ScalarImage, fixed: &ScalarImage, disp: &VectorField, reg_weight: f64) -> f64 {
    let sim = mean_squared(fixed, warped);
    if reg_weight == 0.0 {
        sim
    } else {
        sim + reg_weight * displacement_gradient_sq(disp)
    }
}

/// Energy of velocity `v`: mean squared residual between `fixed` and the
/// moving image warped by `exp(v)`, plus `reg_weight` times the mean squared
/// Frobenius norm of the displacement's spatial derivative.
pub fn energy(moving: &ScalarImage, fixed: &ScalarImage, v: &VectorField, cfg: &LegConfig) -> Result<f64> {
    moving.grid().ensure_same(fixed.grid(), "energy images")?;
    moving.grid().ensure_same(v.grid(), "energy velocity")?;
    let t = exp_svf(v, &cfg.exp_cfg)?;
    let warped = warp_unchecked(moving, t.displacement(), Interpolation::Linear);
    Ok(energy_from_parts(&warped, fixed, t.displacement(), cfg.reg_weight))
}

/// Capped, fluid-smoothed demons update for one iteration.
pub fn demons_update(moving_warped: &ScalarImage, fixed: &ScalarImage, cfg: &LegConfig) -> Result<VectorField> {
    moving_warped.grid().ensure_same(fixed.grid(), "demons update")?;
    let raw = raw_force(moving_warped, fixed, cfg.force_cap);
    smooth_iso(&raw, cfg.sigma_fluid)
}

// Denominators below this produce a zero force.
const DENOM_EPS: f64 = 1e-9;

fn raw_force(moving_warped: &ScalarImage, fixed: &ScalarImage, cap: f64) -> VectorField {
    let grid = fixed.grid();
    let nd = grid.ndim();
    let gf = voxel_gradient(fixed);
    let gm = voxel_gradient(moving_warped);
    let mut data = vec![0.0; grid.len() * nd];
    for (i, out) in data.chunks_mut(nd).enumerate() {
        let r = fixed.data()[i] - moving_warped.data()[i];
        let a = gf.vector(i);
        let b = gm.vector(i);
        let g = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])];
        let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        let denom = g2 + r * r;
        if denom < DENOM_EPS {
            continue;
        }
        let scale = r / denom;
        let mut f = [scale * g[0], scale * g[1], scale * g[2]];
        let norm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
        if norm > cap {
            let s = cap / norm;
            f.iter_mut().for_each(|c| *c *= s);
        }
        out.copy_from_slice(&f[..nd]);
    }
    VectorField::from_parts(grid.clone(), data)
}

/// Halves every non-singleton axis by block averaging; odd extents are
/// padded by repeating the last slice.
pub(crate) fn downsample(img: &ScalarImage) -> ScalarImage {
    let grid = img.grid();
    let dims = grid.dims3();
    let nd = grid.ndim();
    let factor: Vec<usize> = (0..3).map(|a| if a < nd && dims[a] > 1 { 2 } else { 1 }).collect();
    let new_dims: Vec<usize> = (0..nd).map(|a| dims[a].div_ceil(factor[a])).collect();
    let new_spacing: Vec<f64> = (0..nd).map(|a| grid.spacing()[a] * factor[a] as f64).collect();
    let coarse = Grid::new(&new_dims, &new_spacing).expect("halved grid stays valid");
    let taps = (factor[0] * factor[1] * factor[2]) as f64;
    let data = (0..coarse.len())
        .map(|i| {
            let c = coarse.coords(i);
            let mut acc = 0.0;
            for dz in 0..factor[2] {
                for dy in 0..factor[1] {
                    for dx in 0..factor[0] {
                        let q = [
                            (c[0] * factor[0] + dx).min(dims[0] - 1),
                            (c[1] * factor[1] + dy).min(dims[1] - 1),
                            (c[2] * factor[2] + dz).min(dims[2] - 1),
                        ];
                        acc += img.at(q);
                    }
                }
            }
            acc / taps
        })
        .collect();
    ScalarImage::from_parts(coarse, data)
}

/// Resamples a coarse velocity field onto `fine`, doubling components along
/// axes that were halved.
pub(crate) fn upsample_field(v: &VectorField, fine: &Grid) -> VectorField {
    let coarse = v.grid();
    let nd = fine.ndim();
    let halved: Vec<bool> = (0..3)
        .map(|a| a < nd && coarse.dims3()[a] != fine.dims3()[a])
        .collect();
    let mut data = Vec::with_capacity(fine.len() * nd);
    for i in 0..fine.len() {
        let c = fine.coords(i);
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if halved[a] { (c[a] as f64 + 0.5) * 0.5 - 0.5 } else { c[a] as f64 };
        }
        let s = sample_linear(coarse, v.data(), nd, p);
        for a in 0..nd {
            data.push(if halved[a] { 2.0 * s[a] } else { s[a] });
        }
    }
    VectorField::from_parts(fine.clone(), data)
}

// Smallest extent a pyramid level may have along a non-singleton axis.
const MIN_LEVEL_EXTENT: usize = 8;

fn build_pyramid(moving: &ScalarImage, fixed: &ScalarImage, levels: usize) -> Vec<(ScalarImage, ScalarImage)> {
    let mut pyr = vec![(moving.clone(), fixed.clone())];
    while pyr.len() < levels {
        let (m, f) = pyr.last().unwrap();
        let can_halve = m
            .grid()
            .dims()
            .iter()
            .filter(|&&n| n > 1)
            .all(|&n| n.div_ceil(2) >= MIN_LEVEL_EXTENT);
        if !can_halve {
            break;
        }
        let next = (downsample(m), downsample(f));
        pyr.push(next);
    }
    pyr.reverse();
    pyr
}

/// Registers `moving` to `fixed`, returning the velocity `u` such that
/// `moving ∘ exp(u) ≈ fixed`.
pub fn register_leg(moving: &ScalarImage, fixed: &ScalarImage, cfg: &LegConfig) -> Result<LegResult> {
    cfg.validate()?;
    moving.grid().ensure_same(fixed.grid(), "register_leg")?;

    let pyramid = build_pyramid(moving, fixed, cfg.pyramid_levels);
    let n_levels = pyramid.len();
    let mut v = VectorField::zeros(pyramid[0].0.grid().clone());
    let mut level_traces = Vec::with_capacity(n_levels);
    let mut best: Option<(f64, VectorField)> = None;

    for (level, (m, f)) in pyramid.iter().enumerate() {
        if v.grid() != m.grid() {
            v = upsample_field(&v, m.grid());
        }
        let finest = level + 1 == n_levels;
        let mut trace = Vec::with_capacity(cfg.iterations_per_level + 1);
        for it in 0..=cfg.iterations_per_level {
            let t = exp_svf(&v, &cfg.exp_cfg)?;
            let warped = warp_unchecked(m, t.displacement(), Interpolation::Linear);
            let e = energy_from_parts(&warped, f, t.displacement(), cfg.reg_weight);
            if !e.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite energy at pyramid level {level}, iteration {it}"
                )));
            }
            trace.push(e);
            if finest && best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, v.clone()));
            }
            // The last pass only scores the final iterate.
            if it == cfg.iterations_per_level {
                break;
            }
            let update = demons_update(&warped, f, cfg)?;
            if update.is_zero() {
                break;
            }
            v = smooth_iso(&v.add(&update)?, cfg.sigma_diffusion)?;
        }
        log::debug!(
            "level {}/{}: {} iterations, energy {:.6e} -> {:.6e}",
            level + 1,
            n_levels,
            trace.len(),
            trace.first().copied().unwrap_or(0.0),
            trace.last().copied().unwrap_or(0.0)
        );
        level_traces.push(trace);
    }

    let (final_energy, svf) = best.expect("finest level records at least one energy");
    let leg_length = crate::geodesic::v_norm(&svf);
    Ok(LegResult {
        svf,
        energy_trace: level_traces.last().cloned().unwrap_or_default(),
        level_traces,
        final_energy,
        leg_length,
    })
}
