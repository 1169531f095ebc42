//! Controlled synthetic deformations.
//!
//! A deformation is a sum of Gaussian bumps centred on random control
//! points, each pushing along a random unit direction. At degree `k` every
//! bump's support (the disk or ball of radius `3ρ` where it is truncated)
//! covers `k × 0.05%` of the image, and its peak amplitude is
//! `amplitude_scale × k` voxels. The field is used as a velocity and
//! exponentiated, so the applied warp is diffeomorphic and invertible.
//!
//! Control points, directions and placement depend only on the seed, so a
//! seed describes one deformation pattern whose degree can be dialled up.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`, which is
//! specified independently of platform.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demons::mean_squared;
use crate::error::{Error, Result};
use crate::eval::{transfer_labels, LabelImage};
use crate::field::{
    jacobian_determinant, smooth_iso, warp_unchecked, DisplacementTransform, Grid, Interpolation, ScalarImage,
    VectorField,
};
use crate::geodesic::{path_metric, run_broken_geodesic, BrokenGeodesic, DriverConfig};
use crate::svf::{exp_svf, ExpConfig};

/// Fraction of the image covered by one control point's support at degree 1.
pub const AREA_FRACTION_PER_DEGREE: f64 = 0.0005;

/// Largest degree in the standard sweep; placement uses this degree's
/// support radius so that control points do not move as `k` changes.
pub const MAX_STANDARD_DEGREE: u32 = 10;

/// Largest bump gradient allowed when `guarantee_diffeo` is set.
const FOLD_MARGIN: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_control_points: usize,
    pub degree: u32,
    pub seed: u64,
    /// Peak displacement per unit degree, in voxels.
    pub amplitude_scale: f64,
    pub guarantee_diffeo: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_control_points: 25, degree: 1, seed: 0, amplitude_scale: 0.5, guarantee_diffeo: true }
    }
}

/// Radius of a disk (2D) or ball (3D) covering `k × 0.05%` of `grid`.
pub fn support_radius(grid: &Grid, degree: u32) -> f64 {
    let area = degree as f64 * AREA_FRACTION_PER_DEGREE * grid.len() as f64;
    if grid.ndim() == 2 {
        (area / PI).sqrt()
    } else {
        (3.0 * area / (4.0 * PI)).cbrt()
    }
}

#[derive(Clone, Debug)]
struct ControlPoint {
    center: [f64; 3],
    direction: [f64; 3],
}

fn random_direction(rng: &mut ChaCha8Rng, ndim: usize) -> [f64; 3] {
    if ndim == 2 {
        let t = rng.gen_range(0.0..2.0 * PI);
        [t.cos(), t.sin(), 0.0]
    } else {
        // Uniform on the sphere: z uniform in [-1, 1], azimuth uniform.
        let z: f64 = rng.gen_range(-1.0..=1.0);
        let t = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).max(0.0).sqrt();
        [r * t.cos(), r * t.sin(), z]
    }
}

fn place_points(grid: &Grid, spec: &SynthSpec) -> Result<Vec<ControlPoint>> {
    let nd = grid.ndim();
    let radius = support_radius(grid, spec.degree.max(MAX_STANDARD_DEGREE));
    let margin = 2.0 * radius;
    let separation = 2.0 * radius;
    for a in 0..nd {
        let extent = (grid.dims()[a] - 1) as f64;
        if extent <= 2.0 * margin {
            return Err(Error::contract(format!(
                "axis {a} ({} voxels) cannot keep control points {margin:.2} voxels from both borders",
                grid.dims()[a]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points: Vec<ControlPoint> = Vec::with_capacity(spec.n_control_points);
    let max_attempts = 10_000 * spec.n_control_points.max(1);
    let mut attempts = 0;
    while points.len() < spec.n_control_points {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::contract(format!(
                "placed only {} of {} control points with border margin {margin:.2} and separation {separation:.2} voxels",
                points.len(),
                spec.n_control_points
            )));
        }
        let mut center = [0.0; 3];
        for (a, c) in center.iter_mut().enumerate().take(nd) {
            let extent = (grid.dims()[a] - 1) as f64;
            *c = rng.gen_range(margin..=extent - margin);
        }
        let far_enough = points.iter().all(|p| {
            let d2: f64 = (0..nd).map(|a| (p.center[a] - center[a]).powi(2)).sum();
            d2 >= separation * separation
        });
        if !far_enough {
            continue;
        }
        let direction = random_direction(&mut rng, nd);
        points.push(ControlPoint { center, direction });
    }
    Ok(points)
}

fn bump_field(grid: &Grid, points: &[ControlPoint], amplitude: f64, rho: f64) -> VectorField {
    let nd = grid.ndim();
    let cutoff2 = (3.0 * rho) * (3.0 * rho);
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let c = grid.coords(i);
            let mut v = [0.0; 3];
            for p in points {
                let r2: f64 = (0..nd).map(|a| (c[a] as f64 - p.center[a]).powi(2)).sum();
                if r2 < cutoff2 {
                    let w = amplitude * (-r2 / (2.0 * rho * rho)).exp();
                    for a in 0..nd {
                        v[a] += w * p.direction[a];
                    }
                }
            }
            (0..nd).map(move |a| v[a])
        })
        .collect();
    VectorField::from_parts(grid.clone(), data)
}

/// Builds the velocity field for `spec` on a grid of `dims`.
pub fn generate_deformation(grid: &Grid, spec: &SynthSpec) -> Result<VectorField> {
    if spec.degree == 0 {
        return Err(Error::contract("degree must be at least 1"));
    }
    if !(spec.amplitude_scale.is_finite() && spec.amplitude_scale >= 0.0) {
        return Err(Error::contract("amplitude_scale must be finite and non-negative"));
    }
    let points = place_points(grid, spec)?;
    let rho = support_radius(grid, spec.degree) / 3.0;
    let mut amplitude = spec.amplitude_scale * spec.degree as f64;
    if spec.guarantee_diffeo {
        // Peak gradient of a·exp(-r²/2ρ²) is a / (ρ √e).
        amplitude = amplitude.min(FOLD_MARGIN * rho * E.sqrt());
    }
    let mut field = bump_field(grid, &points, amplitude, rho);
    if spec.guarantee_diffeo && !field.is_zero() {
        let exp_cfg = ExpConfig::default();
        for _ in 0..32 {
            let jac = jacobian_determinant(&exp_svf(&field, &exp_cfg)?);
            if jac.min_max().0 > 0.0 {
                break;
            }
            amplitude *= 0.8;
            field = bump_field(grid, &points, amplitude, rho);
        }
    }
    Ok(field)
}

/// A synthetic registration problem with known answer.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
    /// Velocity whose exponential produced `fixed`.
    pub svf: VectorField,
    /// `fixed = moving ∘ truth`.
    pub truth: DisplacementTransform,
}

pub fn make_pair(img: &ScalarImage, spec: &SynthSpec) -> Result<SynthPair> {
    let svf = generate_deformation(img.grid(), spec)?;
    let truth = exp_svf(&svf, &ExpConfig::default())?;
    let fixed = warp_unchecked(img, truth.displacement(), Interpolation::Linear);
    Ok(SynthPair { moving: img.clone(), fixed, svf, truth })
}

/// One cell of a degree sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub k: u32,
    pub metric: f64,
    pub final_mse: f64,
    pub n_legs: usize,
}

/// Full result of a sweep cell, for callers that need more than the row.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub row: SweepRow,
    pub pair: SynthPair,
    pub geodesic: BrokenGeodesic,
}

/// Registers synthetic pairs for every (seed, degree) and records the path
/// metric. Rows come back ordered by seed, then degree.
pub fn metric_vs_degree_cells(
    img: &ScalarImage,
    base: &SynthSpec,
    degrees: &[u32],
    seeds: &[u64],
    cfg: &DriverConfig,
) -> Result<Vec<SweepCell>> {
    let jobs: Vec<(u64, u32)> = seeds.iter().flat_map(|&s| degrees.iter().map(move |&k| (s, k))).collect();
    jobs.par_iter()
        .map(|&(seed, k)| {
            let spec = SynthSpec { seed, degree: k, ..base.clone() };
            let pair = make_pair(img, &spec)?;
            let geodesic = run_broken_geodesic(&pair.moving, &pair.fixed, cfg)?;
            let row = SweepRow {
                seed,
                k,
                metric: path_metric(&geodesic),
                final_mse: geodesic.final_energy(),
                n_legs: geodesic.n_legs(),
            };
            Ok(SweepCell { row, pair, geodesic })
        })
        .collect()
}

pub fn metric_vs_degree(
    img: &ScalarImage,
    base: &SynthSpec,
    degrees: &[u32],
    seeds: &[u64],
    cfg: &DriverConfig,
) -> Result<Vec<SweepRow>> {
    Ok(metric_vs_degree_cells(img, base, degrees, seeds, cfg)?
        .into_iter()
        .map(|c| c.row)
        .collect())
}

pub const SWEEP_CSV_HEADER: &str = "seed,k,metric,final_mse,n_legs";

/// CSV with header `seed,k,metric,final_mse,n_legs`. Floats use Rust's
/// shortest round-trip formatting, so equal values give equal bytes.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.seed, r.k, r.metric, r.final_mse, r.n_legs));
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Label values of [`phantom`].
pub mod tissue {
    pub const BACKGROUND: u32 = 0;
    pub const GRAY_MATTER: u32 = 1;
    pub const WHITE_MATTER: u32 = 2;
    pub const CSF: u32 = 3;
}

/// Standard deviation of the texture added to [`phantom`].
pub const TEXTURE_STD: f64 = 0.2;
/// Correlation scale of the texture, in voxels.
pub const TEXTURE_SIGMA: f64 = 4.0;
const TEXTURE_SEED: u64 = 0x5eed_7e47;

/// A brain-like test image with its tissue labels: a folded gray-matter
/// ribbon around a white-matter core with two ventricles, band-limited by a
/// one-voxel Gaussian.
///
/// A fixed band-limited random texture covers the whole field of view so
/// that displacement is observable away from tissue boundaries too.
pub fn phantom(grid: &Grid) -> (ScalarImage, LabelImage) {
    let dims = grid.dims3();
    let nd = grid.ndim();
    let labels: Vec<u32> = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let mut u = [0.0; 3];
            for a in 0..nd {
                u[a] = 2.0 * c[a] as f64 / (dims[a] - 1).max(1) as f64 - 1.0;
            }
            let (x, y, z) = (u[0] / 0.82, u[1] / 0.9, u[2] / 0.8);
            let r = (x * x + y * y + z * z).sqrt();
            let theta = y.atan2(x);
            let fold = 0.05 * (7.0 * theta).sin() + 0.03 * (11.0 * theta + 1.3).cos() + 0.03 * (5.0 * z).sin();
            let outer = 0.86 + 0.5 * fold;
            let inner = 0.58 + fold;
            let vent = |cx: f64, cy: f64| {
                let dx = (u[0] - cx) / 0.07;
                let dy = (u[1] - cy) / 0.2;
                dx * dx + dy * dy + (u[2] / 0.3).powi(2) < 1.0
            };
            if r > outer {
                tissue::BACKGROUND
            } else if vent(-0.12, 0.05) || vent(0.12, 0.05) {
                tissue::CSF
            } else if r > inner {
                tissue::GRAY_MATTER
            } else {
                tissue::WHITE_MATTER
            }
        })
        .collect();
    let intensity = |l: u32| match l {
        tissue::GRAY_MATTER => 0.55,
        tissue::WHITE_MATTER => 0.9,
        tissue::CSF => 0.2,
        _ => 0.0,
    };
    let raw = ScalarImage::from_parts(grid.clone(), labels.iter().map(|&l| intensity(l)).collect());
    let img = smooth_iso(&raw, 1.0).expect("positive sigma");
    let img = add_texture(&img);
    let labels = LabelImage::new(grid.clone(), labels).expect("label count matches grid");
    (img, labels)
}

fn add_texture(img: &ScalarImage) -> ScalarImage {
    let grid = img.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
    let noise: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise = smooth_iso(&ScalarImage::from_parts(grid.clone(), noise), TEXTURE_SIGMA).expect("positive sigma");
    let n = grid.len() as f64;
    let mean = noise.mean();
    let sd = (noise.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { TEXTURE_STD / sd } else { 0.0 };
    let data = img.data().iter().zip(noise.data()).map(|(a, b)| a + scale * (b - mean)).collect();
    ScalarImage::from_parts(grid.clone(), data)
}

/// Ground-truth labels for the fixed image of a pair.
pub fn warp_labels_truth(labels: &LabelImage, pair: &SynthPair) -> Result<LabelImage> {
    transfer_labels(labels, &pair.truth)
}

/// MSE between two images with matching grids.
pub fn mse_unchecked(a: &ScalarImage, b: &ScalarImage) -> f64 {
    mean_squared(a, b)
}
