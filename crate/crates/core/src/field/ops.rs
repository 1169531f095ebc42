use rayon::prelude::*;

use super::interp::{sample_cubic, sample_linear, Interpolation};
use super::{DisplacementTransform, Grid, Provenance, ScalarImage, VectorField};
use crate::error::Result;

/// Derivative along `axis` in voxel units: central differences inside,
/// one-sided at the faces, zero on singleton axes.
#[inline]
fn axis_diff(grid: &Grid, data: &[f64], channels: usize, ch: usize, c: [usize; 3], axis: usize) -> f64 {
    let n = grid.dims3()[axis];
    if n == 1 {
        return 0.0;
    }
    let at = |k: usize| {
        let mut q = c;
        q[axis] = k;
        data[grid.index(q) * channels + ch]
    };
    let i = c[axis];
    if i == 0 {
        at(1) - at(0)
    } else if i == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(i + 1) - at(i - 1))
    }
}

/// Pullback warp: `out(x) = img(x + d(x))`.
pub fn warp(img: &ScalarImage, t: &DisplacementTransform, scheme: Interpolation) -> Result<ScalarImage> {
    img.grid().ensure_same(t.grid(), "warp")?;
    Ok(warp_unchecked(img, t.displacement(), scheme))
}

pub(crate) fn warp_unchecked(img: &ScalarImage, disp: &VectorField, scheme: Interpolation) -> ScalarImage {
    let grid = img.grid();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let d = disp.vector(i);
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            match scheme {
                Interpolation::Linear => sample_linear(grid, img.data(), 1, p)[0],
                Interpolation::Cubic => sample_cubic(grid, img.data(), 1, p)[0],
            }
        })
        .collect();
    ScalarImage::from_parts(grid.clone(), data)
}

/// Composition `t2 ∘ t1`: the result applies `t1` first, then `t2`, so that
/// `d(x) = d1(x) + d2(x + d1(x))` with `d2` sampled linearly. Under the
/// pullback warp, `warp(img, compose(t2, t1)) ≈ warp(warp(img, t2), t1)`.
pub fn compose(t2: &DisplacementTransform, t1: &DisplacementTransform) -> Result<DisplacementTransform> {
    t1.grid().ensure_same(t2.grid(), "compose")?;
    let disp = compose_fields(t2.displacement(), t1.displacement());
    let provenance = match (t2.leg_count(), t1.leg_count()) {
        (0, 0) => Provenance::Identity,
        (0, _) => t1.provenance().clone(),
        (_, 0) => t2.provenance().clone(),
        (a, b) => Provenance::Composed(a + b),
    };
    Ok(DisplacementTransform::from_displacement(disp, provenance))
}

pub(crate) fn compose_fields(d2: &VectorField, d1: &VectorField) -> VectorField {
    let grid = d1.grid();
    let nd = grid.ndim();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let c = grid.coords(i);
            let a = d1.vector(i);
            let p = [c[0] as f64 + a[0], c[1] as f64 + a[1], c[2] as f64 + a[2]];
            let b = sample_linear(grid, d2.data(), nd, p);
            (0..nd).map(move |k| a[k] + b[k])
        })
        .collect();
    VectorField::from_parts(grid.clone(), data)
}

/// Spatial gradient in physical units (intensity per unit length).
pub fn gradient(img: &ScalarImage) -> VectorField {
    let grid = img.grid();
    let s = grid.spacing3();
    let raw = voxel_gradient(img);
    let nd = grid.ndim();
    let data = raw
        .into_data()
        .chunks(nd)
        .flat_map(|g| (0..nd).map(move |k| g[k] / s[k]).collect::<Vec<_>>())
        .collect();
    VectorField::from_parts(grid.clone(), data)
}

/// Gradient per voxel step, ignoring spacing. This is the gradient that
/// pairs with voxel-unit displacements.
pub(crate) fn voxel_gradient(img: &ScalarImage) -> VectorField {
    let grid = img.grid();
    let nd = grid.ndim();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let c = grid.coords(i);
            (0..nd).map(move |a| axis_diff(grid, img.data(), 1, 0, c, a))
        })
        .collect();
    VectorField::from_parts(grid.clone(), data)
}

/// Per-voxel determinant of the Jacobian of φ = id + d.
///
/// The physical Jacobian is `δ_ij + (s_i / s_j) ∂d_i/∂n_j`; the spacing
/// factors form a similarity transform, so the determinant matches the
/// voxel-space one.
pub fn jacobian_determinant(t: &DisplacementTransform) -> ScalarImage {
    let disp = t.displacement();
    let grid = disp.grid();
    let nd = grid.ndim();
    let s = grid.spacing3();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let mut j = [[0.0f64; 3]; 3];
            for (r, row) in j.iter_mut().enumerate().take(nd) {
                for (col, v) in row.iter_mut().enumerate().take(nd) {
                    let diff = axis_diff(grid, disp.data(), nd, r, c, col) * s[r] / s[col];
                    *v = if r == col { 1.0 + diff } else { diff };
                }
            }
            if nd == 2 {
                j[0][0] * j[1][1] - j[0][1] * j[1][0]
            } else {
                j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
            }
        })
        .collect();
    ScalarImage::from_parts(grid.clone(), data)
}

/// Mean over voxels of the squared Frobenius norm of ∂d/∂n (voxel units).
pub(crate) fn displacement_gradient_sq(disp: &VectorField) -> f64 {
    let grid = disp.grid();
    let nd = grid.ndim();
    let per_voxel: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let mut acc = 0.0;
            for r in 0..nd {
                for a in 0..nd {
                    let g = axis_diff(grid, disp.data(), nd, r, c, a);
                    acc += g * g;
                }
            }
            acc
        })
        .collect();
    per_voxel.iter().sum::<f64>() / grid.len() as f64
}
