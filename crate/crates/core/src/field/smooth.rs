//! Separable Gaussian smoothing with half-sample symmetric borders.
//!
//! Reflecting the signal at the faces keeps every output a convex
//! combination of inputs (rows of the operator sum to one) and also keeps the
//! columns summing to one, so both constants and the field mean survive.

use rayon::prelude::*;

use super::{Grid, ScalarImage, VectorField};
use crate::error::{Error, Result};

/// Containers that can be smoothed component-wise.
pub trait Smooth: Sized {
    fn grid(&self) -> &Grid;
    fn channels(&self) -> usize;
    fn raw(&self) -> &[f64];
    fn with_raw(&self, data: Vec<f64>) -> Self;
}

impl Smooth for ScalarImage {
    fn grid(&self) -> &Grid {
        ScalarImage::grid(self)
    }
    fn channels(&self) -> usize {
        1
    }
    fn raw(&self) -> &[f64] {
        self.data()
    }
    fn with_raw(&self, data: Vec<f64>) -> Self {
        ScalarImage::from_parts(self.grid().clone(), data)
    }
}

impl Smooth for VectorField {
    fn grid(&self) -> &Grid {
        VectorField::grid(self)
    }
    fn channels(&self) -> usize {
        VectorField::grid(self).ndim()
    }
    fn raw(&self) -> &[f64] {
        self.data()
    }
    fn with_raw(&self, data: Vec<f64>) -> Self {
        VectorField::from_parts(VectorField::grid(self).clone(), data)
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

// Half-sample symmetric reflection with period 2n.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Smooths each component with a separable Gaussian; `sigma` holds one
/// standard deviation (in voxels) per axis, and zero skips that axis.
pub fn gaussian_smooth<T: Smooth>(field: &T, sigma: &[f64]) -> Result<T> {
    let grid = field.grid();
    if sigma.len() != grid.ndim() {
        return Err(Error::contract(format!(
            "{} smoothing widths for a {}D grid",
            sigma.len(),
            grid.ndim()
        )));
    }
    if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::contract("smoothing widths must be finite and non-negative"));
    }
    let mut data: Option<Vec<f64>> = None;
    for (axis, &s) in sigma.iter().enumerate() {
        if s == 0.0 || grid.dims()[axis] == 1 {
            continue;
        }
        let src = data.as_deref().unwrap_or(field.raw());
        data = Some(convolve_axis(grid, src, field.channels(), axis, &gaussian_kernel(s)));
    }
    Ok(match data {
        Some(d) => field.with_raw(d),
        None => field.with_raw(field.raw().to_vec()),
    })
}

/// Same width on every axis.
pub(crate) fn smooth_iso<T: Smooth>(field: &T, sigma: f64) -> Result<T> {
    let s = vec![sigma; field.grid().ndim()];
    gaussian_smooth(field, &s)
}

fn convolve_axis(grid: &Grid, src: &[f64], channels: usize, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let n = grid.dims3()[axis];
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(channels).enumerate().for_each(|(i, o)| {
        let c = grid.coords(i);
        let pos = c[axis] as isize;
        for (k, &w) in kernel.iter().enumerate() {
            let mut q = c;
            q[axis] = reflect(pos + k as isize - r, n);
            let base = grid.index(q) * channels;
            for (ch, v) in o.iter_mut().enumerate() {
                *v += w * src[base + ch];
            }
        }
    });
    out
}
