use serde::{Deserialize, Serialize};

use super::{Grid, ScalarImage};
use crate::error::{Error, Result};

/// Resampling scheme. Both schemes reproduce stored samples at voxel centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Catmull-Rom cubic convolution.
    Cubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "cubic" => Ok(Interpolation::Cubic),
            other => Err(Error::format(format!("unknown interpolation scheme '{other}'"))),
        }
    }
}

/// Interpolates `img` at a continuous voxel-space point. Points outside the
/// grid take the value of the nearest border sample.
pub fn interpolate(img: &ScalarImage, p: &[f64], scheme: Interpolation) -> Result<f64> {
    let grid = img.grid();
    if p.len() != grid.ndim() {
        return Err(Error::contract(format!(
            "point has {} coordinates for a {}D image",
            p.len(),
            grid.ndim()
        )));
    }
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("interpolation point must be finite"));
    }
    let mut q = [0.0; 3];
    q[..p.len()].copy_from_slice(p);
    Ok(match scheme {
        Interpolation::Linear => sample_linear(grid, img.data(), 1, q)[0],
        Interpolation::Cubic => sample_cubic(grid, img.data(), 1, q)[0],
    })
}

// Per-axis linear taps with clamp-to-edge.
#[inline]
fn linear_taps(p: f64, n: usize) -> ([usize; 2], [f64; 2]) {
    if n == 1 {
        return ([0, 0], [1.0, 0.0]);
    }
    let max = (n - 1) as f64;
    let pc = p.clamp(0.0, max);
    let i0 = pc.floor() as usize;
    if i0 >= n - 1 {
        ([n - 1, n - 1], [1.0, 0.0])
    } else {
        let t = pc - i0 as f64;
        ([i0, i0 + 1], [1.0 - t, t])
    }
}

#[inline]
fn cubic_taps(p: f64, n: usize) -> ([usize; 4], [f64; 4]) {
    if n == 1 {
        return ([0; 4], [0.0, 1.0, 0.0, 0.0]);
    }
    let max = (n - 1) as f64;
    let pc = p.clamp(0.0, max);
    let base = pc.floor();
    let t = pc - base;
    let i = base as isize;
    let clamp = |k: isize| k.clamp(0, n as isize - 1) as usize;
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    ([clamp(i - 1), clamp(i), clamp(i + 1), clamp(i + 2)], w)
}

/// Multilinear sample of interleaved `channels`-component data.
#[inline]
pub(crate) fn sample_linear(grid: &Grid, data: &[f64], channels: usize, p: [f64; 3]) -> [f64; 3] {
    let dims = grid.dims3();
    let (ix, wx) = linear_taps(p[0], dims[0]);
    let (iy, wy) = linear_taps(p[1], dims[1]);
    let (iz, wz) = linear_taps(p[2], dims[2]);
    let mut out = [0.0; 3];
    for c in 0..2 {
        if wz[c] == 0.0 {
            continue;
        }
        for b in 0..2 {
            let wyz = wy[b] * wz[c];
            if wyz == 0.0 {
                continue;
            }
            for a in 0..2 {
                let w = wx[a] * wyz;
                if w == 0.0 {
                    continue;
                }
                let base = grid.index([ix[a], iy[b], iz[c]]) * channels;
                for (ch, o) in out.iter_mut().enumerate().take(channels) {
                    *o += w * data[base + ch];
                }
            }
        }
    }
    out
}

/// Catmull-Rom sample of interleaved `channels`-component data.
pub(crate) fn sample_cubic(grid: &Grid, data: &[f64], channels: usize, p: [f64; 3]) -> [f64; 3] {
    let dims = grid.dims3();
    let (ix, wx) = cubic_taps(p[0], dims[0]);
    let (iy, wy) = cubic_taps(p[1], dims[1]);
    let (iz, wz) = cubic_taps(p[2], dims[2]);
    let mut out = [0.0; 3];
    for c in 0..4 {
        if wz[c] == 0.0 {
            continue;
        }
        for b in 0..4 {
            let wyz = wy[b] * wz[c];
            if wyz == 0.0 {
                continue;
            }
            for a in 0..4 {
                let w = wx[a] * wyz;
                if w == 0.0 {
                    continue;
                }
                let base = grid.index([ix[a], iy[b], iz[c]]) * channels;
                for (ch, o) in out.iter_mut().enumerate().take(channels) {
                    *o += w * data[base + ch];
                }
            }
        }
    }
    out
}
