//! Regular-grid scalar and vector fields.
//!
//! Every container stores its samples row-major with x varying fastest.
//! Two-dimensional grids are kept internally as 3D grids with a single
//! z-slice, so the kernels in this module only need one code path; the
//! logical dimensionality is tracked separately and governs the number of
//! vector components.
//!
//! Vector components are expressed in voxel units. Spacing is metadata that
//! only enters derivatives.

mod interp;
mod ops;
mod smooth;

pub use interp::{interpolate, Interpolation};
pub use ops::{compose, gradient, jacobian_determinant, warp};
pub use smooth::{gaussian_kernel, gaussian_smooth, Smooth};
pub(crate) use smooth::smooth_iso;

pub(crate) use interp::sample_linear;
pub(crate) use ops::{compose_fields, displacement_gradient_sq, voxel_gradient, warp_unchecked};

use crate::error::{Error, Result};

/// Shape and spacing of a 2D or 3D voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    ndim: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if !(2..=3).contains(&ndim) {
            return Err(Error::contract(format!("grids must be 2D or 3D, got {ndim} axes")));
        }
        if spacing.len() != ndim {
            return Err(Error::contract(format!(
                "spacing has {} entries for a {ndim}D grid",
                spacing.len()
            )));
        }
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::contract("grid dims must be strictly positive"));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::contract("grid spacing must be finite and strictly positive"));
        }
        let mut d = [1usize; 3];
        let mut s = [1.0f64; 3];
        d[..ndim].copy_from_slice(dims);
        s[..ndim].copy_from_slice(spacing);
        Ok(Grid { ndim, dims: d, spacing: s })
    }

    /// Grid with unit spacing.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        Grid::new(dims, &vec![1.0; dims.len()])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    pub(crate) fn dims3(&self) -> [usize; 3] {
        self.dims
    }

    pub(crate) fn spacing3(&self) -> [f64; 3] {
        self.spacing
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Distance (in voxels, Chebyshev over active axes) from a voxel to the
    /// nearest grid face.
    pub fn border_distance(&self, c: [usize; 3]) -> usize {
        (0..self.ndim)
            .map(|a| c[a].min(self.dims[a] - 1 - c[a]))
            .min()
            .unwrap_or(0)
    }

    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {:?} (spacing {:?}) vs {:?} (spacing {:?})",
                self.dims(),
                self.spacing(),
                other.dims(),
                other.spacing()
            )))
        }
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!("{what} has a non-finite value at element {i}"))),
    }
}

/// Scalar intensities on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::contract(format!(
                "image has {} samples for a grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        check_finite(&data, "image")?;
        Ok(ScalarImage { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        ScalarImage { grid, data: vec![0.0; n] }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let n = grid.len();
        ScalarImage { grid, data: vec![value; n] }
    }

    /// Builds an image by evaluating `f` at every voxel's integer coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        ScalarImage::new(grid, data)
    }

    // Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        ScalarImage { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: [usize; 3]) -> f64 {
        self.data[self.grid.index(c)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Dense vector field with one component per grid axis, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    data: Vec<f64>,
}

impl VectorField {
    /// `data` is interleaved: `ndim` components per voxel.
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * grid.ndim() {
            return Err(Error::contract(format!(
                "vector field has {} values for {} voxels x {} components",
                data.len(),
                grid.len(),
                grid.ndim()
            )));
        }
        check_finite(&data, "vector field")?;
        Ok(VectorField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len() * grid.ndim();
        VectorField { grid, data: vec![0.0; n] }
    }

    /// Spatially constant field.
    pub fn constant(grid: Grid, value: &[f64]) -> Result<Self> {
        if value.len() != grid.ndim() {
            return Err(Error::contract("constant vector has the wrong number of components"));
        }
        let data = value.repeat(grid.len());
        VectorField::new(grid, data)
    }

    /// Builds a field by evaluating `f` at each voxel; only the first `ndim`
    /// components of the returned array are kept.
    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let nd = grid.ndim();
        let mut data = Vec::with_capacity(grid.len() * nd);
        for i in 0..grid.len() {
            let v = f(grid.coords(i));
            data.extend_from_slice(&v[..nd]);
        }
        VectorField::new(grid, data)
    }

    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len() * grid.ndim(), data.len());
        VectorField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Vector at voxel `idx`, zero-padded to three components.
    #[inline]
    pub fn vector(&self, idx: usize) -> [f64; 3] {
        let nd = self.grid.ndim();
        let mut out = [0.0; 3];
        out[..nd].copy_from_slice(&self.data[idx * nd..(idx + 1) * nd]);
        out
    }

    pub fn norm_at(&self, idx: usize) -> f64 {
        let v = self.vector(idx);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len()).map(|i| self.norm_at(i)).fold(0.0, f64::max)
    }

    /// Largest per-voxel norm restricted to voxels at least `margin` voxels
    /// from every face.
    pub fn max_norm_interior(&self, margin: usize) -> f64 {
        (0..self.grid.len())
            .filter(|&i| self.grid.border_distance(self.grid.coords(i)) >= margin)
            .map(|i| self.norm_at(i))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> VectorField {
        VectorField {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&other.grid, "vector addition")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(VectorField { grid: self.grid.clone(), data })
    }

    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&other.grid, "vector subtraction")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(VectorField { grid: self.grid.clone(), data })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// How a transform was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Identity,
    /// Group exponential of a single velocity field.
    Exponential,
    /// Composition of this many exponentials (or other transforms).
    Composed(usize),
    /// Read from disk or built directly from a displacement.
    External,
}

/// A deformation φ(x) = x + d(x) stored through its displacement d.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementTransform {
    disp: VectorField,
    provenance: Provenance,
}

impl DisplacementTransform {
    pub fn identity(grid: Grid) -> Self {
        DisplacementTransform { disp: VectorField::zeros(grid), provenance: Provenance::Identity }
    }

    pub fn from_displacement(disp: VectorField, provenance: Provenance) -> Self {
        DisplacementTransform { disp, provenance }
    }

    pub fn displacement(&self) -> &VectorField {
        &self.disp
    }

    pub fn into_displacement(self) -> VectorField {
        self.disp
    }

    pub fn grid(&self) -> &Grid {
        self.disp.grid()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Number of legs folded into this transform (0 for the identity).
    pub fn leg_count(&self) -> usize {
        match self.provenance {
            Provenance::Identity => 0,
            Provenance::Exponential | Provenance::External => 1,
            Provenance::Composed(n) => n,
        }
    }
}
