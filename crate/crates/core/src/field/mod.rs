//! Dense scalar and vector fields on regular 2D/3D voxel grids.
//!
//! Storage is row-major with the first axis fastest: voxel `(x, y, z)` lives
//! at `x + nx * (y + ny * z)`. Vector fields interleave their `ndim`
//! components per voxel. All coordinates and displacements are expressed in
//! voxel units of the grid that holds them.

mod diff;
mod interp;
mod resample;
mod smooth;

use std::fmt;

use crate::error::{Error, Result};

pub use diff::{jacobian_determinant_map, spatial_gradient};
pub use interp::{compose, sample_linear, sample_linear_vector, warp_image, warp_labels};
pub(crate) use interp::{compose_displacements, compose_vjp, warp_displacement_vjp, warp_values};
pub(crate) use resample::upsample_adjoint;
pub use resample::{downsample, upsample};
pub use smooth::gaussian_smooth;

/// Voxel counts per axis of a 2D or 3D grid. Unused trailing axes have
/// extent 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    dims: [usize; 3],
    ndim: usize,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidShape(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidShape(format!(
                "every axis needs at least 2 voxels, got {d} in {dims:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("voxel count overflows for {dims:?}")))?;
        let mut all = [1; 3];
        all[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            dims: all,
            ndim: dims.len(),
        })
    }

    pub fn new2(nx: usize, ny: usize) -> Result<Self> {
        Self::new(&[nx, ny])
    }

    pub fn new3(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::new(&[nx, ny, nz])
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    /// Extent along `axis`; 1 for axes beyond `ndim`.
    #[inline]
    pub fn extent(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Voxel coordinates in storage order.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
    }

    /// True when the voxel is at least `margin` voxels from every face.
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        (0..self.ndim).all(|a| c[a] >= margin && c[a] + margin < self.dims[a])
    }
}

impl fmt::Debug for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

mod sealed {
    pub trait Sealed {}
}

/// Common view over scalar and vector fields: a grid plus `channels`
/// interleaved reals per voxel.
pub trait GridField: sealed::Sealed + Clone {
    /// Whether values are displacements in voxel units, which must be
    /// rescaled when the grid spacing changes.
    const VOXEL_UNITS: bool;

    fn shape(&self) -> GridShape;
    fn raw(&self) -> &[f64];
    #[doc(hidden)]
    fn from_raw(shape: GridShape, data: Vec<f64>) -> Self;

    fn channels(&self) -> usize {
        if Self::VOXEL_UNITS {
            self.shape().ndim()
        } else {
            1
        }
    }
}

fn check_values(shape: GridShape, channels: usize, data: &[f64]) -> Result<()> {
    let expected = shape.len() * channels;
    if data.len() != expected {
        return Err(Error::InvalidField(format!(
            "{} values for shape {shape} with {channels} channel(s), expected {expected}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidField(format!(
            "non-finite value at element {i}"
        )));
    }
    Ok(())
}

/// One real per voxel: images at any scale, weight maps, determinant maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    shape: GridShape,
    values: Vec<f64>,
}

impl sealed::Sealed for ScalarField {}

impl GridField for ScalarField {
    const VOXEL_UNITS: bool = false;

    fn shape(&self) -> GridShape {
        self.shape
    }

    fn raw(&self) -> &[f64] {
        &self.values
    }

    fn from_raw(shape: GridShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self {
            shape,
            values: data,
        }
    }
}

impl ScalarField {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        check_values(shape, 1, &values)?;
        Ok(Self { shape, values })
    }

    pub fn constant(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::constant(shape, 0.0)
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let values = shape.voxels().map(&mut f).collect();
        Self { shape, values }
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> f64 {
        self.values[self.shape.index(c)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Elementwise `self - other`.
    pub fn difference(&self, other: &ScalarField) -> Result<ScalarField> {
        Error::check_shape(self.shape, other.shape)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            shape: self.shape,
            values,
        })
    }
}

/// `ndim` reals per voxel in voxel units: velocities and displacements.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    shape: GridShape,
    data: Vec<f64>,
}

impl sealed::Sealed for VectorField {}

impl GridField for VectorField {
    const VOXEL_UNITS: bool = true;

    fn shape(&self) -> GridShape {
        self.shape
    }

    fn raw(&self) -> &[f64] {
        &self.data
    }

    fn from_raw(shape: GridShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len() * shape.ndim());
        Self { shape, data }
    }
}

impl VectorField {
    /// Builds a field from channel-interleaved components.
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        check_values(shape, shape.ndim(), &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len() * shape.ndim()],
        }
    }

    /// Every voxel holds `v` (only the first `ndim` entries are used).
    pub fn constant(shape: GridShape, v: &[f64]) -> Self {
        let d = shape.ndim();
        let mut data = Vec::with_capacity(shape.len() * d);
        for _ in 0..shape.len() {
            data.extend((0..d).map(|c| v.get(c).copied().unwrap_or(0.0)));
        }
        Self { shape, data }
    }

    /// Builds a field from a per-voxel closure returning up to three
    /// components; entries beyond `ndim` are ignored.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let d = shape.ndim();
        let mut data = Vec::with_capacity(shape.len() * d);
        for c in shape.voxels() {
            let v = f(c);
            data.extend_from_slice(&v[..d]);
        }
        Self { shape, data }
    }

    pub fn from_components(components: &[ScalarField]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidField("no components".into()))?;
        let shape = first.shape();
        if components.len() != shape.ndim() {
            return Err(Error::InvalidField(format!(
                "{} components for a {}-D grid",
                components.len(),
                shape.ndim()
            )));
        }
        for c in components {
            Error::check_shape(shape, c.shape())?;
        }
        let d = shape.ndim();
        let mut data = vec![0.0; shape.len() * d];
        for (k, comp) in components.iter().enumerate() {
            for (i, &v) in comp.values().iter().enumerate() {
                data[i * d + k] = v;
            }
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    /// Channel-interleaved components.
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn from_raw_parts(shape: GridShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len() * shape.ndim());
        Self { shape, data }
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Components at storage index `i`, zero-padded to three entries.
    #[inline]
    pub fn vector(&self, i: usize) -> [f64; 3] {
        let d = self.shape.ndim();
        let mut out = [0.0; 3];
        out[..d].copy_from_slice(&self.data[i * d..(i + 1) * d]);
        out
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> [f64; 3] {
        self.vector(self.shape.index(c))
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, v: [f64; 3]) {
        let d = self.shape.ndim();
        self.data[i * d..(i + 1) * d].copy_from_slice(&v[..d]);
    }

    pub fn component(&self, k: usize) -> ScalarField {
        let d = self.shape.ndim();
        assert!(k < d, "component {k} out of range for {d}-D field");
        ScalarField {
            shape: self.shape,
            values: self.data.iter().skip(k).step_by(d).copied().collect(),
        }
    }

    /// Largest absolute component over all voxels (the sup of `|v(p)|_inf`).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        Error::check_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `self += s * other`.
    pub(crate) fn axpy(&mut self, s: f64, other: &VectorField) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Mean Euclidean norm over voxels selected by `keep`.
    pub fn mean_norm_where(&self, mut keep: impl FnMut([usize; 3]) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, c) in self.shape.voxels().enumerate() {
            if keep(c) {
                let v = self.vector(i);
                sum += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// A spatial transform `phi(p) = p + u(p)` stored as its displacement `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    displacement: VectorField,
}

impl Deformation {
    pub fn identity(shape: GridShape) -> Self {
        Self {
            displacement: VectorField::zeros(shape),
        }
    }

    pub fn from_displacement(displacement: VectorField) -> Self {
        Self { displacement }
    }

    #[inline]
    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.displacement.shape()
    }

    /// `phi(p)` for the voxel at storage index `i`.
    pub fn map_voxel(&self, i: usize) -> [f64; 3] {
        let c = self.shape().coords(i);
        let u = self.displacement.vector(i);
        [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]]
    }
}
