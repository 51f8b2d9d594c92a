//! Multilinear sampling with clamp-to-edge boundaries, pull-back warping,
//! composition, and the adjoints used by the gradient code.

use super::{Deformation, GridShape, ScalarField, VectorField};
use crate::error::{Error, Result};

/// Interpolation weights of the `2^ndim` voxels surrounding a point, plus
/// the derivative of each weight with respect to the point.
///
/// Coordinates outside `[0, dim - 1]` are clamped first; along a clamped
/// axis the weights do not depend on the point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub n: usize,
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
}

impl Stencil {
    pub fn new(shape: GridShape, p: [f64; 3]) -> Self {
        let ndim = shape.ndim();
        let mut base = 0usize;
        let mut frac = [0.0; 3];
        let mut slope = [0.0; 3];
        for a in 0..ndim {
            let dim = shape.extent(a);
            let x = p[a];
            let hi = (dim - 1) as f64;
            let (i0, f, s) = if x < 0.0 {
                (0, 0.0, 0.0)
            } else if x > hi {
                (dim - 2, 1.0, 0.0)
            } else {
                let i = (x.floor() as usize).min(dim - 2);
                (i, x - i as f64, 1.0)
            };
            base += i0 * shape.stride(a);
            frac[a] = f;
            slope[a] = s;
        }

        let n = 1usize << ndim;
        let mut st = Stencil {
            n,
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 3]; 8],
        };
        for k in 0..n {
            let mut idx = base;
            let mut w = 1.0;
            let mut factors = [1.0; 3];
            let mut signs = [0.0; 3];
            for a in 0..ndim {
                if (k >> a) & 1 == 1 {
                    idx += shape.stride(a);
                    factors[a] = frac[a];
                    signs[a] = slope[a];
                } else {
                    factors[a] = 1.0 - frac[a];
                    signs[a] = -slope[a];
                }
                w *= factors[a];
            }
            st.idx[k] = idx;
            st.w[k] = w;
            for a in 0..ndim {
                let mut d = signs[a];
                for (b, f) in factors.iter().enumerate().take(ndim) {
                    if b != a {
                        d *= f;
                    }
                }
                st.dw[k][a] = d;
            }
        }
        st
    }

    #[inline]
    pub fn apply_scalar(&self, values: &[f64]) -> f64 {
        (0..self.n).map(|k| self.w[k] * values[self.idx[k]]).sum()
    }

    /// Interpolated value and its spatial gradient.
    #[inline]
    pub fn apply_scalar_with_grad(&self, values: &[f64]) -> (f64, [f64; 3]) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for k in 0..self.n {
            let s = values[self.idx[k]];
            v += self.w[k] * s;
            for a in 0..3 {
                g[a] += self.dw[k][a] * s;
            }
        }
        (v, g)
    }

    #[inline]
    pub fn apply_vector(&self, data: &[f64], d: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..self.n {
            let base = self.idx[k] * d;
            for c in 0..d {
                out[c] += self.w[k] * data[base + c];
            }
        }
        out
    }
}

fn point3(shape: GridShape, point: &[f64]) -> Result<[f64; 3]> {
    if point.len() != shape.ndim() || point.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPoint(point.to_vec()));
    }
    let mut p = [0.0; 3];
    p[..point.len()].copy_from_slice(point);
    Ok(p)
}

/// Multilinear interpolation of a scalar field at a real voxel coordinate.
pub fn sample_linear(field: &ScalarField, point: &[f64]) -> Result<f64> {
    let p = point3(field.shape(), point)?;
    Ok(Stencil::new(field.shape(), p).apply_scalar(field.values()))
}

/// Multilinear interpolation of every component of a vector field.
pub fn sample_linear_vector(field: &VectorField, point: &[f64]) -> Result<Vec<f64>> {
    let shape = field.shape();
    let p = point3(shape, point)?;
    let v = Stencil::new(shape, p).apply_vector(field.data(), shape.ndim());
    Ok(v[..shape.ndim()].to_vec())
}

#[inline]
fn displaced(c: [usize; 3], u: [f64; 3]) -> [f64; 3] {
    [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]]
}

/// Pull-back of raw scalar values through displacement `u`.
pub(crate) fn warp_values(values: &[f64], u: &VectorField) -> Vec<f64> {
    let shape = u.shape();
    shape
        .voxels()
        .enumerate()
        .map(|(i, c)| Stencil::new(shape, displaced(c, u.vector(i))).apply_scalar(values))
        .collect()
}

/// `out(p) = image(p + u(p))`.
pub fn warp_image(image: &ScalarField, phi: &Deformation) -> Result<ScalarField> {
    Error::check_shape(image.shape(), phi.shape())?;
    let values = warp_values(image.values(), phi.displacement());
    ScalarField::new(image.shape(), values)
}

/// Nearest-neighbour pull-back; never invents labels.
pub fn warp_labels(labels: &ScalarField, phi: &Deformation) -> Result<ScalarField> {
    let shape = labels.shape();
    Error::check_shape(shape, phi.shape())?;
    let u = phi.displacement();
    let values = shape
        .voxels()
        .enumerate()
        .map(|(i, c)| {
            let q = displaced(c, u.vector(i));
            let mut n = [0usize; 3];
            for a in 0..shape.ndim() {
                let hi = (shape.extent(a) - 1) as f64;
                n[a] = q[a].round().clamp(0.0, hi) as usize;
            }
            labels.get(n)
        })
        .collect();
    ScalarField::new(shape, values)
}

/// Gradient of `sum_p g(p) * image(p + u(p))` with respect to `u`.
pub(crate) fn warp_displacement_vjp(image: &[f64], u: &VectorField, g: &[f64]) -> VectorField {
    let shape = u.shape();
    let mut out = VectorField::zeros(shape);
    for (i, c) in shape.voxels().enumerate() {
        if g[i] == 0.0 {
            continue;
        }
        let st = Stencil::new(shape, displaced(c, u.vector(i)));
        let (_, grad) = st.apply_scalar_with_grad(image);
        out.set(i, [g[i] * grad[0], g[i] * grad[1], g[i] * grad[2]]);
    }
    out
}

/// Displacement of `phi_a o phi_b`: `u_b(p) + u_a(p + u_b(p))`.
pub(crate) fn compose_displacements(ua: &VectorField, ub: &VectorField) -> VectorField {
    let shape = ub.shape();
    let d = shape.ndim();
    let mut out = VectorField::zeros(shape);
    for (i, c) in shape.voxels().enumerate() {
        let b = ub.vector(i);
        let a = Stencil::new(shape, displaced(c, b)).apply_vector(ua.data(), d);
        out.set(i, [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    }
    out
}

/// Adjoint of [`compose_displacements`]: returns `(dL/du_a, dL/du_b)` given
/// `dL/du_out`. Differentiates through both the sampled field and the
/// sampling location.
pub(crate) fn compose_vjp(
    ua: &VectorField,
    ub: &VectorField,
    g: &VectorField,
) -> (VectorField, VectorField) {
    let shape = ub.shape();
    let d = shape.ndim();
    let mut ga = VectorField::zeros(shape);
    let mut gb = g.clone();
    let a_data = ua.data();
    for (i, c) in shape.voxels().enumerate() {
        let gi = g.vector(i);
        if gi.iter().all(|&v| v == 0.0) {
            continue;
        }
        let st = Stencil::new(shape, displaced(c, ub.vector(i)));
        let mut loc = [0.0; 3];
        let ga_data = ga.data_mut();
        for k in 0..st.n {
            let base = st.idx[k] * d;
            for comp in 0..d {
                ga_data[base + comp] += st.w[k] * gi[comp];
                let s = gi[comp] * a_data[base + comp];
                for (ax, l) in loc.iter_mut().enumerate().take(d) {
                    *l += st.dw[k][ax] * s;
                }
            }
        }
        let gb_data = gb.data_mut();
        for ax in 0..d {
            gb_data[i * d + ax] += loc[ax];
        }
    }
    (ga, gb)
}

/// `phi_a o phi_b`, i.e. `p -> phi_a(phi_b(p))`.
pub fn compose(phi_a: &Deformation, phi_b: &Deformation) -> Result<Deformation> {
    Error::check_shape(phi_b.shape(), phi_a.shape())?;
    Ok(Deformation::from_displacement(compose_displacements(
        phi_a.displacement(),
        phi_b.displacement(),
    )))
}
