use super::{Deformation, GridShape, ScalarField, VectorField};
use crate::error::{Error, Result};

fn require_three(shape: GridShape) -> Result<()> {
    if shape.dims().iter().any(|&d| d < 3) {
        return Err(Error::InvalidShape(format!(
            "finite differences need >= 3 voxels per axis, got {shape}"
        )));
    }
    Ok(())
}

/// Derivative along `axis` of raw per-voxel values at voxel `c`: central
/// differences inside, one-sided at the two faces.
#[inline]
fn diff_at(values: &[f64], shape: GridShape, c: [usize; 3], axis: usize) -> f64 {
    let i = shape.index(c);
    let s = shape.stride(axis);
    let n = shape.extent(axis);
    match c[axis] {
        0 => values[i + s] - values[i],
        x if x == n - 1 => values[i] - values[i - s],
        _ => 0.5 * (values[i + s] - values[i - s]),
    }
}

/// Per-voxel gradient in voxel units.
pub fn spatial_gradient(field: &ScalarField) -> Result<VectorField> {
    let shape = field.shape();
    require_three(shape)?;
    let v = field.values();
    Ok(VectorField::from_fn(shape, |c| {
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate().take(shape.ndim()) {
            *ga = diff_at(v, shape, c, a);
        }
        g
    }))
}

/// `det(I + grad u)` at every voxel.
pub fn jacobian_determinant_map(phi: &Deformation) -> Result<ScalarField> {
    let shape = phi.shape();
    require_three(shape)?;
    let d = shape.ndim();
    let comps: Vec<ScalarField> = (0..d).map(|k| phi.displacement().component(k)).collect();
    Ok(ScalarField::from_fn(shape, |c| {
        let mut j = [[0.0; 3]; 3];
        for (k, comp) in comps.iter().enumerate() {
            for a in 0..d {
                j[k][a] = diff_at(comp.values(), shape, c, a) + if k == a { 1.0 } else { 0.0 };
            }
        }
        if d == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        }
    }))
}
