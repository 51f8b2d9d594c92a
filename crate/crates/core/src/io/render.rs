//! Grayscale slice renders for quick visual inspection of images,
//! difference maps and Jacobian determinant maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// Minimum maps to black, maximum to white.
    MinMax,
    /// `center` maps to mid-gray; the largest deviation on either side sets
    /// the scale. Used for determinant maps centred at 1.
    Diverging { center: f64 },
}

/// Extracts the 2D slice at `index` along `axis`. 2D fields are their own
/// single slice along axis 2.
pub fn extract_slice(field: &ScalarField, axis: usize, index: usize) -> Result<ScalarField> {
    let shape = field.shape();
    if axis > 2 || index >= shape.extent(axis) {
        return Err(Error::InvalidShape(format!(
            "slice {index} along axis {axis} is outside {shape}"
        )));
    }
    if shape.ndim() == 2 {
        if axis != 2 {
            return Err(Error::InvalidShape(format!(
                "2D field {shape} can only be sliced along axis 2"
            )));
        }
        return Ok(field.clone());
    }
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let out_shape = GridShape::new2(shape.extent(rest[0]), shape.extent(rest[1]))?;
    Ok(ScalarField::from_fn(out_shape, |[i, j, _]| {
        let mut c = [0usize; 3];
        c[axis] = index;
        c[rest[0]] = i;
        c[rest[1]] = j;
        field.get(c)
    }))
}

/// Maps a slice into `[0, 1]`; an all-equal slice renders mid-gray.
pub fn normalize(slice: &ScalarField, mode: Normalization) -> ScalarField {
    let (lo, hi) = slice.min_max();
    let map: Box<dyn Fn(f64) -> f64> = match mode {
        Normalization::MinMax => {
            if hi > lo {
                Box::new(move |v| (v - lo) / (hi - lo))
            } else {
                Box::new(|_| 0.5)
            }
        }
        Normalization::Diverging { center } => {
            let scale = (hi - center).abs().max((lo - center).abs());
            if scale > 0.0 {
                Box::new(move |v| 0.5 + 0.5 * (v - center) / scale)
            } else {
                Box::new(|_| 0.5)
            }
        }
    };
    ScalarField::from_fn(slice.shape(), |c| map(slice.get(c)))
}

/// Writes the normalized slice as an 8-bit P5 image.
pub fn render_slice(
    field: &ScalarField,
    axis: usize,
    index: usize,
    mode: Normalization,
    path: &Path,
) -> Result<()> {
    let slice = extract_slice(field, axis, index)?;
    super::pgm::write_pgm(&normalize(&slice, mode), path)
}
