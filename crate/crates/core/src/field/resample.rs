//! Factor-two resolution changes between pyramid levels.
//!
//! Downsampling is a 2x block mean; upsampling is cell-centred multilinear
//! interpolation (fine voxel `f` sits at coarse coordinate `f/2 - 1/4`), so
//! the pair preserves constants. Vector fields are rescaled by 0.5 / 2 to
//! stay in voxel units of their own grid.

use super::{GridField, GridShape, VectorField};

fn coarse_shape(shape: GridShape) -> GridShape {
    let dims: Vec<usize> = shape.dims().iter().map(|d| d.div_ceil(2)).collect();
    // Every axis of a valid shape has >= 2 voxels, so halves have >= 1; the
    // pyramid only halves grids with >= 4 voxels per axis.
    GridShape::new(&dims).unwrap_or_else(|_| {
        panic!("cannot downsample {shape}: half-resolution axis would be < 2 voxels")
    })
}

fn fine_shape(shape: GridShape) -> GridShape {
    let dims: Vec<usize> = shape.dims().iter().map(|d| d * 2).collect();
    GridShape::new(&dims).expect("doubling a valid shape stays valid")
}

/// 2x block average per axis. Odd extents are clamp-padded by one voxel.
///
/// # Panics
/// If an axis has fewer than 3 voxels (the half-resolution grid would be
/// degenerate).
pub fn downsample<F: GridField>(field: &F) -> F {
    let shape = field.shape();
    let coarse = coarse_shape(shape);
    let ch = field.channels();
    let ndim = shape.ndim();
    let n_corners = 1usize << ndim;
    let scale = if F::VOXEL_UNITS { 0.5 } else { 1.0 } / n_corners as f64;
    let src = field.raw();
    let mut out = vec![0.0; coarse.len() * ch];
    for (ci, c) in coarse.voxels().enumerate() {
        for k in 0..n_corners {
            let mut fc = [0usize; 3];
            for a in 0..ndim {
                fc[a] = (2 * c[a] + ((k >> a) & 1)).min(shape.extent(a) - 1);
            }
            let fi = shape.index(fc);
            for j in 0..ch {
                out[ci * ch + j] += src[fi * ch + j];
            }
        }
        for v in &mut out[ci * ch..(ci + 1) * ch] {
            *v *= scale;
        }
    }
    F::from_raw(coarse, out)
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    w1: f64,
}

fn upsample_taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|f| {
            let x = ((f as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (x.floor() as usize).min(n - 2);
            Tap {
                i0,
                w1: x - i0 as f64,
            }
        })
        .collect()
}

/// Visits, for every fine voxel, the coarse voxels and weights that
/// interpolate it.
fn for_each_upsample_weight(coarse: GridShape, mut f: impl FnMut(usize, usize, f64)) {
    let fine = fine_shape(coarse);
    let ndim = coarse.ndim();
    let taps: Vec<Vec<Tap>> = (0..ndim).map(|a| upsample_taps(coarse.extent(a))).collect();
    for (fi, c) in fine.voxels().enumerate() {
        for k in 0..(1usize << ndim) {
            let mut w = 1.0;
            let mut cc = [0usize; 3];
            for a in 0..ndim {
                let t = taps[a][c[a]];
                if (k >> a) & 1 == 1 {
                    cc[a] = t.i0 + 1;
                    w *= t.w1;
                } else {
                    cc[a] = t.i0;
                    w *= 1.0 - t.w1;
                }
            }
            if w != 0.0 {
                f(fi, coarse.index(cc), w);
            }
        }
    }
}

/// 2x multilinear upsampling per axis.
pub fn upsample<F: GridField>(field: &F) -> F {
    let coarse = field.shape();
    let fine = fine_shape(coarse);
    let ch = field.channels();
    let scale = if F::VOXEL_UNITS { 2.0 } else { 1.0 };
    let src = field.raw();
    let mut out = vec![0.0; fine.len() * ch];
    for_each_upsample_weight(coarse, |fi, ci, w| {
        for j in 0..ch {
            out[fi * ch + j] += w * src[ci * ch + j];
        }
    });
    for v in &mut out {
        *v *= scale;
    }
    F::from_raw(fine, out)
}

/// Transpose of [`upsample`] for vector fields: maps a fine-grid gradient
/// back onto `coarse`.
pub(crate) fn upsample_adjoint(grad_fine: &VectorField, coarse: GridShape) -> VectorField {
    debug_assert_eq!(grad_fine.shape(), fine_shape(coarse));
    let d = coarse.ndim();
    let g = grad_fine.data();
    let mut out = vec![0.0; coarse.len() * d];
    for_each_upsample_weight(coarse, |fi, ci, w| {
        for j in 0..d {
            out[ci * d + j] += 2.0 * w * g[fi * d + j];
        }
    });
    VectorField::from_raw(coarse, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gaussian_smooth, ScalarField};

    #[test]
    fn constants_survive_both_directions() {
        let s = GridShape::new2(8, 6).unwrap();
        let c = ScalarField::constant(s, 0.7);
        let d = downsample(&c);
        assert_eq!(d.shape().dims(), &[4, 3]);
        assert!(d.values().iter().all(|&v| v == 0.7));
        let u = upsample(&d);
        assert_eq!(u.shape(), s);
        assert!(u.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn vector_unit_rescale() {
        let s = GridShape::new2(8, 8).unwrap();
        let v = VectorField::constant(s, &[2.0, 2.0]);
        let d = downsample(&v);
        assert!(d.data().iter().all(|&x| x == 1.0));
        let u = upsample(&d);
        assert!(u.data().iter().all(|&x| (x - 2.0).abs() < 1e-15));
        let up1 = upsample(&VectorField::constant(s, &[1.0, 1.0]));
        assert!(up1.data().iter().all(|&x| (x - 2.0).abs() < 1e-15));
    }

    #[test]
    fn ramp_block_means() {
        let s = GridShape::new2(8, 4).unwrap();
        let f = ScalarField::from_fn(s, |[x, y, _]| 3.0 * x as f64 + 0.5 * y as f64);
        let d = downsample(&f);
        for c in d.shape().voxels() {
            let mut sum = 0.0;
            for dx in 0..2 {
                for dy in 0..2 {
                    sum += f.get([2 * c[0] + dx, 2 * c[1] + dy, 0]);
                }
            }
            assert!((d.get(c) - sum / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_extent_is_clamp_padded() {
        let s = GridShape::new2(5, 4).unwrap();
        let f = ScalarField::from_fn(s, |[x, _, _]| x as f64);
        let d = downsample(&f);
        assert_eq!(d.shape().dims(), &[3, 2]);
        // Last block holds voxel 4 twice.
        assert_eq!(d.get([2, 0, 0]), 4.0);
    }

    #[test]
    fn smooth_field_roundtrip_error_is_small() {
        let s = GridShape::new2(64, 64).unwrap();
        let raw = ScalarField::from_fn(
            s,
            |[x, y, _]| {
                if (x / 8 + y / 8) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let smooth = gaussian_smooth(&raw, 4.0);
        let back = upsample(&downsample(&smooth));
        let err = back
            .values()
            .iter()
            .zip(smooth.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 0.05, "roundtrip error {err}");
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let coarse = GridShape::new3(3, 4, 2).unwrap();
        let x = VectorField::from_fn(coarse, |[a, b, c]| {
            [
                a as f64 * 0.3 - b as f64,
                (c + b) as f64 * 0.7,
                1.0 - a as f64,
            ]
        });
        let fine = fine_shape(coarse);
        let y = VectorField::from_fn(fine, |[a, b, c]| {
            [
                ((a * 7 + b) % 5) as f64,
                (c as f64).sin(),
                (a + b + c) as f64 * 0.1,
            ]
        });
        let lhs: f64 = upsample(&x)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(upsample_adjoint(&y, coarse).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
