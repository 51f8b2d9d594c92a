#![allow(dead_code)]

use ddr_core::field::{gaussian_smooth, GridShape, ScalarField, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn s2(nx: usize, ny: usize) -> GridShape {
    GridShape::new2(nx, ny).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_field(shape: GridShape, lo: f64, hi: f64, rng: &mut impl Rng) -> ScalarField {
    ScalarField::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn uniform_vector(shape: GridShape, lo: f64, hi: f64, rng: &mut impl Rng) -> VectorField {
    let n = shape.len() * shape.ndim();
    VectorField::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Gaussian-smoothed uniform noise rescaled to `max |v|_inf = amplitude`.
pub fn smooth_vector(
    shape: GridShape,
    sigma: f64,
    amplitude: f64,
    rng: &mut impl Rng,
) -> VectorField {
    let comps: Vec<ScalarField> = (0..shape.ndim())
        .map(|_| gaussian_smooth(&uniform_field(shape, -1.0, 1.0, rng), sigma))
        .collect();
    let v = VectorField::from_components(&comps).unwrap();
    let peak = v.max_abs();
    v.scaled(amplitude / peak)
}

/// Central difference of a piecewise-smooth scalar function. The step is
/// accepted once the estimates at `h` and `h / 2` agree to within roundoff;
/// otherwise it shrinks tenfold (at most twice), stepping off interpolation
/// kinks that sit inside the stencil.
pub fn central_diff(f: impl Fn(f64) -> f64, h0: f64) -> f64 {
    let base = f(0.0).abs().max(1.0);
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = h0;
    for _ in 0..2 {
        let (c, fine) = (d(h), d(h / 2.0));
        let tol = (1e-6 * c.abs().max(fine.abs())).max(8.0 * f64::EPSILON * base / h);
        if (c - fine).abs() <= tol {
            return fine;
        }
        h /= 10.0;
    }
    d(h / 2.0)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
