use super::{GridShape, ScalarField};

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_axis(values: &[f64], shape: GridShape, axis: usize, k: &[f64]) -> Vec<f64> {
    let radius = (k.len() / 2) as isize;
    let n = shape.extent(axis) as isize;
    let stride = shape.stride(axis);
    shape
        .voxels()
        .enumerate()
        .map(|(i, c)| {
            let x = c[axis] as isize;
            let base = i - c[axis] * stride;
            k.iter()
                .enumerate()
                .map(|(j, w)| {
                    let xx = (x + j as isize - radius).clamp(0, n - 1) as usize;
                    w * values[base + xx * stride]
                })
                .sum()
        })
        .collect()
}

/// Separable Gaussian blur with clamp-to-edge boundaries. `sigma` is in
/// voxels; non-positive sigma returns the input unchanged.
pub fn gaussian_smooth(field: &ScalarField, sigma: f64) -> ScalarField {
    if sigma <= 0.0 || !sigma.is_finite() {
        return field.clone();
    }
    let shape = field.shape();
    let k = kernel(sigma);
    let mut values = field.values().to_vec();
    for axis in 0..shape.ndim() {
        values = convolve_axis(&values, shape, axis, &k);
    }
    ScalarField { shape, values }
}
