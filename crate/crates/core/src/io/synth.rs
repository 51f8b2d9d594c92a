//! Seeded synthetic registration pairs with known ground-truth velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, warp_image, Deformation, GridShape, ScalarField, VectorField};
use crate::integrate::{exponentiate, IntegrationConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub shape: GridShape,
    /// Gaussian width (voxels) used to smooth the random velocity.
    pub smoothness_sigma: f64,
    /// Target `max |v|_inf` of the velocity, in voxels.
    pub amplitude: f64,
    /// Relative strength of fine-scale texture added to the source image.
    pub texture: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, shape: GridShape, smoothness_sigma: f64, amplitude: f64) -> Self {
        Self {
            seed,
            shape,
            smoothness_sigma,
            amplitude,
            texture: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub source: ScalarField,
    pub target: ScalarField,
    pub v_true: VectorField,
    pub phi_true: Deformation,
}

fn normal_field(shape: GridShape, rng: &mut impl Rng) -> ScalarField {
    ScalarField::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn rescale_unit(field: &ScalarField) -> ScalarField {
    let (lo, hi) = field.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    ScalarField::from_fn(field.shape(), |c| {
        ((field.get(c) - lo) / span).clamp(0.0, 1.0)
    })
}

pub fn synth_pair(
    seed: u64,
    shape: GridShape,
    smoothness_sigma: f64,
    amplitude: f64,
) -> Result<SynthPair> {
    synth_pair_with(&SynthSpec::new(seed, shape, smoothness_sigma, amplitude))
}

/// Builds `I0` from smoothed noise blobs (plus optional texture), draws a
/// Gaussian-smoothed velocity scaled to `amplitude`, and sets
/// `I1 = I0 o exp(v)`.
pub fn synth_pair_with(spec: &SynthSpec) -> Result<SynthPair> {
    let shape = spec.shape;
    if shape.dims().iter().any(|&d| d < 4) {
        return Err(Error::InvalidShape(format!(
            "synthetic pairs need >= 4 voxels per axis, got {shape}"
        )));
    }
    if !(spec.smoothness_sigma > 0.0 && spec.smoothness_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "smoothness_sigma must be > 0, got {}",
            spec.smoothness_sigma
        )));
    }
    if !(spec.amplitude >= 0.0 && spec.amplitude.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "amplitude must be >= 0, got {}",
            spec.amplitude
        )));
    }
    if !(spec.texture >= 0.0 && spec.texture.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "texture must be >= 0, got {}",
            spec.texture
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_dim = *shape.dims().iter().min().expect("non-empty dims") as f64;
    let blob_sigma = (min_dim / 16.0).max(2.0);
    let blobs = rescale_unit(&gaussian_smooth(&normal_field(shape, &mut rng), blob_sigma));
    let texture_noise = normal_field(shape, &mut rng);
    let source = if spec.texture > 0.0 {
        let fine = rescale_unit(&gaussian_smooth(&texture_noise, 1.0));
        rescale_unit(&ScalarField::from_fn(shape, |c| {
            blobs.get(c) + spec.texture * (fine.get(c) - 0.5)
        }))
    } else {
        blobs
    };

    let components: Vec<ScalarField> = (0..shape.ndim())
        .map(|_| gaussian_smooth(&normal_field(shape, &mut rng), spec.smoothness_sigma))
        .collect();
    let raw = VectorField::from_components(&components)?;
    let peak = raw.max_abs();
    let v_true = if peak > 0.0 {
        raw.scaled(spec.amplitude / peak)
    } else {
        VectorField::zeros(shape)
    };
    let phi_true = exponentiate(&v_true, &IntegrationConfig::default())?;
    let target = warp_image(&source, &phi_true)?;
    Ok(SynthPair {
        source,
        target,
        v_true,
        phi_true,
    })
}
