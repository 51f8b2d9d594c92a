//! Multi-scale diffeomorphic image registration.
//!
//! A deformation is the exponential of a stationary velocity field, computed
//! by scaling and squaring. Velocities are estimated at two scales: a global
//! one on the half-resolution image pair, and local ones on `2^ndim`
//! overlapping full-resolution chunks. The merged chunk velocities and the
//! upsampled global velocity are averaged into a full-resolution velocity
//! whose exponential warps the original source image.
//!
//! Each velocity is a sample from a diagonal Gaussian posterior `(mu, sigma^2)`
//! that is fitted per image pair by Adam on a variational objective: mean
//! squared intensity error at every scale plus a KL term against a
//! Laplacian smoothness prior. Gradients are exact reverse-mode derivatives
//! of the whole pipeline.
//!
//! ```no_run
//! use ddr_core::{config::RunConfig, io::synth::synth_pair, field::GridShape};
//! use ddr_core::{metrics::evaluate_registration, optimizer::register_pair};
//!
//! let pair = synth_pair(7, GridShape::new2(64, 64)?, 8.0, 3.0)?;
//! let result = register_pair(&pair.source, &pair.target, &RunConfig::default())?;
//! let report = evaluate_registration(&pair.source, &pair.target, None, &result)?;
//! println!("RMSE {} -> {}", report.rmse_before, report.rmse_after);
//! # Ok::<(), ddr_core::Error>(())
//! ```

pub mod config;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod integrate;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod pyramid;

pub use error::{Error, FormatError, Result};
