//! Joint bi-modal image reconstruction of x-ray CT and diffuse optical
//! tomography.
//!
//! Both modalities image the same object: XCT measures line integrals of the
//! attenuation coefficient, DOT measures boundary exitance governed by a
//! diffusion PDE in the absorption coefficient. The two reconstructions are
//! coupled through their edge-indicator fields, so structure found by one
//! modality sharpens the other without forcing absent features across.
//!
//! Module map:
//! - [`grid`]: pixel grid, fields, discrete gradient/divergence, disk mask
//! - [`xct`]: parallel-beam Radon transform and its exact adjoint
//! - [`dot`]: diffusion forward operator and adjoint-state fidelity gradient
//! - [`functional`]: the joint objective and its four block gradients
//! - [`solver`]: backtracking line search and the alternating minimization
//! - [`phantom`]: built-in phantom pairs, rasterization, measurement noise
//! - [`metrics`]: global SSIM and line profiles

pub mod dot;
pub mod error;
pub mod functional;
pub mod grid;
mod linalg;
pub mod metrics;
pub mod phantom;
pub mod solver;
pub mod xct;

pub use error::{Error, Result};
pub use grid::{GridGeometry, ScalarField, Unit, VectorField};
