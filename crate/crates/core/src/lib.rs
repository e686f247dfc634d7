//! Perturbation-based saliency for binary real/fake image detectors, with
//! adversarially generated replacement fields.

pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod explainers;
pub mod io;
pub mod nes;
pub mod oracle;
pub mod perturbation;
pub mod qmc;
pub mod rng;
pub mod segmentation;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
