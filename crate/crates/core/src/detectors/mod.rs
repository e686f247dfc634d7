//! Synthetic analytic detectors and the external-process adapter.

mod external;
mod linear;
mod planted;
pub mod wire;

pub use external::ExternalDetector;
pub use linear::LinearLogisticDetector;
pub use planted::{
    PatchRegion, PlantedPatchDetector, DEFAULT_SENSITIVITY, DEFAULT_THRESHOLD_OFFSET,
};

use crate::error::{Error, Result};
use crate::oracle::Detector;
use crate::tensor::{ImageTensor, Shape};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Returns the same probability-of-real for every image.
#[derive(Debug, Clone)]
pub struct ConstantDetector {
    p_real: f64,
    name: String,
}

impl ConstantDetector {
    pub fn new(p_real: f64) -> Self {
        Self {
            p_real: p_real.clamp(0.0, 1.0),
            name: format!("constant({p_real})"),
        }
    }
}

impl Detector for ConstantDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        Ok(vec![self.p_real; batch.len()])
    }
}

/// Scores an image by its mean pixel value. Used as a protocol echo stub.
#[derive(Debug, Clone, Default)]
pub struct MeanIntensityDetector;

impl Detector for MeanIntensityDetector {
    fn name(&self) -> &str {
        "mean-intensity"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        Ok(batch
            .iter()
            .map(|img| {
                img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64
            })
            .collect())
    }
}

pub(crate) fn check_shape(expected: Shape, img: &ImageTensor, who: &str) -> Result<()> {
    if img.shape() != expected {
        return Err(Error::config(format!(
            "{who} expects images of shape {expected}, got {}",
            img.shape()
        )));
    }
    Ok(())
}
