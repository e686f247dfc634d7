use crate::error::{Error, Result};
use crate::oracle::Detector;
use crate::rng::RngStream;
use crate::tensor::{ImageTensor, Shape};

use super::{check_shape, sigmoid};

/// `p_real = sigmoid(<w, x> + b)` with weights laid out like the image.
#[derive(Debug, Clone)]
pub struct LinearLogisticDetector {
    shape: Shape,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearLogisticDetector {
    pub fn new(shape: Shape, weights: Vec<f64>, bias: f64) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.len() {
            return Err(Error::config(format!(
                "weight layout has {} entries, image shape {shape} needs {}",
                weights.len(),
                shape.len()
            )));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("linear detector parameters must be finite"));
        }
        Ok(Self {
            shape,
            weights,
            bias,
        })
    }

    /// Gaussian weights with standard deviation `scale`.
    pub fn random(shape: Shape, scale: f64, bias: f64, rng: &RngStream) -> Result<Self> {
        let mut w = vec![0.0; shape.len()];
        rng.fill_normals(&mut w);
        w.iter_mut().for_each(|v| *v *= scale);
        Self::new(shape, w, bias)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    pub fn logit(&self, img: &ImageTensor) -> f64 {
        self.weights
            .iter()
            .zip(img.data())
            .map(|(w, &x)| w * x as f64)
            .sum::<f64>()
            + self.bias
    }

    pub fn probability(&self, img: &ImageTensor) -> f64 {
        sigmoid(self.logit(img))
    }

    /// Analytic gradient of the probability-of-real with respect to pixels.
    pub fn gradient(&self, img: &ImageTensor) -> Vec<f64> {
        let p = self.probability(img);
        let s = p * (1.0 - p);
        self.weights.iter().map(|w| w * s).collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

impl Detector for LinearLogisticDetector {
    fn name(&self) -> &str {
        "linear-logistic"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|img| {
                check_shape(self.shape, img, "linear-logistic detector")?;
                Ok(self.probability(img))
            })
            .collect()
    }
}
