use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Detector;
use crate::tensor::{ImageTensor, Shape};

use super::{check_shape, sigmoid};

/// Default steepness of the planted-patch logistic.
pub const DEFAULT_SENSITIVITY: f64 = 25.0;
/// Default discrepancy at which the planted-patch detector is undecided.
pub const DEFAULT_THRESHOLD_OFFSET: f64 = 0.1;

/// The set of pixels a planted-patch detector looks at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchRegion {
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Row-major pixel indices `y * W + x`.
    Pixels { indices: Vec<usize> },
}

impl PatchRegion {
    /// Resolve to sorted, deduplicated pixel indices within an `h x w` grid.
    pub fn pixel_indices(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        let idx = match self {
            PatchRegion::Rect {
                top,
                left,
                height,
                width,
            } => {
                if *height == 0 || *width == 0 || top + height > h || left + width > w {
                    return Err(Error::config(format!(
                        "patch rectangle {height}x{width} at ({top},{left}) is outside a {h}x{w} image"
                    )));
                }
                let mut v = Vec::with_capacity(height * width);
                for y in *top..top + height {
                    for x in *left..left + width {
                        v.push(y * w + x);
                    }
                }
                v
            }
            PatchRegion::Pixels { indices } => {
                let mut v = indices.clone();
                v.sort_unstable();
                v.dedup();
                if v.is_empty() {
                    return Err(Error::config("patch region is empty"));
                }
                if *v.last().unwrap() >= h * w {
                    return Err(Error::config("patch region exceeds image bounds"));
                }
                v
            }
        };
        Ok(idx)
    }
}

/// Ground-truth oracle whose output depends only on a known pixel region.
///
/// `p_real = sigmoid(sensitivity * (discrepancy - threshold_offset))`, where
/// the discrepancy is the mean absolute difference to `reference` over the
/// region's samples (all channels). An intact planted patch therefore reads
/// as fake; altering it enough reads as real.
#[derive(Debug, Clone)]
pub struct PlantedPatchDetector {
    shape: Shape,
    region: PatchRegion,
    pixels: Vec<usize>,
    /// Element offsets into the image buffer, channel-major then region order.
    offsets: Vec<usize>,
    reference: Vec<f32>,
    sensitivity: f64,
    threshold_offset: f64,
}

impl PlantedPatchDetector {
    /// `reference` holds one value per region sample, channel-major, with
    /// pixels in ascending row-major order.
    pub fn new(
        shape: Shape,
        region: PatchRegion,
        reference: Vec<f32>,
        sensitivity: f64,
        threshold_offset: f64,
    ) -> Result<Self> {
        shape.validate()?;
        let pixels = region.pixel_indices(shape.height, shape.width)?;
        let plane = shape.pixels();
        let offsets: Vec<usize> = (0..shape.channels)
            .flat_map(|c| pixels.iter().map(move |&p| c * plane + p))
            .collect();
        if reference.len() != offsets.len() {
            return Err(Error::config(format!(
                "reference patch has {} samples, region needs {}",
                reference.len(),
                offsets.len()
            )));
        }
        if !(sensitivity > 0.0) || !threshold_offset.is_finite() {
            return Err(Error::config(
                "sensitivity must be positive and threshold_offset finite",
            ));
        }
        Ok(Self {
            shape,
            region,
            pixels,
            offsets,
            reference,
            sensitivity,
            threshold_offset,
        })
    }

    /// Use the region's current content in `image` as the reference.
    pub fn from_image(
        image: &ImageTensor,
        region: PatchRegion,
        sensitivity: f64,
        threshold_offset: f64,
    ) -> Result<Self> {
        let pixels = region.pixel_indices(image.height(), image.width())?;
        let plane = image.shape().pixels();
        let reference = (0..image.channels())
            .flat_map(|c| pixels.iter().map(move |&p| c * plane + p))
            .map(|o| image.data()[o])
            .collect();
        Self::new(image.shape(), region, reference, sensitivity, threshold_offset)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn region(&self) -> &PatchRegion {
        &self.region
    }

    /// Sorted row-major indices of the region's pixels.
    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn reference(&self) -> &[f32] {
        &self.reference
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn threshold_offset(&self) -> f64 {
        self.threshold_offset
    }

    pub fn discrepancy(&self, img: &ImageTensor) -> f64 {
        let data = img.data();
        let total: f64 = self
            .offsets
            .iter()
            .zip(&self.reference)
            .map(|(&o, &r)| (data[o] as f64 - r as f64).abs())
            .sum();
        total / self.offsets.len() as f64
    }

    pub fn probability_for_discrepancy(&self, d: f64) -> f64 {
        sigmoid(self.sensitivity * (d - self.threshold_offset))
    }

    pub fn probability(&self, img: &ImageTensor) -> f64 {
        self.probability_for_discrepancy(self.discrepancy(img))
    }
}

impl Detector for PlantedPatchDetector {
    fn name(&self) -> &str {
        "planted-patch"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|img| {
                check_shape(self.shape, img, "planted-patch detector")?;
                Ok(self.probability(img))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn textured(shape: Shape, seed: u64) -> ImageTensor {
        let mut r = RngStream::new(seed, 0);
        let data = (0..shape.len()).map(|_| 0.2 + 0.6 * r.uniform() as f32).collect();
        ImageTensor::new(shape, data).unwrap()
    }

    fn rect() -> PatchRegion {
        PatchRegion::Rect {
            top: 2,
            left: 3,
            height: 4,
            width: 5,
        }
    }

    #[test]
    fn matching_patch_is_fake_with_closed_form_score() {
        let img = textured(Shape::new(3, 16, 16), 1);
        let d = PlantedPatchDetector::from_image(&img, rect(), 25.0, 0.1).unwrap();
        let p = d.score_batch(&[img]).unwrap()[0];
        assert_eq!(d.discrepancy(&textured(Shape::new(3, 16, 16), 1)), 0.0);
        assert!((p - sigmoid(-25.0 * 0.1)).abs() < 1e-15);
        assert!(p < 0.5);
    }

    #[test]
    fn shifted_patch_discrepancy_half() {
        let shape = Shape::new(1, 8, 8);
        let reference = vec![0.25f32; 16];
        let region = PatchRegion::Rect {
            top: 0,
            left: 0,
            height: 4,
            width: 4,
        };
        let d = PlantedPatchDetector::new(shape, region, reference, 25.0, 0.1).unwrap();
        let img = ImageTensor::filled(shape, 0.75).unwrap();
        assert_eq!(d.discrepancy(&img), 0.5);
        let expected = 1.0 / (1.0 + (-25.0f64 * 0.4).exp());
        assert!((d.score_batch(&[img]).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn locality_outside_region() {
        let shape = Shape::new(3, 16, 16);
        let img = textured(shape, 2);
        let d = PlantedPatchDetector::from_image(&img, rect(), 25.0, 0.1).unwrap();
        let inside: std::collections::HashSet<usize> = d.pixels().iter().copied().collect();
        let base = d.probability(&img);
        let mut r = RngStream::new(9, 9);
        let mut data = img.data().to_vec();
        for _ in 0..1000 {
            let p = r.below(shape.pixels() as u64) as usize;
            if inside.contains(&p) {
                continue;
            }
            let c = r.below(3) as usize;
            data[c * shape.pixels() + p] = r.uniform() as f32;
            let edited = ImageTensor::new(shape, data.clone()).unwrap();
            assert_eq!(d.probability(&edited).to_bits(), base.to_bits());
        }
    }

    #[test]
    fn out_of_bounds_region_rejected() {
        let shape = Shape::new(1, 4, 4);
        let region = PatchRegion::Rect {
            top: 2,
            left: 2,
            height: 3,
            width: 1,
        };
        assert!(PlantedPatchDetector::new(shape, region, vec![0.0; 3], 25.0, 0.1).is_err());
        let px = PatchRegion::Pixels { indices: vec![16] };
        assert!(PlantedPatchDetector::new(shape, px, vec![0.0], 25.0, 0.1).is_err());
    }
}
