//! Seeded synthetic benchmark: textured images, each paired with a planted
//! patch detector whose patch is one SLIC segment of the image.

use serde::{Deserialize, Serialize};

use crate::detectors::{PatchRegion, PlantedPatchDetector, DEFAULT_SENSITIVITY, DEFAULT_THRESHOLD_OFFSET};
use crate::error::{Error, Result};
use crate::perturbation::resize_bilinear;
use crate::rng::{tags, RngStream};
use crate::segmentation::{segment_pixel_sets, slic_segment, SegmentationMap, SlicParams};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteParams {
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Per-element distance between the image patch and the detector's
    /// reference; must stay below `threshold_offset` so the intact image
    /// reads as fake.
    pub reference_offset: f64,
    pub sensitivity: f64,
    pub threshold_offset: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            n: 100,
            size: 64,
            channels: 3,
            seed: 0,
            reference_offset: 0.07,
            sensitivity: DEFAULT_SENSITIVITY,
            threshold_offset: DEFAULT_THRESHOLD_OFFSET,
        }
    }
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.size < 8 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::config("suite needs n >= 1, size >= 8 and 1 or 3 channels"));
        }
        if !(self.reference_offset >= 0.0 && self.reference_offset < self.threshold_offset) {
            return Err(Error::config(
                "suite reference_offset must be in [0, threshold_offset) so images start fake",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCase {
    pub index: usize,
    pub image: ImageTensor,
    pub detector: PlantedPatchDetector,
    pub segmentation: SegmentationMap,
    pub planted_segment: usize,
}

/// Smooth random texture in `[0.2, 0.8]`: bilinearly upsampled 6x6 noise
/// per channel plus fine grain.
pub fn textured_image(shape: Shape, rng: &RngStream) -> Result<ImageTensor> {
    shape.validate()?;
    let coarse = 6;
    let mut r = rng.clone();
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.channels {
        let low: Vec<f64> = (0..coarse * coarse).map(|_| r.uniform()).collect();
        let up = resize_bilinear(&low, coarse, coarse, shape.height, shape.width);
        for v in up {
            let grain = 0.1 * (r.uniform() - 0.5);
            data.push((0.2 + 0.6 * (0.85 * v + 0.15 * (grain + 0.5))).clamp(0.2, 0.8) as f32);
        }
    }
    ImageTensor::new(shape, data)
}

/// Build case `index` of the suite. Cases are independent of each other, so
/// any single case can be regenerated on its own.
pub fn planted_case(params: &SuiteParams, slic: &SlicParams, index: usize) -> Result<PlantedCase> {
    params.validate()?;
    let rng = RngStream::new(params.seed, tags::SUITE).split(index as u64);
    let shape = Shape::new(params.channels, params.size, params.size);
    let image = textured_image(shape, &rng.split(0))?;
    let segmentation = slic_segment(&image, slic)?;
    let sets = segment_pixel_sets(&segmentation);
    let mean = (shape.pixels() as f64) / sets.len() as f64;
    let eligible: Vec<usize> = (0..sets.len())
        .filter(|&s| {
            let n = sets[s].len() as f64;
            n >= 0.5 * mean && n <= 2.0 * mean
        })
        .collect();
    let mut pick = rng.split(1);
    let planted_segment = if eligible.is_empty() {
        pick.below(sets.len() as u64) as usize
    } else {
        eligible[pick.below(eligible.len() as u64) as usize]
    };
    let pixels = sets[planted_segment].clone();
    let plane = shape.pixels();
    let mut signs = rng.split(2);
    let reference: Vec<f32> = (0..shape.channels)
        .flat_map(|c| pixels.iter().map(move |&p| c * plane + p))
        .map(|o| {
            let s = if signs.bernoulli(0.5) { 1.0 } else { -1.0 };
            (image.data()[o] as f64 + s * params.reference_offset) as f32
        })
        .collect();
    let detector = PlantedPatchDetector::new(
        shape,
        PatchRegion::Pixels { indices: pixels },
        reference,
        params.sensitivity,
        params.threshold_offset,
    )?;
    Ok(PlantedCase {
        index,
        image,
        detector,
        segmentation,
        planted_segment,
    })
}

pub fn planted_suite(params: &SuiteParams, slic: &SlicParams) -> Result<Vec<PlantedCase>> {
    (0..params.n).map(|i| planted_case(params, slic, i)).collect()
}
