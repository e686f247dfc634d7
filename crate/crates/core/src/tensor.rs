//! Dense channel-major image tensors with pixel values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image dimensions in channel, row, column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image height and width must be positive"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// An image stored as `f32` samples in C-order `(channel, row, column)`.
///
/// Construction validates that every sample lies in `[0, 1]`; once built the
/// tensor is immutable, so it can be shared freely between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::config(format!(
                "pixel {i} = {v} lies outside [0, 1]"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Build a tensor from unrestricted values by clipping into `[0, 1]`.
    pub fn from_clamped(shape: Shape, mut data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        clamp_in_place(&mut data);
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Internal constructor for buffers whose range is already guaranteed.
    pub(crate) fn from_trusted(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-channel arithmetic mean.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|c| {
                let ch = self.channel(c);
                ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64
            })
            .collect()
    }

    /// Largest absolute elementwise difference to `other`, in `f64`.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_distance(&self, other: &ImageTensor) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        total / self.data.len() as f64
    }

    /// Little-endian `f32` bytes in C-order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.len() * 4 {
            return Err(Error::config(format!(
                "expected {} bytes for shape {shape}, got {}",
                shape.len() * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }
}

/// Clip every element into `[0, 1]`; in-range values are untouched.
pub fn clamp_pixels(shape: Shape, data: Vec<f32>) -> Result<ImageTensor> {
    ImageTensor::from_clamped(shape, data)
}

pub(crate) fn clamp_in_place(data: &mut [f32]) {
    for v in data.iter_mut() {
        // NaN maps to 0 so the range invariant can never be violated.
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

/// A real-valued field over the `H x W` pixel grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::config(format!(
                "field length {} does not match {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_identity_when_in_range() {
        let shape = Shape::new(1, 1, 3);
        let data = vec![0.0, 0.25, 1.0];
        let img = clamp_pixels(shape, data.clone()).unwrap();
        assert_eq!(img.data(), &data[..]);
    }

    #[test]
    fn clamp_saturates() {
        let shape = Shape::new(1, 1, 2);
        let img = clamp_pixels(shape, vec![1.3, -0.2]).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn clamp_mixed() {
        let shape = Shape::new(1, 1, 3);
        let img = clamp_pixels(shape, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_and_bad_shapes() {
        assert!(ImageTensor::new(Shape::new(1, 1, 1), vec![1.5]).is_err());
        assert!(ImageTensor::new(Shape::new(2, 1, 1), vec![0.1, 0.2]).is_err());
        assert!(ImageTensor::new(Shape::new(1, 2, 2), vec![0.1; 3]).is_err());
        assert!(ImageTensor::new(Shape::new(3, 0, 2), vec![]).is_err());
    }

    #[test]
    fn byte_round_trip() {
        let img = ImageTensor::new(Shape::new(3, 2, 2), (0..12).map(|i| i as f32 / 12.0).collect())
            .unwrap();
        let back = ImageTensor::from_le_bytes(img.shape(), &img.to_le_bytes()).unwrap();
        assert_eq!(img, back);
    }
}
