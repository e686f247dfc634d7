//! Perturbation masks and replacement strategies.
//!
//! A mask is a keep field over the pixel grid. Applying it blends the image
//! with a replacement field `R`: `out = keep * x + (1 - keep) * R`, the same
//! keep value used for every channel. Classic strategies derive `R` from the
//! image itself (black, a constant, the mean colour, a blur, noise);
//! adversarial masking uses an adversarial counterpart of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmc::ScrambledSobol;
use crate::rng::{tags, RngStream};
use crate::segmentation::SegmentationMap;
use crate::tensor::{clamp_in_place, Field, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    SegmentSubset,
    LowResBinaryUpsampled,
    LowResRealUpsampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMask {
    pub keep: Field,
    pub provenance: MaskProvenance,
}

impl PerturbationMask {
    pub fn new(keep: Field, provenance: MaskProvenance) -> Result<Self> {
        if keep.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("mask values must lie in [0, 1]"));
        }
        Ok(Self { keep, provenance })
    }

    pub fn height(&self) -> usize {
        self.keep.height
    }

    pub fn width(&self) -> usize {
        self.keep.width
    }
}

/// What fills the masked-out part of an image.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplacementStrategy {
    OccludeBlack,
    ConstantValue(f32),
    /// Per-channel mean of the image.
    MeanPixel,
    /// Three passes of a box filter with this width.
    Blur { kernel_size: usize },
    /// Image plus Gaussian noise, clamped; the noise is seeded.
    GaussianNoise { std: f64, seed: u64 },
    /// Pixels of a reference image, normally an adversarial counterpart.
    AdversarialReplace(ImageTensor),
}

impl ReplacementStrategy {
    /// Blur strategy; an even width is widened to the next odd one.
    pub fn blur(kernel_size: usize) -> Self {
        ReplacementStrategy::Blur {
            kernel_size: kernel_size | 1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ReplacementStrategy::OccludeBlack => "occlude_black".into(),
            ReplacementStrategy::ConstantValue(v) => format!("constant({v})"),
            ReplacementStrategy::MeanPixel => "mean_pixel".into(),
            ReplacementStrategy::Blur { kernel_size } => format!("blur({kernel_size})"),
            ReplacementStrategy::GaussianNoise { std, .. } => format!("gaussian_noise({std})"),
            ReplacementStrategy::AdversarialReplace(_) => "adversarial".into(),
        }
    }
}

/// The field `R` that a strategy substitutes for masked pixels.
pub fn replacement_field(image: &ImageTensor, strategy: &ReplacementStrategy) -> Result<ImageTensor> {
    let shape = image.shape();
    match strategy {
        ReplacementStrategy::OccludeBlack => ImageTensor::filled(shape, 0.0),
        ReplacementStrategy::ConstantValue(v) => {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::config(format!("replacement constant {v} is not a pixel value")));
            }
            ImageTensor::filled(shape, *v)
        }
        ReplacementStrategy::MeanPixel => {
            let means = image.channel_means();
            let plane = shape.pixels();
            let data = (0..shape.len()).map(|i| means[i / plane] as f32).collect();
            ImageTensor::from_clamped(shape, data)
        }
        ReplacementStrategy::Blur { kernel_size } => {
            if *kernel_size < 3 || kernel_size % 2 == 0 {
                return Err(Error::config(format!(
                    "blur kernel size {kernel_size} must be odd and at least 3"
                )));
            }
            Ok(box_blur(image, *kernel_size))
        }
        ReplacementStrategy::GaussianNoise { std, seed } => {
            if !(*std >= 0.0) {
                return Err(Error::config("noise std must be non-negative"));
            }
            let mut noise = vec![0.0; shape.len()];
            RngStream::new(*seed, tags::NOISE).fill_normals(&mut noise);
            let data = image
                .data()
                .iter()
                .zip(noise)
                .map(|(&x, z)| (x as f64 + std * z) as f32)
                .collect();
            ImageTensor::from_clamped(shape, data)
        }
        ReplacementStrategy::AdversarialReplace(reference) => {
            if reference.shape() != shape {
                return Err(Error::config(format!(
                    "adversarial reference is {}, image is {shape}",
                    reference.shape()
                )));
            }
            Ok(reference.clone())
        }
    }
}

/// `keep * image + (1 - keep) * replacement`, exact at keep 0 and 1.
pub fn blend(image: &ImageTensor, keep: &[f64], replacement: &ImageTensor) -> ImageTensor {
    let shape = image.shape();
    let plane = shape.pixels();
    debug_assert_eq!(keep.len(), plane);
    debug_assert_eq!(replacement.shape(), shape);
    let (x, r) = (image.data(), replacement.data());
    let mut out = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        let off = c * plane;
        for (p, &k) in keep.iter().enumerate() {
            let i = off + p;
            out.push(if k >= 1.0 {
                x[i]
            } else if k <= 0.0 {
                r[i]
            } else {
                (k * x[i] as f64 + (1.0 - k) * r[i] as f64) as f32
            });
        }
    }
    ImageTensor::from_trusted(shape, out)
}

pub fn apply_mask(
    image: &ImageTensor,
    mask: &PerturbationMask,
    strategy: &ReplacementStrategy,
) -> Result<ImageTensor> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::config(format!(
            "mask is {}x{}, image is {}",
            mask.height(),
            mask.width(),
            image.shape()
        )));
    }
    let r = replacement_field(image, strategy)?;
    Ok(blend(image, &mask.keep.values, &r))
}

/// Keep field that is 1 on segments whose flag is set and 0 elsewhere.
pub fn coalition_keep(seg: &SegmentationMap, on: &[bool]) -> Vec<f64> {
    seg.labels()
        .iter()
        .map(|&l| if on[l] { 1.0 } else { 0.0 })
        .collect()
}

pub fn segment_subset_mask(seg: &SegmentationMap, on_segments: &[usize]) -> Result<PerturbationMask> {
    let mut on = vec![false; seg.n_segments()];
    for &s in on_segments {
        if s >= on.len() {
            return Err(Error::config(format!(
                "segment {s} does not exist (map has {})",
                on.len()
            )));
        }
        on[s] = true;
    }
    let keep = Field::new(seg.height(), seg.width(), coalition_keep(seg, &on))?;
    PerturbationMask::new(keep, MaskProvenance::SegmentSubset)
}

/// Separable box filter of width `k` (clamped to the image), applied three
/// times. Windows are truncated at the border and renormalised.
pub fn box_blur(image: &ImageTensor, kernel_size: usize) -> ImageTensor {
    let shape = image.shape();
    let (h, w) = (shape.height, shape.width);
    let largest_odd = |n: usize| if n % 2 == 1 { n } else { n - 1 };
    let k = kernel_size.min(largest_odd(h.min(w))).max(1);
    let r = k / 2;
    let mut out = Vec::with_capacity(shape.len());
    let mut buf: Vec<f64> = Vec::new();
    for c in 0..shape.channels {
        buf.clear();
        buf.extend(image.channel(c).iter().map(|&v| v as f64));
        for _ in 0..3 {
            box_pass(&mut buf, h, w, r, true);
            box_pass(&mut buf, h, w, r, false);
        }
        out.extend(buf.iter().map(|&v| v as f32));
    }
    clamp_in_place(&mut out);
    ImageTensor::from_trusted(shape, out)
}

fn box_pass(buf: &mut [f64], h: usize, w: usize, r: usize, horizontal: bool) {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let idx = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut prefix = vec![0.0; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + buf[idx(line, i)];
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            buf[idx(line, i)] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coords = |d: usize, s: usize| -> Vec<(usize, usize, f64)> {
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, f - i0 as f64)
            })
            .collect()
    };
    let ys = coords(dh, sh);
    let xs = coords(dw, sw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let b = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

/// A RISE mask: an `s x s` Bernoulli(`keep_prob`) grid upsampled to one cell
/// beyond the image, then randomly shifted and cropped to `height x width`.
pub fn rise_random_mask(
    rng: &mut RngStream,
    low_res: usize,
    keep_prob: f64,
    height: usize,
    width: usize,
) -> Result<PerturbationMask> {
    if low_res == 0 || !(keep_prob > 0.0 && keep_prob < 1.0) {
        return Err(Error::config("RISE needs low_res >= 1 and 0 < keep_prob < 1"));
    }
    let s = low_res;
    let grid: Vec<f64> = (0..s * s)
        .map(|_| if rng.bernoulli(keep_prob) { 1.0 } else { 0.0 })
        .collect();
    let cell_h = height.div_ceil(s);
    let cell_w = width.div_ceil(s);
    let (uh, uw) = ((s + 1) * cell_h, (s + 1) * cell_w);
    let up = resize_bilinear(&grid, s, s, uh, uw);
    let dy = rng.below(cell_h as u64) as usize;
    let dx = rng.below(cell_w as u64) as usize;
    let mut keep = Vec::with_capacity(height * width);
    for y in 0..height {
        let row = (y + dy) * uw + dx;
        keep.extend(up[row..row + width].iter().map(|v| v.clamp(0.0, 1.0)));
    }
    PerturbationMask::new(
        Field::new(height, width, keep)?,
        MaskProvenance::LowResBinaryUpsampled,
    )
}

/// Upsample a `g x g` field of keep values to a real-valued mask.
pub fn grid_mask(values: &[f64], grid: usize, height: usize, width: usize) -> Result<PerturbationMask> {
    if values.len() != grid * grid {
        return Err(Error::config("grid mask has the wrong number of cells"));
    }
    let keep = resize_bilinear(values, grid, grid, height, width)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    PerturbationMask::new(
        Field::new(height, width, keep)?,
        MaskProvenance::LowResRealUpsampled,
    )
}

/// The A, B and AB_i design matrices of a Sobol total-index experiment over
/// `grid * grid` mask cells, drawn from one `2 * grid^2`-dimensional
/// scrambled Sobol' sequence (A from the first half of the coordinates, B
/// from the second).
#[derive(Debug, Clone, PartialEq)]
pub struct SobolDesign {
    pub grid: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl SobolDesign {
    pub fn new(grid: usize, n_designs: usize, rng: &mut RngStream) -> Result<Self> {
        if grid == 0 || n_designs < 2 {
            return Err(Error::config("Sobol design needs grid >= 1 and at least 2 designs"));
        }
        let d = grid * grid;
        let seq = ScrambledSobol::new(2 * d, rng);
        let mut a = Vec::with_capacity(n_designs);
        let mut b = Vec::with_capacity(n_designs);
        for i in 0..n_designs as u32 {
            let p = seq.point(i);
            a.push(p[..d].to_vec());
            b.push(p[d..].to_vec());
        }
        Ok(Self { grid, a, b })
    }

    pub fn n_designs(&self) -> usize {
        self.a.len()
    }

    pub fn factors(&self) -> usize {
        self.grid * self.grid
    }

    /// Row `row` of AB_i: A's row with column `i` taken from B.
    pub fn ab(&self, i: usize, row: usize) -> Vec<f64> {
        let mut v = self.a[row].clone();
        v[i] = self.b[row][i];
        v
    }

    /// Number of model evaluations the design requires.
    pub fn evaluations(&self) -> usize {
        self.n_designs() * (self.factors() + 2)
    }
}

/// Exact L2-star discrepancy (Warnock's formula).
pub fn l2_star_discrepancy(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let d = points.first().map_or(0, |p| p.len()) as i32;
    let term1 = 3f64.powi(-d);
    let term2: f64 = points
        .iter()
        .map(|p| p.iter().map(|&x| (1.0 - x * x) / 2.0).product::<f64>())
        .sum::<f64>()
        * 2.0
        / n;
    let mut term3 = 0.0;
    for p in points {
        for q in points {
            term3 += p.iter().zip(q).map(|(&a, &b)| 1.0 - a.max(b)).product::<f64>();
        }
    }
    (term1 - term2 + term3 / (n * n)).max(0.0).sqrt()
}

/// Lower bound on the (L-infinity) star discrepancy from `boxes` anchored
/// boxes whose upper corners take coordinates from the point set.
pub fn star_discrepancy_estimate(points: &[Vec<f64>], boxes: usize, rng: &mut RngStream) -> f64 {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.len());
    let mut worst: f64 = 0.0;
    let mut corner = vec![0.0; d];
    for _ in 0..boxes {
        for (k, c) in corner.iter_mut().enumerate() {
            let j = rng.below(n as u64 + 1) as usize;
            *c = if j == n { 1.0 } else { points[j][k] };
        }
        let volume: f64 = corner.iter().product();
        let open = points
            .iter()
            .filter(|p| p.iter().zip(&corner).all(|(x, c)| x < c))
            .count() as f64;
        let closed = points
            .iter()
            .filter(|p| p.iter().zip(&corner).all(|(x, c)| x <= c))
            .count() as f64;
        worst = worst
            .max(volume - open / n as f64)
            .max(closed / n as f64 - volume);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn ramp(shape: Shape) -> ImageTensor {
        let n = shape.len();
        ImageTensor::new(shape, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    fn all_strategies(img: &ImageTensor) -> Vec<ReplacementStrategy> {
        let mut adv = img.data().to_vec();
        adv.iter_mut().for_each(|v| *v = (*v + 0.03).min(1.0));
        vec![
            ReplacementStrategy::OccludeBlack,
            ReplacementStrategy::ConstantValue(0.3),
            ReplacementStrategy::MeanPixel,
            ReplacementStrategy::blur(5),
            ReplacementStrategy::GaussianNoise { std: 0.1, seed: 4 },
            ReplacementStrategy::AdversarialReplace(ImageTensor::new(img.shape(), adv).unwrap()),
        ]
    }

    #[test]
    fn identity_mask_is_bit_identical() {
        let img = ramp(Shape::new(3, 5, 6));
        let mask = PerturbationMask::new(Field::filled(5, 6, 1.0), MaskProvenance::SegmentSubset).unwrap();
        for s in all_strategies(&img) {
            assert_eq!(apply_mask(&img, &mask, &s).unwrap(), img, "{}", s.name());
        }
    }

    #[test]
    fn zero_mask_gives_replacement() {
        let img = ramp(Shape::new(3, 5, 6));
        let mask = PerturbationMask::new(Field::filled(5, 6, 0.0), MaskProvenance::SegmentSubset).unwrap();
        for s in all_strategies(&img) {
            let out = apply_mask(&img, &mask, &s).unwrap();
            assert_eq!(out, replacement_field(&img, &s).unwrap());
        }
    }

    #[test]
    fn half_mask_with_black_halves() {
        let img = ramp(Shape::new(1, 4, 4));
        let mask = PerturbationMask::new(Field::filled(4, 4, 0.5), MaskProvenance::LowResRealUpsampled).unwrap();
        let out = apply_mask(&img, &mask, &ReplacementStrategy::ConstantValue(0.0)).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, i / 2.0);
        }
    }

    #[test]
    fn mean_pixel_by_hand() {
        // Two channels of a 2x2 image: means 0.25 and 0.625.
        let img = ImageTensor::new(
            Shape::new(3, 2, 2),
            vec![0.0, 0.5, 0.0, 0.5, 0.5, 0.5, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let seg = SegmentationMap::from_labels(2, 2, vec![0, 0, 1, 1]).unwrap();
        let mask = segment_subset_mask(&seg, &[0]).unwrap();
        let out = apply_mask(&img, &mask, &ReplacementStrategy::MeanPixel).unwrap();
        assert_eq!(&out.data()[0..4], &[0.0, 0.5, 0.25, 0.25]);
        assert_eq!(&out.data()[4..8], &[0.5, 0.5, 0.625, 0.625]);
        assert_eq!(&out.data()[8..12], &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn subset_masks() {
        let seg = SegmentationMap::from_labels(2, 3, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let all = segment_subset_mask(&seg, &[0, 1, 2]).unwrap();
        assert!(all.keep.values.iter().all(|&v| v == 1.0));
        let none = segment_subset_mask(&seg, &[]).unwrap();
        assert!(none.keep.values.iter().all(|&v| v == 0.0));
        let one_off = segment_subset_mask(&seg, &[0, 2]).unwrap();
        assert_eq!(one_off.keep.values, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(segment_subset_mask(&seg, &[3]).is_err());
    }

    #[test]
    fn adversarial_reference_shape_checked() {
        let img = ramp(Shape::new(1, 4, 4));
        let other = ramp(Shape::new(1, 4, 5));
        let mask = PerturbationMask::new(Field::filled(4, 4, 0.0), MaskProvenance::SegmentSubset).unwrap();
        assert!(apply_mask(&img, &mask, &ReplacementStrategy::AdversarialReplace(other)).is_err());
        let bad = PerturbationMask::new(Field::filled(3, 4, 0.0), MaskProvenance::SegmentSubset).unwrap();
        assert!(apply_mask(&img, &bad, &ReplacementStrategy::OccludeBlack).is_err());
    }

    #[test]
    fn blur_even_kernel_widened_and_constant_preserved() {
        assert_eq!(ReplacementStrategy::blur(128), ReplacementStrategy::Blur { kernel_size: 129 });
        let img = ImageTensor::filled(Shape::new(3, 9, 7), 0.6).unwrap();
        let b = box_blur(&img, 129);
        for v in b.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_blur_approaches_mean() {
        let img = ramp(Shape::new(1, 16, 16));
        let b = box_blur(&img, 129);
        let mean = img.channel_means()[0];
        let spread = b.data().iter().map(|&v| (v as f64 - mean).abs()).fold(0.0, f64::max);
        assert!(spread < 0.2, "{spread}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
        let up = resize_bilinear(&[0.7], 1, 1, 5, 3);
        assert!(up.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn rise_mask_degenerate_and_mean() {
        let mut r = RngStream::new(1, 1);
        let m = rise_random_mask(&mut r, 7, 1.0 - 1e-12, 32, 32).unwrap();
        assert!(m.keep.values.iter().all(|&v| v == 1.0));

        // One fixed pixel from each of 10,000 independent masks.
        let mut r = RngStream::new(2, 2);
        let mut total = 0.0;
        for _ in 0..10_000 {
            let m = rise_random_mask(&mut r, 7, 0.5, 16, 16).unwrap();
            total += m.keep.get(5, 9);
        }
        assert!((total / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn rise_mask_deterministic() {
        let a = rise_random_mask(&mut RngStream::new(5, 5), 7, 0.5, 16, 16).unwrap();
        let b = rise_random_mask(&mut RngStream::new(5, 5), 7, 0.5, 16, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sobol_design_structure() {
        let d = SobolDesign::new(2, 4, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(d.factors(), 4);
        for row in 0..4 {
            for i in 0..4 {
                let ab = d.ab(i, row);
                for j in 0..4 {
                    let expect = if j == i { d.b[row][j] } else { d.a[row][j] };
                    assert_eq!(ab[j], expect);
                }
            }
        }
        assert_eq!(d.evaluations(), 4 * 6);
    }

    #[test]
    fn grid_one_is_constant() {
        let d = SobolDesign::new(1, 3, &mut RngStream::new(2, 2)).unwrap();
        let m = grid_mask(&d.a[0], 1, 6, 5).unwrap();
        assert!(m.keep.values.iter().all(|&v| v == d.a[0][0]));
    }

    #[test]
    fn warnock_single_point() {
        // One point at the origin corner x: D2^2 = 1/3 - (1 - x^2) + (1 - x).
        let x: f64 = 0.5;
        let expect = (1.0 / 3.0 - (1.0 - x * x) + (1.0 - x)).sqrt();
        assert!((l2_star_discrepancy(&[vec![x]]) - expect).abs() < 1e-12);
    }
}
