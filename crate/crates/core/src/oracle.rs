//! The black-box detector contract and inference accounting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Default decision threshold on the probability-of-real.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A binary real/fake image classifier seen only through its scores.
///
/// Implementations return, for every input image, the probability that the
/// image is real. Output order matches input order.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>>;

    /// Whether `score_batch` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<D: Detector + ?Sized> Detector for &D {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        (**self).score_batch(batch)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

impl<D: Detector + ?Sized> Detector for std::sync::Arc<D> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        (**self).score_batch(batch)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn from_probability(p_real: f64, threshold: f64) -> Self {
        if p_real >= threshold {
            Label::Real
        } else {
            Label::Fake
        }
    }
}

/// Thread-safe running totals of detector usage.
#[derive(Debug, Default)]
pub struct InferenceCounter {
    forward_passes: AtomicU64,
    batch_calls: AtomicU64,
    nanos: AtomicU64,
}

/// A frozen copy of an [`InferenceCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub forward_passes: u64,
    pub batch_calls: u64,
    pub wall_time: f64,
}

impl CounterSnapshot {
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            forward_passes: self.forward_passes - earlier.forward_passes,
            batch_calls: self.batch_calls - earlier.batch_calls,
            wall_time: self.wall_time - earlier.wall_time,
        }
    }
}

impl std::ops::Add for CounterSnapshot {
    type Output = CounterSnapshot;
    fn add(self, rhs: Self) -> Self {
        CounterSnapshot {
            forward_passes: self.forward_passes + rhs.forward_passes,
            batch_calls: self.batch_calls + rhs.batch_calls,
            wall_time: self.wall_time + rhs.wall_time,
        }
    }
}

impl InferenceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, images: u64, seconds: f64) {
        self.forward_passes.fetch_add(images, Ordering::Relaxed);
        self.batch_calls.fetch_add(1, Ordering::Relaxed);
        self.nanos
            .fetch_add((seconds * 1e9) as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            forward_passes: self.forward_passes.load(Ordering::Relaxed),
            batch_calls: self.batch_calls.load(Ordering::Relaxed),
            wall_time: self.nanos.load(Ordering::Relaxed) as f64 * 1e-9,
        }
    }
}

/// A detector wrapped with a decision threshold and usage accounting.
///
/// All toolkit code talks to detectors through an `Oracle`, so every forward
/// pass is counted exactly once. Scores are validated against the contract
/// (one finite probability per image).
pub struct Oracle<'a> {
    detector: &'a dyn Detector,
    threshold: f64,
    counter: InferenceCounter,
    serial: Mutex<()>,
}

impl<'a> Oracle<'a> {
    pub fn new(detector: &'a dyn Detector) -> Self {
        Self::with_threshold(detector, DEFAULT_THRESHOLD)
    }

    pub fn with_threshold(detector: &'a dyn Detector, threshold: f64) -> Self {
        Self {
            detector,
            threshold,
            counter: InferenceCounter::new(),
            serial: Mutex::new(()),
        }
    }

    pub fn detector(&self) -> &'a dyn Detector {
        self.detector
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn counter(&self) -> &InferenceCounter {
        &self.counter
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        self.counter.snapshot()
    }

    pub fn label(&self, p_real: f64) -> Label {
        Label::from_probability(p_real, self.threshold)
    }

    /// Score a batch of images, returning probabilities of "real".
    pub fn score(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let _guard = if self.detector.concurrent() {
            None
        } else {
            Some(self.serial.lock().unwrap_or_else(|e| e.into_inner()))
        };
        let start = Instant::now();
        let scores = self
            .detector
            .score_batch(batch)
            .map_err(|e| e.with_oracle_context(&format!("batch of {}", batch.len())))?;
        self.counter
            .record(batch.len() as u64, start.elapsed().as_secs_f64());
        if scores.len() != batch.len() {
            return Err(Error::oracle(
                self.detector.name(),
                format!("{} scores for {} images", scores.len(), batch.len()),
            ));
        }
        if let Some(bad) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::oracle(
                self.detector.name(),
                format!("score {bad} is not a probability"),
            ));
        }
        Ok(scores)
    }

    /// Score many images in chunks of `batch_size`.
    pub fn score_chunked(&self, images: &[ImageTensor], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            out.extend(self.score(chunk)?);
        }
        Ok(out)
    }

    /// Probability-of-real and the derived label for a single image.
    pub fn classify(&self, image: &ImageTensor) -> Result<(f64, Label)> {
        let p = self.score(std::slice::from_ref(image))?[0];
        Ok((p, self.label(p)))
    }
}

/// Probability-of-real and label for one image, counted on a fresh oracle.
pub fn classify(detector: &dyn Detector, image: &ImageTensor) -> Result<(f64, Label)> {
    Oracle::new(detector).classify(image)
}

/// Build the fake-class target used by all explainers.
pub fn fake_probability(p_real: f64) -> f64 {
    1.0 - p_real
}

/// Streams images to an oracle in fixed-size batches as they are produced.
///
/// Explainers push perturbed images one at a time; the buffer flushes every
/// `batch_size` images so memory stays bounded regardless of budget.
pub struct BatchScorer<'o, 'a> {
    oracle: &'o Oracle<'a>,
    batch_size: usize,
    pending: Vec<ImageTensor>,
    scores: Vec<f64>,
}

impl<'o, 'a> BatchScorer<'o, 'a> {
    pub fn new(oracle: &'o Oracle<'a>, batch_size: usize) -> Self {
        Self {
            oracle,
            batch_size: batch_size.max(1),
            pending: Vec::with_capacity(batch_size.max(1)),
            scores: Vec::new(),
        }
    }

    pub fn push(&mut self, image: ImageTensor) -> Result<()> {
        self.pending.push(image);
        if self.pending.len() >= self.batch_size {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if !self.pending.is_empty() {
            let s = self.oracle.score(&self.pending)?;
            self.scores.extend(s);
            self.pending.clear();
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<f64>> {
        self.flush()?;
        Ok(self.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::ConstantDetector;
    use crate::tensor::Shape;

    fn img() -> ImageTensor {
        ImageTensor::filled(Shape::new(1, 2, 2), 0.5).unwrap()
    }

    #[test]
    fn constant_real() {
        let d = ConstantDetector::new(1.0);
        assert_eq!(classify(&d, &img()).unwrap(), (1.0, Label::Real));
    }

    #[test]
    fn constant_fake() {
        let d = ConstantDetector::new(0.0);
        assert_eq!(classify(&d, &img()).unwrap(), (0.0, Label::Fake));
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(Label::from_probability(0.5, 0.5), Label::Real);
        assert_eq!(Label::from_probability(0.4999, 0.5), Label::Fake);
    }

    #[test]
    fn counter_counts_images() {
        let d = ConstantDetector::new(0.3);
        let o = Oracle::new(&d);
        o.classify(&img()).unwrap();
        o.score(&vec![img(); 5]).unwrap();
        let s = o.snapshot();
        assert_eq!(s.forward_passes, 6);
        assert_eq!(s.batch_calls, 2);
        assert!(s.forward_passes >= s.batch_calls);
    }

    #[test]
    fn batch_scorer_chunks() {
        let d = ConstantDetector::new(0.3);
        let o = Oracle::new(&d);
        let mut b = BatchScorer::new(&o, 4);
        for _ in 0..10 {
            b.push(img()).unwrap();
        }
        let s = b.finish().unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(o.snapshot().batch_calls, 3);
    }

    struct Broken;
    impl Detector for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
            Ok(vec![1.5; batch.len()])
        }
    }

    #[test]
    fn rejects_non_probabilities() {
        let o = Oracle::new(&Broken);
        assert!(matches!(o.classify(&img()), Err(Error::Oracle { .. })));
    }
}
