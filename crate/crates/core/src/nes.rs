//! Black-box adversarial image generation with Natural Evolution Strategies.
//!
//! Each iteration checks whether the detector is already fooled, estimates
//! the gradient of the probability-of-real from `n` antithetic Gaussian probe
//! pairs, and takes a signed step of size `alpha`. The cumulative perturbation
//! is kept inside the L-infinity ball of radius `delta` around the input and
//! inside the valid pixel range.
//!
//! Probe noise is addressed by absolute element position: the noise that
//! sample `j` of iteration `i` puts on element `e` is the same whatever the
//! attack region is. Attacks on nested regions therefore see identical noise
//! on their shared pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Label, Oracle};
use crate::rng::RngStream;
use crate::tensor::{clamp_in_place, ImageTensor, Shape};

/// How the update is kept within the distortion budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Project the accumulated perturbation onto the `delta` ball.
    #[default]
    Cumulative,
    /// Clip only the per-iteration step to `delta`; the accumulated
    /// perturbation is unbounded apart from the pixel range.
    StepOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NesParams {
    pub sigma: f64,
    pub n_samples: usize,
    pub max_iters: usize,
    pub max_distortion: f64,
    pub learning_rate: f64,
    /// Probe images per `score_batch` call.
    pub batch_size: usize,
    pub clip: ClipMode,
}

impl Default for NesParams {
    fn default() -> Self {
        Self::explanation()
    }
}

impl NesParams {
    /// Settings for producing the replacement sample of an explanation.
    pub fn explanation() -> Self {
        Self {
            sigma: 0.001,
            n_samples: 40,
            max_iters: 80,
            max_distortion: 16.0 / 255.0,
            learning_rate: 1.0 / 255.0,
            batch_size: 32,
            clip: ClipMode::Cumulative,
        }
    }

    /// Settings for the localized attacks of the evaluation protocol.
    pub fn evaluation() -> Self {
        Self {
            max_iters: 50,
            ..Self::explanation()
        }
    }

    pub fn with_max_iters(mut self, m: usize) -> Self {
        self.max_iters = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("NES sigma must be positive"));
        }
        if self.n_samples == 0 || self.max_iters == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "NES n_samples, max_iters and batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.max_distortion > 0.0) {
            return Err(Error::config(
                "NES learning_rate and max_distortion must be positive",
            ));
        }
        if self.learning_rate > self.max_distortion {
            return Err(Error::config(format!(
                "learning_rate {} exceeds max_distortion {}",
                self.learning_rate, self.max_distortion
            )));
        }
        Ok(())
    }

    /// Forward passes of an attack that ran `iterations` gradient steps.
    pub fn attack_passes(&self, iterations: usize) -> u64 {
        (2 * self.n_samples * iterations + iterations + 1) as u64
    }
}

/// Pixels an attack may modify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRegion {
    height: usize,
    width: usize,
    mask: Vec<bool>,
    pixels: Vec<usize>,
}

impl AttackRegion {
    pub fn global(height: usize, width: usize) -> Self {
        Self::from_mask(height, width, vec![true; height * width]).expect("consistent mask")
    }

    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::config("attack region mask does not match image size"));
        }
        let pixels = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Ok(Self {
            height,
            width,
            mask,
            pixels,
        })
    }

    /// Region from row-major pixel indices; duplicates are ignored.
    pub fn from_pixels<I: IntoIterator<Item = usize>>(
        height: usize,
        width: usize,
        pixels: I,
    ) -> Result<Self> {
        let mut mask = vec![false; height * width];
        for p in pixels {
            if p >= mask.len() {
                return Err(Error::config(format!(
                    "pixel {p} is outside a {height}x{width} image"
                )));
            }
            mask[p] = true;
        }
        Self::from_mask(height, width, mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Sorted row-major indices of attackable pixels.
    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.mask[pixel]
    }

    pub fn is_global(&self) -> bool {
        self.pixels.len() == self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if self.height != shape.height || self.width != shape.width {
            return Err(Error::config(format!(
                "attack region is {}x{}, image is {shape}",
                self.height, self.width
            )));
        }
        if self.is_empty() {
            return Err(Error::config("attack region is empty"));
        }
        Ok(())
    }

    /// Tensor element offsets covered by the region, channel-major.
    fn elements(&self, shape: Shape) -> Vec<usize> {
        let plane = shape.pixels();
        (0..shape.channels)
            .flat_map(|c| self.pixels.iter().map(move |&p| c * plane + p))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdversarialResult {
    #[serde(skip)]
    pub adversarial_image: ImageTensor,
    pub success: bool,
    pub iterations_used: usize,
    pub initial_p_real: f64,
    pub final_p_real: f64,
    /// All forward passes of the attack: probes plus classification checks.
    pub forward_passes: u64,
    pub probe_passes: u64,
    pub check_passes: u64,
    /// Probability-of-real at every classification check, in order.
    pub trace: Vec<f64>,
    pub linf_distortion: f64,
    pub mean_abs_distortion: f64,
}

/// `alpha * sign(g)` elementwise, with `sign(0) = 0`.
pub fn sign_step(g: &[f64], alpha: f64) -> Vec<f64> {
    g.iter()
        .map(|&v| {
            if v > 0.0 {
                alpha
            } else if v < 0.0 {
                -alpha
            } else {
                0.0
            }
        })
        .collect()
}

/// One NES gradient estimate of the probability-of-real at `x_adv`.
///
/// Returns a field with the layout of the image; entries outside `region`
/// are zero. Consumes exactly `2 * n_samples` forward passes.
pub fn nes_gradient_estimate(
    x_adv: &ImageTensor,
    oracle: &Oracle,
    params: &NesParams,
    region: &AttackRegion,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    params.validate()?;
    region.check(x_adv.shape())?;
    let elems = region.elements(x_adv.shape());
    let g = estimate(x_adv, &elems, region.is_global(), oracle, params, rng)?;
    let mut full = vec![0.0; x_adv.shape().len()];
    for (&e, v) in elems.iter().zip(g) {
        full[e] = v;
    }
    Ok(full)
}

fn probe_noise(rng: &RngStream, elems: &[usize], total: usize, n: usize, dense: bool) -> Vec<f64> {
    if dense {
        let mut u = vec![0.0; n * total];
        rng.fill_normals(&mut u);
        return u;
    }
    let mut u = Vec::with_capacity(n * elems.len());
    for j in 0..n {
        let base = (j * total) as u64;
        rng.normals_at(elems.iter().map(|&e| base + e as u64), &mut u);
    }
    u
}

fn estimate(
    x: &ImageTensor,
    elems: &[usize],
    dense: bool,
    oracle: &Oracle,
    params: &NesParams,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let n = params.n_samples;
    let m = elems.len();
    let u = probe_noise(rng, elems, x.shape().len(), n, dense);
    let base = x.data();

    let mut diffs = vec![0.0; n];
    let mut batch: Vec<ImageTensor> = Vec::with_capacity(params.batch_size);
    let mut slots: Vec<(usize, f64)> = Vec::with_capacity(params.batch_size);
    let total = 2 * n;
    for probe in 0..total {
        let j = probe / 2;
        let sign = if probe % 2 == 0 { 1.0 } else { -1.0 };
        let uj = &u[j * m..(j + 1) * m];
        let mut data = base.to_vec();
        for (t, &e) in elems.iter().enumerate() {
            data[e] = (base[e] as f64 + sign * params.sigma * uj[t]) as f32;
        }
        clamp_in_place(&mut data);
        batch.push(ImageTensor::from_trusted(x.shape(), data));
        slots.push((j, sign));
        if batch.len() == params.batch_size || probe + 1 == total {
            let scores = oracle.score(&batch)?;
            for (&(j, sign), p) in slots.iter().zip(scores) {
                diffs[j] += sign * p;
            }
            batch.clear();
            slots.clear();
        }
    }

    let mut g = vec![0.0; m];
    for (j, &d) in diffs.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let uj = &u[j * m..(j + 1) * m];
        for (gt, &ut) in g.iter_mut().zip(uj) {
            *gt += d * ut;
        }
    }
    let scale = 1.0 / (2.0 * n as f64 * params.sigma);
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

/// Per-element bounds of the distortion ball, as f32 values inside it.
fn ball_bounds(x: &[f32], elems: &[usize], delta: f64) -> (Vec<f32>, Vec<f32>) {
    let mut lo = Vec::with_capacity(elems.len());
    let mut hi = Vec::with_capacity(elems.len());
    for &e in elems {
        let v = x[e] as f64;
        let mut l = (v - delta).max(0.0) as f32;
        if (l as f64) < v - delta {
            l = l.next_up();
        }
        let mut h = (v + delta).min(1.0) as f32;
        if (h as f64) > v + delta {
            h = h.next_down();
        }
        lo.push(l);
        hi.push(h);
    }
    (lo, hi)
}

/// Run the attack on `x` within `region`.
///
/// Returns as soon as a classification check reports Real, or after
/// `max_iters` gradient steps. When no iterate fools the detector, the iterate
/// with the highest observed probability-of-real is returned.
pub fn generate_adversarial(
    x: &ImageTensor,
    oracle: &Oracle,
    params: &NesParams,
    region: &AttackRegion,
    rng: &RngStream,
) -> Result<AdversarialResult> {
    params.validate()?;
    region.check(x.shape())?;
    let shape = x.shape();
    let elems = region.elements(shape);
    let dense = region.is_global();
    let (lo, hi) = ball_bounds(x.data(), &elems, params.max_distortion);
    let start = oracle.snapshot();

    let mut current = x.clone();
    let mut trace = Vec::with_capacity(params.max_iters + 1);
    let mut best: Option<(f64, ImageTensor)> = None;
    let mut success = false;
    let mut iterations = 0;

    for it in 0..=params.max_iters {
        let (p, label) = oracle.classify(&current)?;
        trace.push(p);
        if label == Label::Real {
            success = true;
            iterations = it;
            break;
        }
        if best.as_ref().is_none_or(|(bp, _)| p >= *bp) {
            best = Some((p, current.clone()));
        }
        if it == params.max_iters {
            iterations = it;
            break;
        }
        let g = estimate(&current, &elems, dense, oracle, params, &rng.split(it as u64))?;
        let step = sign_step(&g, params.learning_rate);
        let mut data = current.into_data();
        for (t, &e) in elems.iter().enumerate() {
            if step[t] == 0.0 {
                continue;
            }
            let mut v = data[e] as f64 + step[t];
            if params.clip == ClipMode::Cumulative {
                v = v.clamp(lo[t] as f64, hi[t] as f64);
            }
            data[e] = v.clamp(0.0, 1.0) as f32;
        }
        current = ImageTensor::from_trusted(shape, data);
        log::trace!("nes iteration {it}: p_real {p:.6}");
    }

    let (final_p, image) = if success {
        (*trace.last().unwrap(), current)
    } else {
        best.expect("at least one check")
    };
    let used = oracle.snapshot().since(&start);
    let probe_passes = (2 * params.n_samples * iterations) as u64;
    let check_passes = iterations as u64 + 1;
    Ok(AdversarialResult {
        linf_distortion: image.linf_distance(x),
        mean_abs_distortion: image.mean_abs_distance(x),
        adversarial_image: image,
        success,
        iterations_used: iterations,
        initial_p_real: trace[0],
        final_p_real: final_p,
        forward_passes: used.forward_passes,
        probe_passes,
        check_passes,
        trace,
    })
}
