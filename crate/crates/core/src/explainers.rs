//! LIME, KernelSHAP, Sobol and RISE saliency.
//!
//! Every explainer attributes the detector's fake probability and takes the
//! replacement strategy as a parameter, so the classic method and its
//! adversarial-masking variant differ only in the field that fills masked
//! regions.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nes::{generate_adversarial, AdversarialResult, AttackRegion, NesParams};
use crate::oracle::{fake_probability, Oracle};
use crate::perturbation::{
    blend, coalition_keep, grid_mask, replacement_field, resize_bilinear, rise_random_mask,
    ReplacementStrategy, SobolDesign,
};
use crate::rng::{tags, RngStream};
use crate::segmentation::{SegmentationMap, SlicParams};
use crate::tensor::{Field, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    Shap,
    Sobol,
    Rise,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lime, Method::Shap, Method::Sobol, Method::Rise];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::Shap => "shap",
            Method::Sobol => "sobol",
            Method::Rise => "rise",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Lime => tags::LIME,
            Method::Shap => tags::SHAP,
            Method::Sobol => tags::SOBOL,
            Method::Rise => tags::RISE,
        }
    }

    /// Whether the method's features are segments of a segmentation map.
    pub fn uses_segments(self) -> bool {
        matches!(self, Method::Lime | Method::Shap)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}` (lime, shap, sobol, rise)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "classic")]
    Classic,
    #[serde(rename = "adv")]
    AdversarialMasking,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Classic, Variant::AdversarialMasking];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Classic => "classic",
            Variant::AdversarialMasking => "adv",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Variant::Classic),
            "adv" | "adversarial" => Ok(Variant::AdversarialMasking),
            _ => Err(Error::config(format!("unknown variant `{s}` (classic, adv)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimeConfig {
    pub n_perturbations: usize,
    pub kernel_width: f64,
    pub ridge: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_perturbations: 2000,
            kernel_width: 0.25,
            ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapConfig {
    pub n_evaluations: usize,
    pub blur_kernel: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            n_evaluations: 2000,
            blur_kernel: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobolConfig {
    pub grid: usize,
    pub n_designs: usize,
    pub blur_kernel: usize,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            n_designs: 32,
            blur_kernel: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiseConfig {
    pub n_masks: usize,
    pub grid: usize,
    pub keep_prob: f64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: 4000,
            grid: 7,
            keep_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    pub lime: LimeConfig,
    pub shap: ShapConfig,
    pub sobol: SobolConfig,
    pub rise: RiseConfig,
    pub slic: SlicParams,
    /// Perturbed images per `score_batch` call; 0 means 32.
    pub batch_size: usize,
}

impl ExplainerConfig {
    fn batch(&self) -> usize {
        if self.batch_size == 0 {
            32
        } else {
            self.batch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lime.n_perturbations == 0
            || self.shap.n_evaluations == 0
            || self.rise.n_masks == 0
            || self.sobol.grid == 0
        {
            return Err(Error::config("explainer sample counts must be at least 1"));
        }
        if self.sobol.n_designs < 2 {
            return Err(Error::config("sobol.n_designs must be at least 2"));
        }
        if !(self.lime.kernel_width > 0.0) || !(self.lime.ridge >= 0.0) {
            return Err(Error::config("lime kernel_width must be positive and ridge non-negative"));
        }
        if !(self.rise.keep_prob > 0.0 && self.rise.keep_prob < 1.0) || self.rise.grid == 0 {
            return Err(Error::config("rise keep_prob must be in (0, 1) and grid at least 1"));
        }
        Ok(())
    }

    /// Forward passes a classic explanation costs, given the segment count.
    pub fn expected_passes(&self, method: Method, n_segments: usize) -> u64 {
        match method {
            Method::Lime => self.lime.n_perturbations as u64,
            Method::Shap => shap_budget(n_segments, self.shap.n_evaluations) as u64 + 2,
            Method::Sobol => {
                let g = self.sobol.grid;
                (self.sobol.n_designs * (g * g + 2)) as u64
            }
            Method::Rise => self.rise.n_masks as u64,
        }
    }

    /// The replacement each method uses in its classic form.
    pub fn classic_strategy(&self, method: Method) -> ReplacementStrategy {
        match method {
            Method::Lime => ReplacementStrategy::MeanPixel,
            Method::Shap => ReplacementStrategy::blur(self.shap.blur_kernel),
            Method::Sobol => ReplacementStrategy::blur(self.sobol.blur_kernel),
            Method::Rise => ReplacementStrategy::OccludeBlack,
        }
    }
}

/// Detector usage of one explanation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Everything, including the attack of an adversarial variant.
    pub forward_passes: u64,
    pub batch_calls: u64,
    pub explainer_passes: u64,
    pub attack_passes: u64,
    pub attack_iterations: Option<usize>,
    pub attack_converged: Option<bool>,
    /// Time spent inside the detector.
    pub detector_seconds: f64,
    /// End-to-end time of the explanation, attack included.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Ridge penalty actually used by LIME (raised if the system was singular).
    pub ridge: Option<f64>,
    /// Sobol output variance was zero; all indices reported as 0.
    pub zero_variance: bool,
    /// First-order Sobol indices per cell.
    pub first_order: Option<Vec<f64>>,
    /// Fake probability of the input and of the fully replaced image.
    pub full_value: Option<f64>,
    pub baseline_value: Option<f64>,
}

/// Per-pixel importance of the fake decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    #[serde(skip)]
    pub scores: Field,
    pub height: usize,
    pub width: usize,
    pub method: Method,
    pub variant: Variant,
    pub strategy: String,
    pub budget: Budget,
    /// Attribution per feature: per segment for LIME/SHAP, per grid cell for
    /// Sobol, empty for RISE.
    pub attributions: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl SaliencyMap {
    /// Scores rescaled to `[0, 1]`; a constant map renders as all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = self.scores.min_max();
        if hi > lo {
            self.scores.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.scores.values.len()]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.scores.values.iter().all(|v| v.is_finite())
    }
}

/// Scores `n` perturbed images produced on demand, in fixed-size batches.
fn score_fake<F>(oracle: &Oracle, n: usize, batch: usize, mut build: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<ImageTensor>,
{
    let mut out = Vec::with_capacity(n);
    let mut pending = Vec::with_capacity(batch);
    for i in 0..n {
        pending.push(build(i)?);
        if pending.len() == batch || i + 1 == n {
            out.extend(oracle.score(&pending)?.into_iter().map(fake_probability));
            pending.clear();
        }
    }
    Ok(out)
}

struct Run<'o, 'a> {
    oracle: &'o Oracle<'a>,
    start_counter: crate::oracle::CounterSnapshot,
    started: Instant,
}

impl<'o, 'a> Run<'o, 'a> {
    fn begin(oracle: &'o Oracle<'a>) -> Self {
        Self {
            oracle,
            start_counter: oracle.snapshot(),
            started: Instant::now(),
        }
    }

    fn budget(&self) -> Budget {
        let used = self.oracle.snapshot().since(&self.start_counter);
        Budget {
            forward_passes: used.forward_passes,
            batch_calls: used.batch_calls,
            explainer_passes: used.forward_passes,
            detector_seconds: used.wall_time,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            ..Budget::default()
        }
    }
}

fn check_segmentation(image: &ImageTensor, seg: &SegmentationMap) -> Result<()> {
    if seg.height() != image.height() || seg.width() != image.width() {
        return Err(Error::config(format!(
            "segmentation is {}x{}, image is {}",
            seg.height(),
            seg.width(),
            image.shape()
        )));
    }
    Ok(())
}

fn variant_of(strategy: &ReplacementStrategy) -> Variant {
    match strategy {
        ReplacementStrategy::AdversarialReplace(_) => Variant::AdversarialMasking,
        _ => Variant::Classic,
    }
}

fn segment_field(seg: &SegmentationMap, values: &[f64]) -> Field {
    Field {
        height: seg.height(),
        width: seg.width(),
        values: seg.labels().iter().map(|&l| values[l]).collect(),
    }
}

// ---------------------------------------------------------------- LIME

/// Weighted ridge regression with an unpenalised intercept.
///
/// Returns `(intercept, coefficients, ridge_used)`; when the normal equations
/// are not positive definite the penalty is raised tenfold until they are.
pub fn weighted_ridge(
    x: &[Vec<f64>],
    y: &[f64],
    weights: &[f64],
    ridge: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let n = x.len();
    let d = x.first().map_or(0, |r| r.len());
    let wsum: f64 = weights.iter().sum();
    if n == 0 || !(wsum > 0.0) {
        return Err(Error::config("regression needs samples with positive weight"));
    }
    let mut xm = vec![0.0; d];
    let mut ym = 0.0;
    for ((row, &yi), &w) in x.iter().zip(y).zip(weights) {
        for (m, &v) in xm.iter_mut().zip(row) {
            *m += w * v;
        }
        ym += w * yi;
    }
    xm.iter_mut().for_each(|m| *m /= wsum);
    ym /= wsum;

    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut xc = vec![0.0; d];
    for ((row, &yi), &w) in x.iter().zip(y).zip(weights) {
        for k in 0..d {
            xc[k] = row[k] - xm[k];
        }
        let yc = yi - ym;
        for a in 0..d {
            let wa = w * xc[a];
            if wa == 0.0 {
                continue;
            }
            rhs[a] += wa * yc;
            for b in a..d {
                gram[(a, b)] += wa * xc[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let mut lambda = ridge;
    for _ in 0..12 {
        let mut m = gram.clone();
        for a in 0..d {
            m[(a, a)] += lambda;
        }
        if let Some(ch) = m.cholesky() {
            let beta = ch.solve(&rhs);
            let coef: Vec<f64> = beta.iter().copied().collect();
            let intercept = ym - coef.iter().zip(&xm).map(|(c, m)| c * m).sum::<f64>();
            return Ok((intercept, coef, lambda));
        }
        lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-6 };
        log::warn!("ridge system singular, raising penalty to {lambda}");
    }
    Err(Error::config("ridge regression stayed singular"))
}

/// LIME's proximity weight of a coalition to the unperturbed instance.
pub fn lime_kernel(z: &[bool], kernel_width: f64) -> f64 {
    let on = z.iter().filter(|&&b| b).count() as f64;
    let cos = (on / z.len() as f64).sqrt();
    let d = 1.0 - cos;
    (-(d * d) / (kernel_width * kernel_width)).exp()
}

/// Fit LIME's surrogate to coalition samples and their fake scores.
pub fn lime_fit(samples: &[Vec<bool>], scores: &[f64], cfg: &LimeConfig) -> Result<(Vec<f64>, f64)> {
    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|z| z.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let w: Vec<f64> = samples.iter().map(|z| lime_kernel(z, cfg.kernel_width)).collect();
    let (_, coef, lambda) = weighted_ridge(&x, scores, &w, cfg.ridge)?;
    Ok((coef, lambda))
}

pub fn explain_lime(
    image: &ImageTensor,
    oracle: &Oracle,
    seg: &SegmentationMap,
    strategy: &ReplacementStrategy,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    check_segmentation(image, seg)?;
    let run = Run::begin(oracle);
    let replacement = replacement_field(image, strategy)?;
    let s = seg.n_segments();
    let mut r = rng.clone();
    let samples: Vec<Vec<bool>> = (0..cfg.lime.n_perturbations)
        .map(|_| (0..s).map(|_| r.bernoulli(0.5)).collect())
        .collect();
    let scores = score_fake(oracle, samples.len(), cfg.batch(), |i| {
        Ok(blend(image, &coalition_keep(seg, &samples[i]), &replacement))
    })?;
    let (coef, lambda) = lime_fit(&samples, &scores, &cfg.lime)?;
    Ok(SaliencyMap {
        scores: segment_field(seg, &coef),
        height: image.height(),
        width: image.width(),
        method: Method::Lime,
        variant: variant_of(strategy),
        strategy: strategy.name(),
        budget: run.budget(),
        attributions: coef,
        diagnostics: Diagnostics {
            ridge: Some(lambda),
            ..Default::default()
        },
    })
}

// ----------------------------------------------------------- KernelSHAP

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Coalitions KernelSHAP evaluates for `m` players and a requested budget
/// (excluding the full and empty coalitions).
pub fn shap_budget(m: usize, requested: usize) -> usize {
    if m <= 30 && requested > (1usize << m) - 2 {
        (1usize << m) - 2
    } else {
        requested
    }
}

fn combinations(m: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + m - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        if idx[i] == i + m - k {
            return;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Coalitions and kernel weights in the style of the reference KernelSHAP
/// sampler: subset sizes are enumerated completely, from the outside in, as
/// long as the budget allows; the remaining sizes are sampled with the
/// Shapley kernel, each draw paired with its complement.
pub fn shap_coalitions(m: usize, n_evaluations: usize, rng: &mut RngStream) -> Vec<(Vec<bool>, f64)> {
    let nsamples = shap_budget(m, n_evaluations);
    let mut out: Vec<(Vec<bool>, f64)> = Vec::with_capacity(nsamples);
    if m < 2 {
        return out;
    }
    let num_sizes = (m - 1).div_ceil(2);
    let num_paired = (m - 1) / 2;
    let mut weights: Vec<f64> = (1..=num_sizes)
        .map(|i| (m - 1) as f64 / (i * (m - i)) as f64)
        .collect();
    for w in weights.iter_mut().take(num_paired) {
        *w *= 2.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let mut num_full = 0;
    let mut left = nsamples as f64;
    let mut remaining = weights.clone();
    for size in 1..=num_sizes {
        let mut nsubsets = binomial(m, size);
        let paired = size <= num_paired;
        if paired {
            nsubsets *= 2.0;
        }
        if left * remaining[size - 1] / nsubsets < 1.0 - 1e-8 {
            break;
        }
        num_full += 1;
        left -= nsubsets;
        if remaining[size - 1] < 1.0 {
            let scale = 1.0 - remaining[size - 1];
            remaining.iter_mut().for_each(|w| *w /= scale);
        }
        let mut w = weights[size - 1] / binomial(m, size);
        if paired {
            w /= 2.0;
        }
        combinations(m, size, |idx| {
            let mut z = vec![false; m];
            for &i in idx {
                z[i] = true;
            }
            if paired {
                let comp: Vec<bool> = z.iter().map(|b| !b).collect();
                out.push((z, w));
                out.push((comp, w));
            } else {
                out.push((z, w));
            }
        });
    }

    let fixed = out.len();
    let mut samples_left = nsamples.saturating_sub(fixed);
    if num_full != num_sizes && samples_left > 0 {
        let mut rw = weights.clone();
        for w in rw.iter_mut().take(num_paired) {
            *w /= 2.0;
        }
        let rw = &rw[num_full..];
        let rtotal: f64 = rw.iter().sum();
        let cdf: Vec<f64> = rw
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w / rtotal;
                Some(*acc)
            })
            .collect();
        let draws = 4 * samples_left;
        let mut used: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut perm: Vec<usize> = (0..m).collect();
        for _ in 0..draws {
            if samples_left == 0 {
                break;
            }
            let u = rng.uniform();
            let ind = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
            let size = ind + num_full + 1;
            rng.shuffle(&mut perm);
            let mut z = vec![false; m];
            for &i in &perm[..size] {
                z[i] = true;
            }
            let existing = used.get(&z).copied();
            match existing {
                None => {
                    used.insert(z.clone(), out.len());
                    samples_left -= 1;
                    out.push((z.clone(), 1.0));
                }
                Some(pos) => out[pos].1 += 1.0,
            }
            if samples_left > 0 && size <= num_paired {
                match existing {
                    None => {
                        samples_left -= 1;
                        out.push((z.iter().map(|b| !b).collect(), 1.0));
                    }
                    Some(pos) => out[pos + 1].1 += 1.0,
                }
            }
        }
        let weight_left: f64 = weights[num_full..].iter().sum();
        let sampled: f64 = out[fixed..].iter().map(|(_, w)| w).sum();
        if sampled > 0.0 {
            for s in out[fixed..].iter_mut() {
                s.1 *= weight_left / sampled;
            }
        }
    }
    out
}

/// Shapley values of a cooperative game estimated by KernelSHAP.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapEstimate {
    pub phi: Vec<f64>,
    pub full_value: f64,
    pub baseline_value: f64,
    /// Coalitions evaluated, full and empty included.
    pub evaluations: usize,
}

/// KernelSHAP for an `m`-player game. `value` receives batches of
/// coalitions and returns one payoff per coalition; the first call is the
/// full and the empty coalition. The efficiency constraint
/// `sum(phi) = v(full) - v(empty)` is enforced exactly.
pub fn kernel_shap<F>(m: usize, n_evaluations: usize, rng: &mut RngStream, mut value: F) -> Result<ShapEstimate>
where
    F: FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
{
    if m == 0 {
        return Err(Error::config("KernelSHAP needs at least one player"));
    }
    let ends = value(&[vec![true; m], vec![false; m]])?;
    let (fx, fnull) = (ends[0], ends[1]);
    if m == 1 {
        return Ok(ShapEstimate {
            phi: vec![fx - fnull],
            full_value: fx,
            baseline_value: fnull,
            evaluations: 2,
        });
    }
    let samples = shap_coalitions(m, n_evaluations, rng);
    let masks: Vec<Vec<bool>> = samples.iter().map(|(z, _)| z.clone()).collect();
    let ey = value(&masks)?;
    if ey.len() != masks.len() {
        return Err(Error::config("coalition payoff count mismatch"));
    }

    let last = m - 1;
    let total = fx - fnull;
    let k = m - 1;
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for ((z, w), y) in samples.iter().zip(&ey) {
        let zl = if z[last] { 1.0 } else { 0.0 };
        let target = (y - fnull) - zl * total;
        for j in 0..k {
            row[j] = (if z[j] { 1.0 } else { 0.0 }) - zl;
        }
        for a in 0..k {
            if row[a] == 0.0 {
                continue;
            }
            let wa = w * row[a];
            rhs[a] += wa * target;
            for b in 0..k {
                gram[(a, b)] += wa * row[b];
            }
        }
    }
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::config(format!("KernelSHAP system unsolvable: {e}")))?
            * rhs,
    };
    let mut phi: Vec<f64> = beta.iter().copied().collect();
    let rest: f64 = phi.iter().sum();
    phi.push(total - rest);
    Ok(ShapEstimate {
        phi,
        full_value: fx,
        baseline_value: fnull,
        evaluations: masks.len() + 2,
    })
}

pub fn explain_kernel_shap(
    image: &ImageTensor,
    oracle: &Oracle,
    seg: &SegmentationMap,
    strategy: &ReplacementStrategy,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    check_segmentation(image, seg)?;
    if seg.n_segments() < 2 {
        return Err(Error::config("KernelSHAP needs at least two segments"));
    }
    let run = Run::begin(oracle);
    let replacement = replacement_field(image, strategy)?;
    let batch = cfg.batch();
    let mut r = rng.clone();
    let est = kernel_shap(seg.n_segments(), cfg.shap.n_evaluations, &mut r, |coalitions| {
        score_fake(oracle, coalitions.len(), batch, |i| {
            Ok(blend(image, &coalition_keep(seg, &coalitions[i]), &replacement))
        })
    })?;
    Ok(SaliencyMap {
        scores: segment_field(seg, &est.phi),
        height: image.height(),
        width: image.width(),
        method: Method::Shap,
        variant: variant_of(strategy),
        strategy: strategy.name(),
        budget: run.budget(),
        attributions: est.phi,
        diagnostics: Diagnostics {
            full_value: Some(est.full_value),
            baseline_value: Some(est.baseline_value),
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------------- Sobol

#[derive(Debug, Clone, PartialEq)]
pub struct SobolIndices {
    pub total: Vec<f64>,
    pub first: Vec<f64>,
    pub variance: f64,
    pub zero_variance: bool,
}

/// Jansen total-order and Saltelli first-order indices from model outputs on
/// the A, B and AB_i designs (`f_ab[i][row]`).
pub fn sobol_indices(f_a: &[f64], f_b: &[f64], f_ab: &[Vec<f64>]) -> SobolIndices {
    let n = f_a.len() as f64;
    let all: Vec<f64> = f_a.iter().chain(f_b).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let variance = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    if !(variance > 1e-20 * mean.abs().max(1.0).powi(2)) {
        return SobolIndices {
            total: vec![0.0; f_ab.len()],
            first: vec![0.0; f_ab.len()],
            variance,
            zero_variance: true,
        };
    }
    let total = f_ab
        .iter()
        .map(|fi| {
            f_a.iter().zip(fi).map(|(a, x)| (a - x).powi(2)).sum::<f64>() / n / (2.0 * variance)
        })
        .collect();
    let first = f_ab
        .iter()
        .map(|fi| {
            f_b.iter()
                .zip(fi)
                .zip(f_a)
                .map(|((b, x), a)| b * (x - a))
                .sum::<f64>()
                / n
                / variance
        })
        .collect();
    SobolIndices {
        total,
        first,
        variance,
        zero_variance: false,
    }
}

/// Evaluate `f` on a Sobol design and estimate the indices. `f` receives
/// batches of factor vectors.
pub fn sobol_experiment<F>(design: &SobolDesign, mut f: F) -> Result<SobolIndices>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let d = design.factors();
    let n = design.n_designs();
    let f_a = f(&design.a)?;
    let f_b = f(&design.b)?;
    let mut f_ab = Vec::with_capacity(d);
    for i in 0..d {
        let rows: Vec<Vec<f64>> = (0..n).map(|r| design.ab(i, r)).collect();
        f_ab.push(f(&rows)?);
    }
    Ok(sobol_indices(&f_a, &f_b, &f_ab))
}

pub fn explain_sobol(
    image: &ImageTensor,
    oracle: &Oracle,
    strategy: &ReplacementStrategy,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let run = Run::begin(oracle);
    let (h, w) = (image.height(), image.width());
    let g = cfg.sobol.grid;
    let replacement = replacement_field(image, strategy)?;
    let design = SobolDesign::new(g, cfg.sobol.n_designs, &mut rng.clone())?;
    let batch = cfg.batch();
    let idx = sobol_experiment(&design, |rows| {
        score_fake(oracle, rows.len(), batch, |i| {
            let m = grid_mask(&rows[i], g, h, w)?;
            Ok(blend(image, &m.keep.values, &replacement))
        })
    })?;
    if idx.zero_variance {
        log::warn!("sobol: detector output has zero variance over the design");
    }
    let scores = Field::new(h, w, resize_bilinear(&idx.total, g, g, h, w))?;
    Ok(SaliencyMap {
        scores,
        height: h,
        width: w,
        method: Method::Sobol,
        variant: variant_of(strategy),
        strategy: strategy.name(),
        budget: run.budget(),
        attributions: idx.total,
        diagnostics: Diagnostics {
            zero_variance: idx.zero_variance,
            first_order: Some(idx.first),
            ..Default::default()
        },
    })
}

// ----------------------------------------------------------------- RISE

pub fn explain_rise(
    image: &ImageTensor,
    oracle: &Oracle,
    strategy: &ReplacementStrategy,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let run = Run::begin(oracle);
    let (h, w) = (image.height(), image.width());
    let rc = &cfg.rise;
    let replacement = replacement_field(image, strategy)?;
    let batch = cfg.batch();
    let mut acc = vec![0.0; h * w];
    let mut masks = Vec::with_capacity(batch);
    let mut pending = Vec::with_capacity(batch);
    for i in 0..rc.n_masks {
        let m = rise_random_mask(&mut rng.split(i as u64), rc.grid, rc.keep_prob, h, w)?;
        pending.push(blend(image, &m.keep.values, &replacement));
        masks.push(m);
        if pending.len() == batch || i + 1 == rc.n_masks {
            let scores = oracle.score(&pending)?;
            for (m, p) in masks.iter().zip(scores) {
                let f = fake_probability(p);
                for (a, k) in acc.iter_mut().zip(&m.keep.values) {
                    *a += f * k;
                }
            }
            pending.clear();
            masks.clear();
        }
    }
    let norm = 1.0 / (rc.n_masks as f64 * rc.keep_prob);
    acc.iter_mut().for_each(|v| *v *= norm);
    Ok(SaliencyMap {
        scores: Field::new(h, w, acc)?,
        height: h,
        width: w,
        method: Method::Rise,
        variant: variant_of(strategy),
        strategy: strategy.name(),
        budget: run.budget(),
        attributions: Vec::new(),
        diagnostics: Diagnostics::default(),
    })
}

// ------------------------------------------------------------ dispatch

/// Run `method` with an explicit replacement strategy.
pub fn explain(
    method: Method,
    image: &ImageTensor,
    oracle: &Oracle,
    seg: &SegmentationMap,
    strategy: &ReplacementStrategy,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    let rng = rng.split(method.tag());
    match method {
        Method::Lime => explain_lime(image, oracle, seg, strategy, cfg, &rng),
        Method::Shap => explain_kernel_shap(image, oracle, seg, strategy, cfg, &rng),
        Method::Sobol => explain_sobol(image, oracle, strategy, cfg, &rng),
        Method::Rise => explain_rise(image, oracle, strategy, cfg, &rng),
    }
}

/// The global attack whose result serves as the adversarial replacement.
///
/// Fails with [`Error::NotFake`] when the detector already calls the input
/// real: only detected fakes are explained.
pub fn adversarial_reference(
    image: &ImageTensor,
    oracle: &Oracle,
    nes: &NesParams,
    rng: &RngStream,
) -> Result<AdversarialResult> {
    let region = AttackRegion::global(image.height(), image.width());
    let res = generate_adversarial(image, oracle, nes, &region, &rng.split(tags::EXPLAIN_ATTACK))?;
    if res.success && res.iterations_used == 0 {
        return Err(Error::NotFake {
            p_real: res.initial_p_real,
        });
    }
    if !res.success {
        log::warn!(
            "attack did not fool the detector in {} iterations (best p_real {:.4}); using best sample",
            res.iterations_used,
            res.final_p_real
        );
    }
    Ok(res)
}

/// Explain with a precomputed adversarial reference, charging its attack to
/// the budget.
pub fn explain_with_reference(
    method: Method,
    image: &ImageTensor,
    oracle: &Oracle,
    seg: &SegmentationMap,
    attack: &AdversarialResult,
    attack_seconds: f64,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    let strategy = ReplacementStrategy::AdversarialReplace(attack.adversarial_image.clone());
    let mut map = explain(method, image, oracle, seg, &strategy, cfg, rng)?;
    let b = &mut map.budget;
    b.attack_passes = attack.forward_passes;
    b.forward_passes += attack.forward_passes;
    b.attack_iterations = Some(attack.iterations_used);
    b.attack_converged = Some(attack.success);
    b.wall_seconds += attack_seconds;
    Ok(map)
}

/// The adversarial-masking variant of `method`: attack, then explain with
/// the attack's output as the replacement field.
pub fn make_adversarial_variant(
    method: Method,
    image: &ImageTensor,
    oracle: &Oracle,
    seg: &SegmentationMap,
    nes: &NesParams,
    cfg: &ExplainerConfig,
    rng: &RngStream,
) -> Result<SaliencyMap> {
    let run = Run::begin(oracle);
    let attack = adversarial_reference(image, oracle, nes, rng)?;
    let attack_seconds = run.started.elapsed().as_secs_f64();
    let mut map = explain_with_reference(method, image, oracle, seg, &attack, attack_seconds, cfg, rng)?;
    let total = run.budget();
    map.budget.batch_calls = total.batch_calls;
    map.budget.detector_seconds = total.detector_seconds;
    map.budget.wall_seconds = total.wall_seconds;
    Ok(map)
}
