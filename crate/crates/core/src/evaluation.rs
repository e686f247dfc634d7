//! Segment-level scoring of saliency maps, top-k localized attacks, and the
//! accuracy / sufficiency benchmark.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainers::{
    adversarial_reference, explain, explain_with_reference, Budget, ExplainerConfig, Method,
    SaliencyMap, Variant,
};
use crate::nes::{generate_adversarial, AdversarialResult, AttackRegion, NesParams};
use crate::oracle::{fake_probability, Detector, Label, Oracle, DEFAULT_THRESHOLD};
use crate::qmc::ScrambledSobol;
use crate::rng::{tags, RngStream};
use crate::segmentation::{segment_pixel_sets, slic_segment, SegmentationMap};
use crate::tensor::{Field, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    /// Mean saliency per segment, indexed by segment id.
    pub per_segment: Vec<f64>,
    /// Segment ids, most important first; ties go to the lower id.
    pub ranking: Vec<usize>,
}

impl SegmentScores {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

pub fn segment_scores(saliency: &Field, seg: &SegmentationMap) -> Result<SegmentScores> {
    if saliency.height != seg.height() || saliency.width != seg.width() {
        return Err(Error::config(format!(
            "saliency is {}x{}, segmentation is {}x{}",
            saliency.height,
            saliency.width,
            seg.height(),
            seg.width()
        )));
    }
    let n = seg.n_segments();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (&l, &v) in seg.labels().iter().zip(&saliency.values) {
        sum[l] += v;
        count[l] += 1;
    }
    let per_segment: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| per_segment[b].total_cmp(&per_segment[a]).then(a.cmp(&b)));
    Ok(SegmentScores {
        per_segment,
        ranking,
    })
}

/// Union of the pixels of the `k` best-ranked segments.
pub fn topk_region(scores: &SegmentScores, seg: &SegmentationMap, k: usize) -> Result<AttackRegion> {
    if k == 0 || k > seg.n_segments() {
        return Err(Error::config(format!(
            "k = {k} is outside 1..={}",
            seg.n_segments()
        )));
    }
    let sets = segment_pixel_sets(seg);
    AttackRegion::from_pixels(
        seg.height(),
        seg.width(),
        scores.top(k).iter().flat_map(|&s| sets[s].iter().copied()),
    )
}

/// Attack the top-k segments. Pixels outside them are verified unchanged.
pub fn attack_topk(
    image: &ImageTensor,
    oracle: &Oracle,
    scores: &SegmentScores,
    seg: &SegmentationMap,
    k: usize,
    nes: &NesParams,
    rng: &RngStream,
) -> Result<AdversarialResult> {
    let region = topk_region(scores, seg, k)?;
    let res = generate_adversarial(image, oracle, nes, &region, rng)?;
    let plane = image.shape().pixels();
    let changed_outside = image
        .data()
        .iter()
        .zip(res.adversarial_image.data())
        .enumerate()
        .any(|(i, (a, b))| a.to_bits() != b.to_bits() && !region.contains(i % plane));
    if changed_outside {
        return Err(Error::config("localized attack modified pixels outside its region"));
    }
    Ok(res)
}

/// Fraction of images still classified fake after the attack.
pub fn accuracy_at_k(labels: &[(Label, Label)]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("accuracy of an empty set is undefined"));
    }
    let still = labels.iter().filter(|(_, after)| *after == Label::Fake).count();
    Ok(still as f64 / labels.len() as f64)
}

/// Mean clamped drop in fake probability, pairs are `(before, after)`.
pub fn sufficiency_at_k(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("sufficiency of an empty set is undefined"));
    }
    Ok(pairs.iter().map(|(b, a)| (b - a).clamp(0.0, 1.0)).sum::<f64>() / pairs.len() as f64)
}

/// Mean unclamped drop in fake probability.
pub fn sufficiency_unclamped(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("sufficiency of an empty set is undefined"));
    }
    Ok(pairs.iter().map(|(b, a)| b - a).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub variants: Vec<Variant>,
    pub ks: Vec<usize>,
    /// Images evaluated concurrently.
    pub jobs: usize,
    pub threshold: f64,
    pub explain_attack: NesParams,
    pub eval_attack: NesParams,
    pub explainers: ExplainerConfig,
    /// Record wall-clock times; off makes reports byte-reproducible.
    pub timing: bool,
    /// Keep every saliency map in the per-image records.
    pub keep_maps: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            ks: vec![1, 2, 3],
            jobs: 1,
            threshold: DEFAULT_THRESHOLD,
            explain_attack: NesParams::explanation(),
            eval_attack: NesParams::evaluation(),
            explainers: ExplainerConfig::default(),
            timing: true,
            keep_maps: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.variants.is_empty() || self.ks.is_empty() {
            return Err(Error::config("methods, variants and ks must be non-empty"));
        }
        if self.ks.contains(&0) {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must be in (0, 1)"));
        }
        self.explain_attack.validate()?;
        self.eval_attack.validate()?;
        self.explainers.validate()
    }

    /// The method/variant pairs in report order.
    pub fn runs(&self) -> Vec<(Method, Variant)> {
        let mut v = Vec::new();
        for &m in &self.methods {
            for &var in &self.variants {
                if !v.contains(&(m, var)) {
                    v.push((m, var));
                }
            }
        }
        v
    }
}

#[derive(Clone)]
pub struct BenchmarkCase {
    pub name: String,
    pub image: ImageTensor,
    pub detector: Arc<dyn Detector>,
    /// Precomputed segmentation; must equal SLIC with the configured params.
    pub segmentation: Option<SegmentationMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KOutcome {
    pub k: usize,
    pub p_fake_before: f64,
    pub p_fake_after: f64,
    pub still_fake: bool,
    pub eval_passes: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRun {
    pub method: Method,
    pub variant: Variant,
    pub error: Option<String>,
    pub budget: Budget,
    /// Best-ranked segments, as many as the largest k.
    pub top_segments: Vec<usize>,
    pub per_k: Vec<KOutcome>,
    #[serde(skip)]
    pub map: Option<SaliencyMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaseStatus {
    Evaluated,
    Skipped,
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseRecord {
    pub index: usize,
    pub name: String,
    pub status: CaseStatus,
    pub p_real: Option<f64>,
    pub n_segments: usize,
    pub runs: Vec<MethodRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub accuracy: f64,
    pub sufficiency: f64,
    pub sufficiency_unclamped: f64,
    /// Explanation passes (attack included) plus evaluation-attack passes.
    pub mean_inferences: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub variant: Variant,
    pub per_k: Vec<KMetrics>,
    /// Fraction of scored images the detector called fake.
    pub baseline_accuracy: f64,
    pub images_total: usize,
    pub images_evaluated: usize,
    pub images_skipped: usize,
    pub images_failed: usize,
    /// True when no image survived filtering; metrics are then absent.
    pub empty: bool,
    pub mean_explanation_passes: f64,
    pub mean_batch_calls: f64,
    pub mean_seconds: f64,
    pub attack_converged: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkOutput {
    pub reports: Vec<EvaluationReport>,
    pub cases: Vec<CaseRecord>,
}

fn evaluate_run(
    method: Method,
    variant: Variant,
    case: &BenchmarkCase,
    oracle: &Oracle,
    seg: &SegmentationMap,
    attack: Option<&(AdversarialResult, f64)>,
    p_real: f64,
    image_rng: &RngStream,
    cfg: &BenchmarkConfig,
) -> Result<MethodRun> {
    let before = oracle.snapshot();
    let started = Instant::now();
    let mut map = match variant {
        Variant::Classic => {
            let strategy = cfg.explainers.classic_strategy(method);
            explain(method, &case.image, oracle, seg, &strategy, &cfg.explainers, image_rng)?
        }
        Variant::AdversarialMasking => {
            let (res, secs) = attack.ok_or_else(|| Error::config("missing adversarial reference"))?;
            explain_with_reference(method, &case.image, oracle, seg, res, *secs, &cfg.explainers, image_rng)?
        }
    };
    let explain_seconds = started.elapsed().as_secs_f64();
    let used = oracle.snapshot().since(&before);
    if map.budget.explainer_passes != used.forward_passes {
        return Err(Error::config("explainer pass count disagrees with the oracle counter"));
    }
    if !map.is_finite() {
        return Err(Error::config(format!("{method}/{variant} produced non-finite saliency")));
    }
    if cfg.timing {
        let attack_seconds = match variant {
            Variant::Classic => 0.0,
            Variant::AdversarialMasking => attack.map_or(0.0, |a| a.1),
        };
        map.budget.wall_seconds = explain_seconds + attack_seconds;
    } else {
        map.budget.wall_seconds = 0.0;
        map.budget.detector_seconds = 0.0;
    }
    let scores = segment_scores(&map.scores, seg)?;
    let kmax = cfg.ks.iter().copied().max().unwrap_or(1);
    let eval_rng = image_rng.split(tags::EVAL_ATTACK);
    let mut per_k = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let res = attack_topk(&case.image, oracle, &scores, seg, k, &cfg.eval_attack, &eval_rng)?;
        per_k.push(KOutcome {
            k,
            p_fake_before: fake_probability(p_real),
            p_fake_after: fake_probability(res.final_p_real),
            still_fake: oracle.label(res.final_p_real) == Label::Fake,
            eval_passes: res.forward_passes,
            iterations: res.iterations_used,
        });
    }
    Ok(MethodRun {
        method,
        variant,
        error: None,
        budget: map.budget.clone(),
        top_segments: scores.top(kmax).to_vec(),
        per_k,
        map: cfg.keep_maps.then_some(map),
    })
}

fn evaluate_case(index: usize, case: &BenchmarkCase, cfg: &BenchmarkConfig) -> CaseRecord {
    let mut record = CaseRecord {
        index,
        name: case.name.clone(),
        status: CaseStatus::Evaluated,
        p_real: None,
        n_segments: 0,
        runs: Vec::new(),
    };
    let fail = |mut r: CaseRecord, e: Error| {
        log::warn!("{}: {e}", r.name);
        r.status = CaseStatus::Failed {
            error: e.to_string(),
        };
        r
    };
    let oracle = Oracle::with_threshold(case.detector.as_ref(), cfg.threshold);
    let p_real = match oracle.classify(&case.image) {
        Ok((p, Label::Fake)) => p,
        Ok((p, Label::Real)) => {
            record.p_real = Some(p);
            record.status = CaseStatus::Skipped;
            return record;
        }
        Err(e) => return fail(record, e),
    };
    record.p_real = Some(p_real);
    let seg = match &case.segmentation {
        Some(s) => s.clone(),
        None => match slic_segment(&case.image, &cfg.explainers.slic) {
            Ok(s) => s,
            Err(e) => return fail(record, e),
        },
    };
    record.n_segments = seg.n_segments();
    let image_rng = RngStream::new(cfg.seed, 0).split(index as u64);

    let attack = if cfg.variants.contains(&Variant::AdversarialMasking) {
        let started = Instant::now();
        match adversarial_reference(&case.image, &oracle, &cfg.explain_attack, &image_rng) {
            Ok(res) => {
                let secs = if cfg.timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                Some(Ok((res, secs)))
            }
            Err(e) => Some(Err(e.to_string())),
        }
    } else {
        None
    };

    for (method, variant) in cfg.runs() {
        let outcome = match (variant, &attack) {
            (Variant::AdversarialMasking, Some(Err(e))) => Err(Error::config(e.clone())),
            _ => evaluate_run(
                method,
                variant,
                case,
                &oracle,
                &seg,
                attack.as_ref().and_then(|a| a.as_ref().ok()),
                p_real,
                &image_rng,
                cfg,
            ),
        };
        record.runs.push(outcome.unwrap_or_else(|e| {
            log::warn!("{}: {method}/{variant} failed: {e}", case.name);
            MethodRun {
                method,
                variant,
                error: Some(e.to_string()),
                budget: Budget::default(),
                top_segments: Vec::new(),
                per_k: Vec::new(),
                map: None,
            }
        }));
    }
    record
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregate per-image records into one report per method/variant.
pub fn aggregate(cases: &[CaseRecord], cfg: &BenchmarkConfig) -> Vec<EvaluationReport> {
    let skipped = cases
        .iter()
        .filter(|c| c.status == CaseStatus::Skipped)
        .count();
    let scored = cases.iter().filter(|c| c.p_real.is_some()).count();
    let fake = cases
        .iter()
        .filter(|c| c.p_real.is_some() && c.status != CaseStatus::Skipped)
        .count();
    let baseline_accuracy = if scored == 0 {
        0.0
    } else {
        fake as f64 / scored as f64
    };
    let case_failed = cases
        .iter()
        .filter(|c| matches!(c.status, CaseStatus::Failed { .. }))
        .count();

    cfg.runs()
        .into_iter()
        .map(|(method, variant)| {
            let runs: Vec<&MethodRun> = cases
                .iter()
                .filter(|c| c.status == CaseStatus::Evaluated)
                .flat_map(|c| c.runs.iter())
                .filter(|r| r.method == method && r.variant == variant)
                .collect();
            let ok: Vec<&MethodRun> = runs.iter().copied().filter(|r| r.error.is_none()).collect();
            let failed = case_failed + runs.len() - ok.len();
            let per_k = if ok.is_empty() {
                Vec::new()
            } else {
                cfg.ks
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let outcomes: Vec<&KOutcome> = ok.iter().map(|r| &r.per_k[i]).collect();
                        let labels: Vec<(Label, Label)> = outcomes
                            .iter()
                            .map(|o| (Label::Fake, if o.still_fake { Label::Fake } else { Label::Real }))
                            .collect();
                        let pairs: Vec<(f64, f64)> =
                            outcomes.iter().map(|o| (o.p_fake_before, o.p_fake_after)).collect();
                        KMetrics {
                            k,
                            accuracy: accuracy_at_k(&labels).unwrap_or(0.0),
                            sufficiency: sufficiency_at_k(&pairs).unwrap_or(0.0),
                            sufficiency_unclamped: sufficiency_unclamped(&pairs).unwrap_or(0.0),
                            mean_inferences: mean(
                                ok.iter()
                                    .zip(&outcomes)
                                    .map(|(r, o)| (r.budget.forward_passes + o.eval_passes) as f64),
                            ),
                            images: outcomes.len(),
                        }
                    })
                    .collect()
            };
            let converged: Vec<bool> = ok.iter().filter_map(|r| r.budget.attack_converged).collect();
            EvaluationReport {
                method,
                variant,
                per_k,
                baseline_accuracy,
                images_total: cases.len(),
                images_evaluated: ok.len(),
                images_skipped: skipped,
                images_failed: failed,
                empty: ok.is_empty(),
                mean_explanation_passes: mean(ok.iter().map(|r| r.budget.forward_passes as f64)),
                mean_batch_calls: mean(ok.iter().map(|r| r.budget.batch_calls as f64)),
                mean_seconds: mean(ok.iter().map(|r| r.budget.wall_seconds)),
                attack_converged: (!converged.is_empty())
                    .then(|| converged.iter().filter(|&&c| c).count() as f64 / converged.len() as f64),
            }
        })
        .collect()
}

/// Explain and evaluate every case with every configured method and variant.
///
/// Cases run concurrently up to `cfg.jobs`; results are collected and
/// aggregated in case order, so the output does not depend on scheduling.
pub fn run_benchmark(cases: &[BenchmarkCase], cfg: &BenchmarkConfig) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    if cfg.methods.contains(&Method::Sobol) {
        let g = cfg.explainers.sobol.grid;
        ScrambledSobol::new(2 * g * g, &mut RngStream::new(0, 0));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let records: Vec<CaseRecord> = pool.install(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, c)| evaluate_case(i, c, cfg))
            .collect()
    });
    let reports = aggregate(&records, cfg);
    Ok(BenchmarkOutput {
        reports,
        cases: records,
    })
}

/// CSV with columns method, variant, k, accuracy, sufficiency,
/// mean_inferences, mean_seconds; one row per report and k. Floats are
/// written in shortest round-trip form.
pub fn reports_to_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("method,variant,k,accuracy,sufficiency,mean_inferences,mean_seconds\n");
    for r in reports {
        for m in &r.per_k {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.variant, m.k, m.accuracy, m.sufficiency, m.mean_inferences, r.mean_seconds
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_segment_map() -> SegmentationMap {
        let labels = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
        SegmentationMap::from_labels(4, 4, labels).unwrap()
    }

    #[test]
    fn segment_means_by_hand() {
        let seg = two_segment_map();
        let values = (0..16)
            .map(|i| if i % 4 < 2 { [0.1, 0.3][i % 2] } else { [0.7, 0.9][i % 2] })
            .collect();
        let s = segment_scores(&Field::new(4, 4, values).unwrap(), &seg).unwrap();
        assert!((s.per_segment[0] - 0.2).abs() < 1e-12);
        assert!((s.per_segment[1] - 0.8).abs() < 1e-12);
        assert_eq!(s.ranking, vec![1, 0]);
    }

    #[test]
    fn ties_rank_by_id() {
        let seg = two_segment_map();
        let s = segment_scores(&Field::filled(4, 4, 0.5), &seg).unwrap();
        assert_eq!(s.ranking, vec![0, 1]);
    }

    #[test]
    fn metric_examples() {
        let f = (Label::Fake, Label::Fake);
        let r = (Label::Fake, Label::Real);
        let mut v = vec![f; 7];
        v.extend([r; 3]);
        assert!((accuracy_at_k(&v).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(accuracy_at_k(&[r, r]).unwrap(), 0.0);
        assert!(accuracy_at_k(&[]).is_err());
        assert!((sufficiency_at_k(&[(0.9, 0.4), (0.8, 0.8)]).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(sufficiency_at_k(&[(1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(sufficiency_at_k(&[(0.3, 0.5)]).unwrap(), 0.0);
        assert!((sufficiency_unclamped(&[(0.3, 0.5)]).unwrap() + 0.2).abs() < 1e-12);
        assert!(sufficiency_at_k(&[]).is_err());
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let seg = two_segment_map();
        let s = segment_scores(&Field::filled(4, 4, 0.0), &seg).unwrap();
        assert!(topk_region(&s, &seg, 0).is_err());
        assert!(topk_region(&s, &seg, 3).is_err());
        assert!(topk_region(&s, &seg, 2).unwrap().is_global());
    }
}
