use advmask::detectors::{ConstantDetector, PatchRegion, PlantedPatchDetector};
use advmask::explainers::{
    explain_kernel_shap, explain_lime, explain_rise, explain_sobol, kernel_shap, make_adversarial_variant,
    sobol_experiment, ExplainerConfig, LimeConfig, Method, RiseConfig, SobolConfig,
};
use advmask::nes::NesParams;
use advmask::oracle::{Detector, Oracle};
use advmask::perturbation::{rise_random_mask, ReplacementStrategy, SobolDesign};
use advmask::rng::RngStream;
use advmask::segmentation::SegmentationMap;
use advmask::synthetic::{planted_case, SuiteParams};
use advmask::segmentation::SlicParams;
use advmask::tensor::{ImageTensor, Shape};
use advmask::{Error, Result};

fn textured(shape: Shape, seed: u64) -> ImageTensor {
    let mut r = RngStream::new(seed, 77);
    ImageTensor::new(shape, (0..shape.len()).map(|_| (0.2 + 0.6 * r.uniform()) as f32).collect()).unwrap()
}

/// `n` vertical strips of (nearly) equal width.
fn strips(h: usize, w: usize, n: usize) -> SegmentationMap {
    SegmentationMap::from_labels(h, w, (0..h * w).map(|p| (p % w) * n / w).collect()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

/// Fake probability `base + sum_k c_k z_k`, where `z_k` says whether
/// segment `k` still holds the original pixels.
struct SegmentLinear {
    original: ImageTensor,
    probe: Vec<usize>,
    coef: Vec<f64>,
    base: f64,
}

impl SegmentLinear {
    fn new(original: ImageTensor, seg: &SegmentationMap, coef: Vec<f64>, base: f64) -> Self {
        let probe = (0..seg.n_segments())
            .map(|s| seg.labels().iter().position(|&l| l == s).unwrap())
            .collect();
        Self {
            original,
            probe,
            coef,
            base,
        }
    }
}

impl Detector for SegmentLinear {
    fn name(&self) -> &str {
        "segment-linear"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        Ok(batch
            .iter()
            .map(|img| {
                let fake: f64 = self.base
                    + self
                        .probe
                        .iter()
                        .zip(&self.coef)
                        .filter(|(&p, _)| img.data()[p] == self.original.data()[p])
                        .map(|(_, c)| c)
                        .sum::<f64>();
                1.0 - fake
            })
            .collect())
    }
}

fn lime_cfg(n: usize) -> ExplainerConfig {
    ExplainerConfig {
        lime: LimeConfig {
            n_perturbations: n,
            ..LimeConfig::default()
        },
        ..ExplainerConfig::default()
    }
}

#[test]
fn lime_recovers_a_model_linear_in_the_coalition() {
    let shape = Shape::new(3, 20, 30);
    let img = textured(shape, 1);
    let seg = strips(20, 30, 10);
    let coef = vec![0.12, 0.0, 0.05, 0.2, 0.01, 0.08, 0.0, 0.03, 0.1, 0.06];
    let det = SegmentLinear::new(img.clone(), &seg, coef.clone(), 0.1);
    let oracle = Oracle::new(&det);
    for seed in 0..5 {
        let map = explain_lime(
            &img,
            &oracle,
            &seg,
            &ReplacementStrategy::ConstantValue(0.0),
            &lime_cfg(2000),
            &RngStream::new(seed, 0),
        )
        .unwrap();
        let c = cosine(&map.attributions, &coef);
        assert!(c >= 0.99, "seed {seed}: cosine {c}");
    }
}

#[test]
fn lime_on_a_constant_detector_gives_zero_coefficients() {
    let img = textured(Shape::new(3, 16, 16), 2);
    let seg = strips(16, 16, 8);
    let det = ConstantDetector::new(0.2);
    let map = explain_lime(
        &img,
        &Oracle::new(&det),
        &seg,
        &ReplacementStrategy::MeanPixel,
        &lime_cfg(500),
        &RngStream::new(0, 0),
    )
    .unwrap();
    assert!(map.attributions.iter().all(|c| c.abs() < 1e-6));
}

#[test]
fn lime_finds_the_segment_a_planted_detector_reads() {
    let (h, w, n) = (16, 20, 10);
    let seg = strips(h, w, n);
    let mut hits = 0;
    for seed in 0..100u64 {
        let img = textured(Shape::new(3, h, w), 100 + seed);
        let k = (seed as usize) % n;
        let pixels: Vec<usize> = (0..h * w).filter(|&p| seg.labels()[p] == k).collect();
        let region = PatchRegion::Pixels { indices: pixels };
        let exact = PlantedPatchDetector::from_image(&img, region.clone(), 25.0, 0.1).unwrap();
        let reference = exact.reference().iter().map(|v| v + 0.07).collect();
        let det = PlantedPatchDetector::new(img.shape(), region, reference, 25.0, 0.1).unwrap();
        let map = explain_lime(
            &img,
            &Oracle::new(&det),
            &seg,
            &ReplacementStrategy::MeanPixel,
            &lime_cfg(2000),
            &RngStream::new(seed, 5),
        )
        .unwrap();
        hits += (argmax(&map.attributions) == k) as usize;
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn shap_dummy_player_gets_nothing() {
    let est = kernel_shap(2, 2000, &mut RngStream::new(0, 0), |zs| {
        Ok(zs.iter().map(|z| 0.3 + if z[0] { 0.5 } else { 0.0 }).collect())
    })
    .unwrap();
    assert!((est.phi[0] - 0.5).abs() < 1e-9);
    assert!(est.phi[1].abs() < 1e-9);
    assert!((est.full_value - est.baseline_value - 0.5).abs() < 1e-12);
}

#[test]
fn shap_dummy_segment_through_the_image_pipeline() {
    let img = textured(Shape::new(3, 10, 10), 3);
    let seg = strips(10, 10, 2);
    let det = SegmentLinear::new(img.clone(), &seg, vec![0.4, 0.0], 0.2);
    let oracle = Oracle::new(&det);
    let map = explain_kernel_shap(
        &img,
        &oracle,
        &seg,
        &ReplacementStrategy::ConstantValue(0.0),
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap();
    // phi_1 = F(x) - F(baseline) in fake-probability units.
    assert!((map.attributions[0] - 0.4).abs() < 1e-9);
    assert!(map.attributions[1].abs() < 1e-9);
}

#[test]
fn shap_symmetric_players_get_equal_shares() {
    let m = 12;
    for seed in 0..5 {
        let est = kernel_shap(m, 2000, &mut RngStream::new(seed, 9), |zs| {
            Ok(zs
                .iter()
                .map(|z| {
                    let b = |i: usize| z[i] as u8 as f64;
                    let pair = b(3) + b(4);
                    0.1 + 0.2 * b(0) + 0.15 * pair * pair / 4.0 + 0.1 * b(0) * b(5) + 0.3 * b(3) * b(4) * b(7)
                        + 0.02 * (6..m).map(b).sum::<f64>()
                })
                .collect())
        })
        .unwrap();
        assert!((est.phi[3] - est.phi[4]).abs() <= 0.02, "seed {seed}: {:?}", est.phi);
        let total: f64 = est.phi.iter().sum();
        assert!((total - (est.full_value - est.baseline_value)).abs() < 1e-9);
    }
}

#[test]
fn sobol_single_factor_function() {
    for seed in 0..5 {
        let design = SobolDesign::new(4, 64, &mut RngStream::new(seed, 1)).unwrap();
        let idx = sobol_experiment(&design, |rows| Ok(rows.iter().map(|r| r[0]).collect())).unwrap();
        assert!(idx.total[0] >= 0.9, "{}", idx.total[0]);
        assert!(idx.total[1..].iter().all(|&t| t.abs() <= 0.05));
    }
}

/// Fake probability equal to the mean of channel 0 over a block.
struct BlockMean {
    h: std::ops::Range<usize>,
    w: std::ops::Range<usize>,
}

impl Detector for BlockMean {
    fn name(&self) -> &str {
        "block-mean"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        Ok(batch
            .iter()
            .map(|img| {
                let mut s = 0.0;
                for y in self.h.clone() {
                    for x in self.w.clone() {
                        s += img.get(0, y, x) as f64;
                    }
                }
                1.0 - s / (self.h.len() * self.w.len()) as f64
            })
            .collect())
    }
}

#[test]
fn sobol_explainer_points_at_the_cell_the_detector_reads() {
    let img = ImageTensor::filled(Shape::new(1, 32, 32), 1.0).unwrap();
    let det = BlockMean { h: 0..4, w: 0..4 };
    let cfg = ExplainerConfig {
        sobol: SobolConfig {
            grid: 4,
            n_designs: 64,
            ..SobolConfig::default()
        },
        ..ExplainerConfig::default()
    };
    let map = explain_sobol(
        &img,
        &Oracle::new(&det),
        &ReplacementStrategy::ConstantValue(0.0),
        &cfg,
        &RngStream::new(2, 2),
    )
    .unwrap();
    assert_eq!(map.attributions.len(), 16);
    assert!(map.attributions[0] >= 0.9, "{:?}", map.attributions);
    assert!(map.attributions[1..].iter().all(|&t| t <= 0.05));
}

#[test]
fn sobol_constant_detector_has_zero_indices() {
    let img = textured(Shape::new(3, 16, 16), 4);
    let det = ConstantDetector::new(0.1);
    let map = explain_sobol(
        &img,
        &Oracle::new(&det),
        &ReplacementStrategy::blur(5),
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap();
    assert!(map.attributions.iter().all(|&t| t == 0.0));
    assert!(map.diagnostics.zero_variance);
}

#[test]
fn rise_constant_detector_gives_flat_saliency() {
    let img = textured(Shape::new(3, 32, 32), 5);
    let det = ConstantDetector::new(0.3);
    let map = explain_rise(
        &img,
        &Oracle::new(&det),
        &ReplacementStrategy::OccludeBlack,
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap();
    for v in &map.scores.values {
        assert!((v - 0.7).abs() <= 0.05, "{v}");
    }
}

#[test]
fn rise_concentrates_on_a_planted_patch() {
    let img = textured(Shape::new(3, 64, 64), 6);
    let region = PatchRegion::Rect {
        top: 20,
        left: 30,
        height: 21,
        width: 20,
    };
    let exact = PlantedPatchDetector::from_image(&img, region.clone(), 25.0, 0.1).unwrap();
    let reference = exact.reference().iter().map(|v| v + 0.07).collect();
    let det = PlantedPatchDetector::new(img.shape(), region, reference, 25.0, 0.1).unwrap();
    let map = explain_rise(
        &img,
        &Oracle::new(&det),
        &ReplacementStrategy::OccludeBlack,
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap();
    let inside = det.pixels();
    let mut is_in = vec![false; 64 * 64];
    inside.iter().for_each(|&p| is_in[p] = true);
    let mean = |want: bool| {
        let vals: Vec<f64> = (0..64 * 64).filter(|&p| is_in[p] == want).map(|p| map.scores.values[p]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let (i, o) = (mean(true), mean(false));
    assert!(i >= 1.5 * o, "inside {i}, outside {o}");
}

#[test]
fn rise_with_one_mask_is_that_mask_times_the_score() {
    let img = textured(Shape::new(3, 20, 20), 7);
    let det = ConstantDetector::new(0.25);
    let cfg = ExplainerConfig {
        rise: RiseConfig {
            n_masks: 1,
            ..RiseConfig::default()
        },
        ..ExplainerConfig::default()
    };
    let rng = RngStream::new(3, 3);
    let map = explain_rise(&img, &Oracle::new(&det), &ReplacementStrategy::OccludeBlack, &cfg, &rng).unwrap();
    let mask = rise_random_mask(&mut rng.split(0), 7, 0.5, 20, 20).unwrap();
    for (s, m) in map.scores.values.iter().zip(&mask.keep.values) {
        assert!((s - 0.75 * m / 0.5).abs() < 1e-12);
    }
}

fn suite_case() -> advmask::synthetic::PlantedCase {
    planted_case(&SuiteParams::default(), &SlicParams::default(), 0).unwrap()
}

#[test]
fn adversarial_lime_budget_is_attack_plus_perturbations() {
    let case = suite_case();
    let oracle = Oracle::new(&case.detector);
    let before = oracle.snapshot();
    let nes = NesParams::explanation();
    let map = make_adversarial_variant(
        Method::Lime,
        &case.image,
        &oracle,
        &case.segmentation,
        &nes,
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap();
    let used = oracle.snapshot().since(&before).forward_passes;
    let iterations = map.budget.attack_iterations.unwrap();
    assert_eq!(map.budget.attack_passes, nes.attack_passes(iterations));
    assert_eq!(map.budget.explainer_passes, 2000);
    assert_eq!(map.budget.forward_passes, map.budget.attack_passes + 2000);
    assert_eq!(used, map.budget.forward_passes);
}

#[test]
fn adversarial_variant_rejects_inputs_already_real() {
    let case = suite_case();
    let det = ConstantDetector::new(0.9);
    let err = make_adversarial_variant(
        Method::Rise,
        &case.image,
        &Oracle::new(&det),
        &case.segmentation,
        &NesParams::explanation(),
        &ExplainerConfig::default(),
        &RngStream::new(0, 0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NotFake { .. }));
}

#[test]
fn explainers_are_deterministic_per_stream() {
    let case = suite_case();
    let oracle = Oracle::new(&case.detector);
    let cfg = ExplainerConfig::default();
    for method in Method::ALL {
        let run = || {
            advmask::explainers::explain(
                method,
                &case.image,
                &oracle,
                &case.segmentation,
                &cfg.classic_strategy(method),
                &cfg,
                &RngStream::new(11, 0),
            )
            .unwrap()
            .scores
        };
        assert_eq!(run(), run(), "{method}");
    }
}
