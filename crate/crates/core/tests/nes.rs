use advmask::detectors::{ConstantDetector, LinearLogisticDetector};
use advmask::nes::{generate_adversarial, AttackRegion, ClipMode, NesParams};
use advmask::oracle::Oracle;
use advmask::rng::RngStream;
use advmask::tensor::{ImageTensor, Shape};
use proptest::prelude::*;

const DELTA: f64 = 16.0 / 255.0;

fn small_params(n: usize, iters: usize) -> NesParams {
    NesParams {
        n_samples: n,
        max_iters: iters,
        batch_size: 7,
        ..NesParams::explanation()
    }
}

fn image(shape: Shape, values: &[f32]) -> ImageTensor {
    ImageTensor::new(shape, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn attacks_respect_ball_range_locality_and_budget(
        c in prop_oneof![Just(1usize), Just(3)],
        h in 2usize..8,
        w in 2usize..8,
        seed in any::<u64>(),
        bias in -40.0f64..0.0,
        values in proptest::collection::vec(0.0f32..=1.0, 3 * 8 * 8),
        keep in proptest::collection::vec(any::<bool>(), 8 * 8),
    ) {
        let shape = Shape::new(c, h, w);
        let x = image(shape, &values[..shape.len()]);
        let det = LinearLogisticDetector::random(shape, 5.0, bias, &RngStream::new(seed, 1)).unwrap();
        let oracle = Oracle::new(&det);
        let mut mask: Vec<bool> = keep[..h * w].to_vec();
        mask[0] = true;
        let region = AttackRegion::from_mask(h, w, mask).unwrap();
        let params = small_params(3, 6);
        let res = generate_adversarial(&x, &oracle, &params, &region, &RngStream::new(seed, 2)).unwrap();
        let adv = &res.adversarial_image;
        let plane = h * w;
        for (i, (&a, &b)) in x.data().iter().zip(adv.data()).enumerate() {
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!((b as f64 - a as f64).abs() <= DELTA + 1e-9);
            if !region.contains(i % plane) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        prop_assert_eq!(res.forward_passes, params.attack_passes(res.iterations_used));
        prop_assert_eq!(res.forward_passes, oracle.snapshot().forward_passes);
        prop_assert_eq!(res.forward_passes, res.probe_passes + res.check_passes);
        prop_assert_eq!(res.trace.len(), res.iterations_used + 1);
        prop_assert!(res.linf_distortion <= DELTA + 1e-9);
    }

    #[test]
    fn step_only_clip_keeps_pixels_in_range(seed in any::<u64>()) {
        let shape = Shape::new(1, 4, 4);
        let x = ImageTensor::filled(shape, 0.98).unwrap();
        let det = LinearLogisticDetector::random(shape, 1.0, -1e6, &RngStream::new(seed, 1)).unwrap();
        let params = NesParams { clip: ClipMode::StepOnly, ..small_params(2, 30) };
        let res = generate_adversarial(&x, &Oracle::new(&det), &params, &AttackRegion::global(4, 4), &RngStream::new(seed, 3)).unwrap();
        prop_assert!(res.adversarial_image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(!res.success);
    }
}

#[test]
fn step_only_clip_can_leave_the_ball() {
    let shape = Shape::new(1, 4, 4);
    let x = ImageTensor::filled(shape, 0.5).unwrap();
    // Logit -5 at x: the gradient is informative but no move flips it.
    let det = LinearLogisticDetector::new(shape, vec![1.0; 16], -13.0).unwrap();
    let params = NesParams {
        clip: ClipMode::StepOnly,
        ..small_params(4, 40)
    };
    let res = generate_adversarial(&x, &Oracle::new(&det), &params, &AttackRegion::global(4, 4), &RngStream::new(1, 1)).unwrap();
    assert!(res.linf_distortion > DELTA);
    let cumulative = generate_adversarial(
        &x,
        &Oracle::new(&det),
        &small_params(4, 40),
        &AttackRegion::global(4, 4),
        &RngStream::new(1, 1),
    )
    .unwrap();
    assert!(cumulative.linf_distortion <= DELTA + 1e-9);
}

#[test]
fn constant_fake_detector_reports_failure_within_bound() {
    let shape = Shape::new(3, 6, 6);
    let x = ImageTensor::filled(shape, 0.5).unwrap();
    let det = ConstantDetector::new(0.0);
    let params = small_params(4, 12);
    let res = generate_adversarial(&x, &Oracle::new(&det), &params, &AttackRegion::global(6, 6), &RngStream::new(0, 0)).unwrap();
    assert!(!res.success);
    assert_eq!(res.iterations_used, 12);
    assert_eq!(res.forward_passes, 2 * 4 * 12 + 12 + 1);
    assert!(res.linf_distortion <= DELTA);
}

#[test]
fn attack_is_reproducible_from_the_stream() {
    let shape = Shape::new(3, 8, 8);
    let x = ImageTensor::filled(shape, 0.4).unwrap();
    let det = LinearLogisticDetector::random(shape, 1.0, -3.0, &RngStream::new(5, 5)).unwrap();
    let run = |s: u64| {
        generate_adversarial(&x, &Oracle::new(&det), &small_params(5, 10), &AttackRegion::global(8, 8), &RngStream::new(s, 0))
            .unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a.adversarial_image, b.adversarial_image);
    assert_eq!(a.trace, b.trace);
    assert_ne!(a.adversarial_image, c.adversarial_image);
}

#[test]
fn nested_regions_share_probe_noise() {
    // A detector that only reads pixel 0: attacks restricted to {0} and to
    // {0, 1, 2} see the same noise on pixel 0, so they move it identically.
    let shape = Shape::new(1, 3, 3);
    let mut w = vec![0.0; 9];
    w[0] = 50.0;
    let det = LinearLogisticDetector::new(shape, w, -40.0).unwrap();
    let x = ImageTensor::filled(shape, 0.5).unwrap();
    let params = small_params(6, 5);
    let small = AttackRegion::from_pixels(3, 3, [0]).unwrap();
    let large = AttackRegion::from_pixels(3, 3, [0, 1, 2]).unwrap();
    let rng = RngStream::new(8, 8);
    let a = generate_adversarial(&x, &Oracle::new(&det), &params, &small, &rng).unwrap();
    let b = generate_adversarial(&x, &Oracle::new(&det), &params, &large, &rng).unwrap();
    assert_eq!(a.adversarial_image.data()[0], b.adversarial_image.data()[0]);
    assert_eq!(a.trace, b.trace);
}
