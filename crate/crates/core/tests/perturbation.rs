use advmask::perturbation::{
    blend, grid_mask, l2_star_discrepancy, replacement_field, rise_random_mask, segment_subset_mask,
    star_discrepancy_estimate, ReplacementStrategy, SobolDesign,
};
use advmask::rng::RngStream;
use advmask::segmentation::SegmentationMap;
use advmask::tensor::{ImageTensor, Shape};
use proptest::prelude::*;

fn uniform_points(n: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect()
}

#[test]
fn sobol_design_beats_uniform_sampling_on_discrepancy() {
    let trials = 40;
    let mut wins_l2 = 0;
    let mut wins_star = 0;
    for t in 0..trials {
        let design = SobolDesign::new(2, 256, &mut RngStream::new(t, 1)).unwrap();
        let mut r = RngStream::new(t, 2);
        let uniform = uniform_points(256, 4, &mut r);
        wins_l2 += (l2_star_discrepancy(&design.a) < l2_star_discrepancy(&uniform)) as usize;
        let qmc = star_discrepancy_estimate(&design.a, 3000, &mut RngStream::new(t, 3));
        let mc = star_discrepancy_estimate(&uniform, 3000, &mut RngStream::new(t, 3));
        wins_star += (qmc < mc) as usize;
    }
    assert!(wins_l2 * 10 >= trials as usize * 9, "L2-star wins {wins_l2}/{trials}");
    assert!(wins_star * 10 >= trials as usize * 9, "star wins {wins_star}/{trials}");
}

#[test]
fn warnock_matches_brute_force_integral_in_one_dimension() {
    // D2*^2 = integral over t of (#{x < t}/n - t)^2, done by midpoint rule.
    let pts = vec![vec![0.1], vec![0.45], vec![0.8]];
    let steps = 200_000;
    let integral: f64 = (0..steps)
        .map(|i| {
            let t = (i as f64 + 0.5) / steps as f64;
            let frac = pts.iter().filter(|p| p[0] < t).count() as f64 / 3.0;
            (frac - t).powi(2)
        })
        .sum::<f64>()
        / steps as f64;
    assert!((l2_star_discrepancy(&pts) - integral.sqrt()).abs() < 1e-5);
}

#[test]
fn segment_masks_follow_the_partition() {
    let seg = SegmentationMap::from_labels(2, 3, vec![0, 0, 1, 2, 2, 1]).unwrap();
    assert_eq!(segment_subset_mask(&seg, &[0, 1, 2]).unwrap().keep.values, vec![1.0; 6]);
    assert_eq!(segment_subset_mask(&seg, &[]).unwrap().keep.values, vec![0.0; 6]);
    assert_eq!(
        segment_subset_mask(&seg, &[0, 2]).unwrap().keep.values,
        vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]
    );
    assert!(segment_subset_mask(&seg, &[3]).is_err());
}

#[test]
fn rise_masks_average_to_keep_probability() {
    // One pixel from each of 10,000 independent masks.
    let mut rng = RngStream::new(4, 4);
    let total: f64 = (0..10_000)
        .map(|_| rise_random_mask(&mut rng, 7, 0.5, 16, 16).unwrap().keep.values[5 * 16 + 5])
        .sum();
    assert!((total / 10_000.0 - 0.5).abs() < 0.02);
}

fn image_strategy(shape: Shape) -> impl Strategy<Value = ImageTensor> {
    proptest::collection::vec(0.0f32..=1.0, shape.len()).prop_map(move |d| ImageTensor::new(shape, d).unwrap())
}

fn strategies(other: &ImageTensor) -> Vec<ReplacementStrategy> {
    vec![
        ReplacementStrategy::OccludeBlack,
        ReplacementStrategy::ConstantValue(0.25),
        ReplacementStrategy::MeanPixel,
        ReplacementStrategy::blur(5),
        ReplacementStrategy::GaussianNoise { std: 0.1, seed: 3 },
        ReplacementStrategy::AdversarialReplace(other.clone()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blend_is_exact_at_the_ends_and_bounded_between(
        img in image_strategy(Shape::new(3, 6, 5)),
        other in image_strategy(Shape::new(3, 6, 5)),
        keep in proptest::collection::vec(0.0f64..=1.0, 30),
    ) {
        for s in strategies(&other) {
            let r = replacement_field(&img, &s).unwrap();
            prop_assert_eq!(&blend(&img, &[1.0; 30], &r), &img);
            prop_assert_eq!(&blend(&img, &[0.0; 30], &r), &r);
            let out = blend(&img, &keep, &r);
            for (i, &v) in out.data().iter().enumerate() {
                let (a, b) = (img.data()[i], r.data()[i]);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v >= a.min(b) - 1e-6 && v <= a.max(b) + 1e-6);
            }
        }
    }

    #[test]
    fn grid_masks_stay_in_unit_range(values in proptest::collection::vec(0.0f64..=1.0, 16), h in 1usize..40, w in 1usize..40) {
        let m = grid_mask(&values, 4, h, w).unwrap();
        prop_assert_eq!(m.keep.values.len(), h * w);
        prop_assert!(m.keep.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sobol_design_points_are_in_the_open_cube(seed in any::<u64>(), g in 1usize..4, n in 2usize..40) {
        let d = SobolDesign::new(g, n, &mut RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(d.evaluations(), n * (g * g + 2));
        for row in d.a.iter().chain(&d.b) {
            prop_assert_eq!(row.len(), g * g);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for i in 0..g * g {
            let ab = d.ab(i, n - 1);
            for j in 0..g * g {
                let want = if j == i { d.b[n - 1][j] } else { d.a[n - 1][j] };
                prop_assert_eq!(ab[j], want);
            }
        }
    }
}
