//! The `explain`, `attack`, `benchmark` and `serve-stub` subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use advmask::detectors::wire;
use advmask::evaluation::{reports_to_csv, run_benchmark, BenchmarkCase, BenchmarkOutput};
use advmask::explainers::{explain, make_adversarial_variant, Budget, Method, SaliencyMap, Variant};
use advmask::io::{read_png, write_f32_grid, write_json, write_overlay, write_png};
use advmask::nes::{generate_adversarial, AdversarialResult, AttackRegion};
use advmask::oracle::{Detector, Label, Oracle};
use advmask::rng::{tags, RngStream};
use advmask::segmentation::{slic_segment, SegmentationMap};
use advmask::tensor::ImageTensor;
use advmask::{Error, Result};

use crate::config::{build_detector, per_case_detector, DatasetSpec, DetectorSpec, RunConfig};

/// An image to explain or attack: a PNG file, or a case of the suite.
struct Input {
    image: ImageTensor,
    source: Option<PathBuf>,
    segmentation: Option<SegmentationMap>,
    case: usize,
}

fn load_input(cfg: &RunConfig, path: Option<&Path>, case: Option<usize>) -> Result<Input> {
    match path {
        Some(p) => Ok(Input {
            image: read_png(p)?,
            source: Some(p.to_path_buf()),
            segmentation: None,
            case: case.unwrap_or(0),
        }),
        None => {
            let index = case.unwrap_or(0);
            let c = cfg.suite_case(index)?;
            Ok(Input {
                image: c.image,
                source: None,
                segmentation: Some(c.segmentation),
                case: index,
            })
        }
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write(&cfg.out)?;
    Ok(cfg.out.clone())
}

fn zero_times(b: &mut Budget) {
    b.detector_seconds = 0.0;
    b.wall_seconds = 0.0;
}

fn write_map(dir: &Path, stem: &str, overlay: &str, image: &ImageTensor, map: &SaliencyMap) -> Result<()> {
    write_f32_grid(&dir.join(format!("{stem}.bin")), &map.scores.values)?;
    write_json(&dir.join(format!("{stem}.json")), map)?;
    write_overlay(&dir.join(overlay), image, &map.normalized())
}

pub fn cmd_explain(
    cfg: &RunConfig,
    image: Option<&Path>,
    case: Option<usize>,
    method: Method,
    variant: Variant,
) -> Result<()> {
    let input = load_input(cfg, image, case)?;
    let detector = build_detector(cfg, Some(&input.image), input.case)?;
    let oracle = Oracle::with_threshold(detector.as_ref(), cfg.threshold);
    let (p_real, label) = oracle.classify(&input.image)?;
    if label == Label::Real {
        return Err(Error::NotFake { p_real });
    }
    let seg = match input.segmentation {
        Some(s) => s,
        None => slic_segment(&input.image, &cfg.explainers.slic)?,
    };
    let rng = RngStream::new(cfg.seed, 0).split(input.case as u64);
    let mut map = match variant {
        Variant::Classic => explain(
            method,
            &input.image,
            &oracle,
            &seg,
            &cfg.explainers.classic_strategy(method),
            &cfg.explainers,
            &rng,
        )?,
        Variant::AdversarialMasking => make_adversarial_variant(
            method,
            &input.image,
            &oracle,
            &seg,
            &cfg.nes,
            &cfg.explainers,
            &rng,
        )?,
    };
    if !cfg.report.timing {
        zero_times(&mut map.budget);
    }
    let out = prepare_out(cfg)?;
    write_map(&out, "saliency", "overlay.png", &input.image, &map)?;
    println!(
        "{method}/{variant}: p_real {p_real:.4}, {} forward passes, wrote {}",
        map.budget.forward_passes,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AttackReport<'a> {
    detector: &'a str,
    max_distortion: f64,
    #[serde(flatten)]
    result: &'a AdversarialResult,
}

pub fn cmd_attack(cfg: &RunConfig, image: Option<&Path>, case: Option<usize>) -> Result<()> {
    let input = load_input(cfg, image, case)?;
    let detector = build_detector(cfg, Some(&input.image), input.case)?;
    let oracle = Oracle::with_threshold(detector.as_ref(), cfg.threshold);
    let region = AttackRegion::global(input.image.height(), input.image.width());
    let rng = RngStream::new(cfg.seed, 0)
        .split(input.case as u64)
        .split(tags::EXPLAIN_ATTACK);
    let res = generate_adversarial(&input.image, &oracle, &cfg.nes, &region, &rng)?;
    let out = prepare_out(cfg)?;
    let png = out.join("adversarial.png");
    match &input.source {
        Some(src) if res.adversarial_image == input.image => {
            std::fs::copy(src, &png)?;
        }
        _ => write_png(&png, &res.adversarial_image)?,
    }
    std::fs::write(out.join("adversarial.bin"), res.adversarial_image.to_le_bytes())?;
    write_json(
        &out.join("trace.json"),
        &AttackReport {
            detector: detector.name(),
            max_distortion: cfg.nes.max_distortion,
            result: &res,
        },
    )?;
    println!(
        "success {} after {} iterations: p_real {:.4} -> {:.4}, max |delta| {:.5}",
        res.success, res.iterations_used, res.initial_p_real, res.final_p_real, res.linf_distortion
    );
    Ok(())
}

fn dataset_cases(cfg: &RunConfig, dir_override: Option<&Path>) -> Result<Vec<BenchmarkCase>> {
    let shared = if per_case_detector(&cfg.detector) {
        None
    } else {
        Some(build_detector(cfg, None, 0)?)
    };
    let detector_for = |image: &ImageTensor, case: usize| -> Result<Arc<dyn Detector>> {
        match &shared {
            Some(d) => Ok(d.clone()),
            None => build_detector(cfg, Some(image), case),
        }
    };
    let dir = match (dir_override, &cfg.dataset) {
        (Some(d), _) => Some(d.to_path_buf()),
        (None, DatasetSpec::Dir { path }) => Some(path.clone()),
        (None, DatasetSpec::Suite(_)) => None,
    };
    let mut cases = Vec::new();
    match dir {
        None => {
            let DatasetSpec::Suite(params) = &cfg.dataset else {
                unreachable!("directory datasets are handled above")
            };
            for i in 0..params.n {
                let c = cfg.suite_case(i)?;
                let detector = match cfg.detector {
                    DetectorSpec::Suite => Arc::new(c.detector) as Arc<dyn Detector>,
                    _ => detector_for(&c.image, i)?,
                };
                cases.push(BenchmarkCase {
                    name: format!("case-{i:03}"),
                    image: c.image,
                    detector,
                    segmentation: Some(c.segmentation),
                });
            }
        }
        Some(dir) => {
            if matches!(cfg.detector, DetectorSpec::Suite) {
                return Err(Error::config("the suite detector cannot score a directory of images"));
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .is_some_and(|x| x.eq_ignore_ascii_case("png"))
                })
                .collect();
            paths.sort();
            for p in paths {
                let image = match read_png(&p) {
                    Ok(img) => img,
                    Err(e) => {
                        log::warn!("skipping {}: {e}", p.display());
                        continue;
                    }
                };
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let detector = detector_for(&image, cases.len())?;
                cases.push(BenchmarkCase {
                    name,
                    image,
                    detector,
                    segmentation: None,
                });
            }
            if cases.is_empty() {
                return Err(Error::Image(format!("no usable images in {}", dir.display())));
            }
        }
    }
    Ok(cases)
}

pub fn cmd_benchmark(cfg: &RunConfig, dir: Option<&Path>) -> Result<()> {
    let cases = dataset_cases(cfg, dir)?;
    let output = run_benchmark(&cases, &cfg.benchmark())?;
    let out = prepare_out(cfg)?;
    write_json(&out.join("report.json"), &output)?;
    std::fs::write(out.join("report.csv"), reports_to_csv(&output.reports))?;
    if cfg.report.save_maps {
        save_maps(&out, &cases, &output)?;
    }
    print_summary(&output);
    Ok(())
}

fn save_maps(out: &Path, cases: &[BenchmarkCase], output: &BenchmarkOutput) -> Result<()> {
    let root = out.join("maps");
    let mut used: HashMap<String, usize> = HashMap::new();
    for (case, rec) in cases.iter().zip(&output.cases) {
        let n = used.entry(case.name.clone()).or_default();
        let dir_name = if *n == 0 {
            case.name.clone()
        } else {
            format!("{}-{n}", case.name)
        };
        *n += 1;
        let dir = root.join(dir_name);
        for run in &rec.runs {
            if let Some(map) = &run.map {
                std::fs::create_dir_all(&dir)?;
                let stem = format!("{}-{}", run.method, run.variant);
                write_map(&dir, &stem, &format!("{stem}.png"), &case.image, map)?;
            }
        }
    }
    Ok(())
}

fn print_summary(output: &BenchmarkOutput) {
    println!("method  variant  k  accuracy  sufficiency  inferences  seconds");
    for r in &output.reports {
        for k in &r.per_k {
            println!(
                "{:<7} {:<8} {:>2}  {:>8.3}  {:>11.4}  {:>10.0}  {:>7.3}",
                r.method.to_string(),
                r.variant.to_string(),
                k.k,
                k.accuracy,
                k.sufficiency,
                k.mean_inferences,
                r.mean_seconds
            );
        }
    }
    if let Some(r) = output.reports.first() {
        println!(
            "{} images: {} evaluated, {} skipped (not fake), {} failed",
            r.images_total, r.images_evaluated, r.images_skipped, r.images_failed
        );
    }
}

pub fn cmd_serve_stub(cfg: &RunConfig, case: Option<usize>) -> Result<()> {
    if matches!(cfg.detector, DetectorSpec::External { .. }) {
        return Err(Error::config("serve-stub cannot serve an external detector"));
    }
    let detector = build_detector(cfg, None, case.unwrap_or(0))?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let stats = wire::serve(detector.as_ref(), stdin.lock(), stdout.lock())?;
    log::info!("served {} requests, {} errors", stats.requests, stats.errors);
    Ok(())
}
