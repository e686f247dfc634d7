//! Run configuration: one TOML document mirrored by the command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use advmask::detectors::{
    ConstantDetector, ExternalDetector, LinearLogisticDetector, MeanIntensityDetector, PatchRegion,
    PlantedPatchDetector, DEFAULT_SENSITIVITY, DEFAULT_THRESHOLD_OFFSET,
};
use advmask::evaluation::BenchmarkConfig;
use advmask::explainers::{ExplainerConfig, Method, Variant};
use advmask::nes::NesParams;
use advmask::oracle::{Detector, DEFAULT_THRESHOLD};
use advmask::rng::RngStream;
use advmask::synthetic::{planted_case, PlantedCase, SuiteParams};
use advmask::tensor::ImageTensor;
use advmask::{Error, Result};

const LINEAR_STREAM: u64 = 0x4c49_4e45_4152;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub variants: Vec<Variant>,
    pub ks: Vec<usize>,
    pub jobs: usize,
    pub threshold: f64,
    pub out: PathBuf,
    pub detector: DetectorSpec,
    pub dataset: DatasetSpec,
    /// Attack that produces the adversarial replacement of an explanation.
    pub nes: NesParams,
    /// Localized attacks of the accuracy / sufficiency evaluation.
    pub eval_nes: NesParams,
    pub explainers: ExplainerConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            ks: vec![1, 2, 3],
            jobs: 1,
            threshold: DEFAULT_THRESHOLD,
            out: PathBuf::from("out"),
            detector: DetectorSpec::Suite,
            dataset: DatasetSpec::Suite(SuiteParams::default()),
            nes: NesParams::explanation(),
            eval_nes: NesParams::evaluation(),
            explainers: ExplainerConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Record wall-clock seconds. Off makes every output byte-reproducible.
    pub timing: bool,
    /// Write each saliency map and overlay of a benchmark under `maps/`.
    pub save_maps: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            timing: true,
            save_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DetectorSpec {
    Constant {
        p_real: f64,
    },
    /// Scores the mean pixel value.
    Mean,
    /// Gaussian weights. With `margin` set, the bias is chosen per image so
    /// that the logit is `-margin * delta * |w|_1`: fake, and flippable
    /// inside the distortion ball when `margin < 1`.
    Linear {
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        bias: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        margin: Option<f64>,
    },
    /// A rectangle whose reference is the image content shifted by `offset`.
    Planted {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        offset: f32,
        #[serde(default = "default_sensitivity")]
        sensitivity: f64,
        #[serde(default = "default_threshold_offset")]
        threshold_offset: f64,
    },
    /// The planted-patch detector of each synthetic suite case.
    Suite,
    /// A process speaking the line-delimited JSON protocol. `{case}` in any
    /// argument is replaced by the case index, which starts one process per
    /// case; otherwise one process serves every case.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "one_usize")]
        pool: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_timeout() -> u64 {
    ExternalDetector::DEFAULT_TIMEOUT.as_secs()
}

fn default_sensitivity() -> f64 {
    DEFAULT_SENSITIVITY
}

fn default_threshold_offset() -> f64 {
    DEFAULT_THRESHOLD_OFFSET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Every decodable PNG in `path`, in file-name order.
    Dir { path: PathBuf },
    Suite(SuiteParams),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark().validate()?;
        if let DatasetSpec::Suite(p) = &self.dataset {
            p.validate()?;
        }
        match &self.detector {
            DetectorSpec::External { command, pool, .. } if command.is_empty() || *pool == 0 => {
                Err(Error::config("external detector needs a command and pool >= 1"))
            }
            DetectorSpec::Constant { p_real } if !(0.0..=1.0).contains(p_real) => {
                Err(Error::config("constant p_real must be in [0, 1]"))
            }
            DetectorSpec::Suite if !matches!(self.dataset, DatasetSpec::Suite(_)) => Err(
                Error::config("the suite detector needs the synthetic suite dataset"),
            ),
            _ => Ok(()),
        }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            seed: self.seed,
            methods: self.methods.clone(),
            variants: self.variants.clone(),
            ks: self.ks.clone(),
            jobs: self.jobs,
            threshold: self.threshold,
            explain_attack: self.nes.clone(),
            eval_attack: self.eval_nes.clone(),
            explainers: self.explainers.clone(),
            timing: self.report.timing,
            keep_maps: self.report.save_maps,
        }
    }

    pub fn suite_case(&self, index: usize) -> Result<PlantedCase> {
        match &self.dataset {
            DatasetSpec::Suite(p) if index < p.n => planted_case(p, &self.explainers.slic, index),
            DatasetSpec::Suite(p) => Err(Error::config(format!(
                "case {index} is outside the {}-image suite",
                p.n
            ))),
            DatasetSpec::Dir { .. } => Err(Error::config("no synthetic suite is configured")),
        }
    }
}

/// Instantiate the configured detector for one case. `image` is the clean
/// input, needed by detectors defined relative to it.
pub fn build_detector(
    cfg: &RunConfig,
    image: Option<&ImageTensor>,
    case: usize,
) -> Result<Arc<dyn Detector>> {
    let needs_image = || image.ok_or_else(|| Error::config("this detector is defined relative to an input image"));
    Ok(match &cfg.detector {
        DetectorSpec::Constant { p_real } => Arc::new(ConstantDetector::new(*p_real)),
        DetectorSpec::Mean => Arc::new(MeanIntensityDetector),
        DetectorSpec::Linear {
            seed,
            scale,
            bias,
            margin,
        } => match margin {
            Some(m) => {
                let img = needs_image()?;
                let det = LinearLogisticDetector::random(img.shape(), *scale, 0.0, &RngStream::new(*seed, LINEAR_STREAM))?;
                let b = -m * cfg.nes.max_distortion * det.l1_norm() - det.logit(img);
                Arc::new(det.with_bias(b))
            }
            None => Arc::new(LazyLinear {
                seed: *seed,
                scale: *scale,
                bias: *bias,
                cache: std::sync::Mutex::new(None),
            }),
        },
        DetectorSpec::Planted {
            top,
            left,
            height,
            width,
            offset,
            sensitivity,
            threshold_offset,
        } => {
            let img = needs_image()?;
            let region = PatchRegion::Rect {
                top: *top,
                left: *left,
                height: *height,
                width: *width,
            };
            let det = PlantedPatchDetector::from_image(img, region.clone(), *sensitivity, *threshold_offset)?;
            let reference = det.reference().iter().map(|v| v + offset).collect();
            Arc::new(PlantedPatchDetector::new(img.shape(), region, reference, *sensitivity, *threshold_offset)?)
        }
        DetectorSpec::Suite => Arc::new(cfg.suite_case(case)?.detector),
        DetectorSpec::External {
            command,
            timeout_secs,
            pool,
        } => {
            let args: Vec<String> = command[1..]
                .iter()
                .map(|a| a.replace("{case}", &case.to_string()))
                .collect();
            Arc::new(ExternalDetector::spawn(&command[0], &args, *pool, Duration::from_secs(*timeout_secs))?)
        }
    })
}

/// External commands that mention `{case}` need one detector per case.
pub fn per_case_detector(spec: &DetectorSpec) -> bool {
    match spec {
        DetectorSpec::External { command, .. } => command.iter().any(|a| a.contains("{case}")),
        DetectorSpec::Linear { margin, .. } => margin.is_some(),
        DetectorSpec::Planted { .. } | DetectorSpec::Suite => true,
        DetectorSpec::Constant { .. } | DetectorSpec::Mean => false,
    }
}

/// Random-weight linear detector whose weights are drawn for the shape of
/// the first image it sees.
struct LazyLinear {
    seed: u64,
    scale: f64,
    bias: f64,
    cache: std::sync::Mutex<Option<LinearLogisticDetector>>,
}

impl Detector for LazyLinear {
    fn name(&self) -> &str {
        "linear-logistic"
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if cache.as_ref().is_none_or(|d| d.shape() != first.shape()) {
            *cache = Some(LinearLogisticDetector::random(
                first.shape(),
                self.scale,
                self.bias,
                &RngStream::new(self.seed, LINEAR_STREAM),
            )?);
        }
        cache.as_ref().expect("detector cached").score_batch(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[detector]\nkind = \"constant\"\np_real = 0.1\nq = 2").is_err());
        assert!(toml::from_str::<RunConfig>("[nes]\nsigmaa = 0.1").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 9\nmethods = [\"rise\"]\nvariants = [\"adv\"]\n[detector]\nkind = \"mean\"\n[dataset]\nkind = \"dir\"\npath = \"imgs\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.methods, vec![Method::Rise]);
        assert_eq!(cfg.variants, vec![Variant::AdversarialMasking]);
        assert_eq!(cfg.nes, NesParams::explanation());
        assert_eq!(cfg.detector, DetectorSpec::Mean);
    }

    #[test]
    fn suite_detector_needs_suite_dataset() {
        let cfg = RunConfig {
            dataset: DatasetSpec::Dir { path: "x".into() },
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
