//! Run configuration: one TOML document with `data`, `space`, `model`,
//! `regime`, `eval`, and `output` sections. Every field has a default,
//! unknown keys are rejected, and the fully resolved document is written
//! into each output directory for provenance.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use robustwarp::attack::{CmaOptions, DetNormalization, Feasibility};
use robustwarp::data::{load_idx, synthetic_digits, Dataset};
use robustwarp::model::OptimizerKind;
use robustwarp::train::{AttackSpec, EvalMode, TrainConfig};
use robustwarp::warp::PARAM_NAMES;
use robustwarp::{CnnConfig, ConstraintSpace, Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub space: SpaceSection,
    pub model: ModelSection,
    pub regime: RegimeSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// IDX image/label file pair for training; both or neither.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    /// IDX image/label file pair for evaluation; both or neither.
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Synthetic corpus sizes, used whenever the file pair is absent. The
    /// test corpus draws from the seed after the training one.
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    /// Random subsets taken after loading; zero keeps everything.
    pub subset_train: usize,
    pub subset_test: usize,
    pub subset_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            synthetic_train: 256,
            synthetic_test: 64,
            synthetic_seed: 1,
            subset_train: 0,
            subset_test: 0,
            subset_seed: 0,
        }
    }
}

impl DataSection {
    pub fn load_train(&self) -> Result<Dataset> {
        let ds = match (&self.train_images, &self.train_labels) {
            (Some(images), Some(labels)) => load_idx(images, labels, "train")?,
            (None, None) => synthetic_digits(self.synthetic_train, self.synthetic_seed),
            _ => {
                return Err(Error::Config(
                    "data.train_images and data.train_labels must be given together".into(),
                ))
            }
        };
        self.take_subset(ds, self.subset_train)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        let ds = match (&self.test_images, &self.test_labels) {
            (Some(images), Some(labels)) => load_idx(images, labels, "test")?,
            (None, None) => {
                synthetic_digits(self.synthetic_test, self.synthetic_seed.wrapping_add(1))
            }
            _ => {
                return Err(Error::Config(
                    "data.test_images and data.test_labels must be given together".into(),
                ))
            }
        };
        self.take_subset(ds, self.subset_test)
    }

    fn take_subset(&self, ds: Dataset, n: usize) -> Result<Dataset> {
        if n == 0 {
            Ok(ds)
        } else {
            ds.subset(n, self.subset_seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpacePreset {
    TranslationsOnly,
    TranslationsRotation,
    FullAffine,
    /// Free parameters listed explicitly in `space.free`.
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSection {
    pub preset: SpacePreset,
    /// Names from `du, dv, theta, phi, su, sv`; only read with the
    /// `custom` preset.
    pub free: Option<Vec<String>>,
    /// Per-parameter intervals. Presets only choose which parameters are
    /// free; bounds always come from here, angles in degrees.
    pub du: [f64; 2],
    pub dv: [f64; 2],
    pub theta_deg: [f64; 2],
    pub phi_deg: [f64; 2],
    pub su: [f64; 2],
    pub sv: [f64; 2],
}

impl Default for SpaceSection {
    fn default() -> Self {
        use robustwarp::space::{
            DEFAULT_ROTATION_DEG, DEFAULT_SCALE, DEFAULT_SHEAR_DEG, DEFAULT_TRANSLATION,
        };
        Self {
            preset: SpacePreset::TranslationsRotation,
            free: None,
            du: DEFAULT_TRANSLATION,
            dv: DEFAULT_TRANSLATION,
            theta_deg: DEFAULT_ROTATION_DEG,
            phi_deg: DEFAULT_SHEAR_DEG,
            su: DEFAULT_SCALE,
            sv: DEFAULT_SCALE,
        }
    }
}

impl SpaceSection {
    pub fn resolve(&self) -> Result<ConstraintSpace> {
        let bounds = [
            self.du,
            self.dv,
            [self.theta_deg[0].to_radians(), self.theta_deg[1].to_radians()],
            [self.phi_deg[0].to_radians(), self.phi_deg[1].to_radians()],
            self.su,
            self.sv,
        ];
        let free = match self.preset {
            SpacePreset::TranslationsOnly => [true, true, false, false, false, false],
            SpacePreset::TranslationsRotation => [true, true, true, false, false, false],
            SpacePreset::FullAffine => [true; 6],
            SpacePreset::Custom => {
                let names = self.free.as_ref().ok_or_else(|| {
                    Error::Config("space.preset = custom requires space.free".into())
                })?;
                let mut mask = [false; 6];
                for name in names {
                    let idx = PARAM_NAMES
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "space.free: unknown parameter `{name}` (expected one of {})",
                                PARAM_NAMES.join(", ")
                            ))
                        })?;
                    mask[idx] = true;
                }
                mask
            }
        };
        if self.preset != SpacePreset::Custom && self.free.is_some() {
            return Err(Error::Config("space.free requires space.preset = custom".into()));
        }
        ConstraintSpace::new(bounds, free)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    Small,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: ModelPreset,
    pub optimizer: OptimizerChoice,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub model_seed: u64,
    pub shuffle_seed: u64,
    pub attack_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Small,
            optimizer: OptimizerChoice::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            model_seed: 1,
            shuffle_seed: 2,
            attack_seed: 3,
        }
    }
}

impl ModelSection {
    pub fn cnn_config(&self) -> CnnConfig {
        match self.preset {
            ModelPreset::Small => CnnConfig::small(),
            ModelPreset::Full => CnnConfig::full(),
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::Adam,
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    Standard,
    Augmented,
    Robust,
}

impl RegimeKind {
    pub fn label(self) -> &'static str {
        match self {
            RegimeKind::Standard => "standard",
            RegimeKind::Augmented => "augmented",
            RegimeKind::Robust => "robust",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeasibilityChoice {
    Project,
    Tanh,
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetChoice {
    DthRoot,
    Raw,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeSection {
    pub kind: RegimeKind,
    /// Training iterations (optimizer steps).
    pub iterations: u64,
    pub log_every: u64,
    /// Robust regime only: `worst-of-K`, `es-N` ((1+1) with N iterations
    /// per example per step), or `cma-N` (N update calls).
    pub attack: Option<String>,
    /// Initial step size for the evolution-strategy attacks.
    pub sigma0: f64,
    /// CMA candidate handling outside the box.
    pub feasibility: FeasibilityChoice,
    /// CMA covariance determinant normalization.
    pub det_normalization: DetChoice,
}

impl Default for RegimeSection {
    fn default() -> Self {
        Self {
            kind: RegimeKind::Standard,
            iterations: 500,
            log_every: 50,
            attack: None,
            sigma0: 0.4,
            feasibility: FeasibilityChoice::Project,
            det_normalization: DetChoice::DthRoot,
        }
    }
}

impl RegimeSection {
    pub fn attack_spec(&self) -> Result<AttackSpec> {
        let text = match (self.kind, &self.attack) {
            (RegimeKind::Robust, Some(text)) => text,
            (RegimeKind::Robust, None) => {
                return Err(Error::Config("regime.kind = robust requires regime.attack".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "regime.attack is only meaningful with regime.kind = robust".into(),
                ))
            }
            (_, None) => {
                return Err(Error::Config("no attack configured for this regime".into()))
            }
        };
        if let Some(k) = text.strip_prefix("worst-of-") {
            let k = parse_count(k, "regime.attack worst-of-K")?;
            return Ok(AttackSpec::WorstOfK { k });
        }
        if let Some(n) = text.strip_prefix("es-") {
            let iterations = parse_count(n, "regime.attack es-N")?;
            return Ok(AttackSpec::OnePlusOne { iterations, sigma0: self.sigma0 });
        }
        if let Some(n) = text.strip_prefix("cma-") {
            let update_calls = parse_count(n, "regime.attack cma-N")?;
            return Ok(AttackSpec::Cma {
                update_calls,
                options: self.cma_options(),
                sigma0: self.sigma0,
            });
        }
        Err(Error::Config(format!(
            "regime.attack `{text}` not recognized; expected worst-of-K, es-N, or cma-N"
        )))
    }

    pub fn cma_options(&self) -> CmaOptions {
        CmaOptions {
            feasibility: match self.feasibility {
                FeasibilityChoice::Project => Feasibility::Project,
                FeasibilityChoice::Tanh => Feasibility::Tanh,
                FeasibilityChoice::Resample => Feasibility::Resample,
            },
            det_normalization: match self.det_normalization {
                DetChoice::DthRoot => DetNormalization::DthRoot,
                DetChoice::Raw => DetNormalization::Raw,
                DetChoice::Off => DetNormalization::Off,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `natural`, `worst-of-K`, `grid-AxBx...` (one count per free
    /// parameter), or `es-N`.
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
    /// Step size for the `es-N` evaluation mode (fresh state per example).
    pub es_sigma0: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            modes: vec!["natural".into(), "worst-of-10".into(), "grid-5x5x31".into()],
            seeds: vec![0, 1, 2],
            es_sigma0: 0.75,
        }
    }
}

impl EvalSection {
    pub fn parse_modes(&self, dims: usize) -> Result<Vec<EvalMode>> {
        self.modes.iter().map(|m| parse_eval_mode(m, dims, self.es_sigma0)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

/// Parses one evaluation-mode string against the space dimensionality.
pub fn parse_eval_mode(text: &str, dims: usize, es_sigma0: f64) -> Result<EvalMode> {
    if text == "natural" {
        return Ok(EvalMode::Natural);
    }
    if let Some(k) = text.strip_prefix("worst-of-") {
        return Ok(EvalMode::WorstOfK { k: parse_count(k, "worst-of-K")? });
    }
    if let Some(counts_text) = text.strip_prefix("grid-") {
        let counts = counts_text
            .split('x')
            .map(|c| parse_count(c, "grid-AxBx...").map(|n| n as usize))
            .collect::<Result<Vec<usize>>>()?;
        if counts.len() != dims {
            return Err(Error::Config(format!(
                "grid mode `{text}` names {} axes but the space has {dims} free parameters",
                counts.len()
            )));
        }
        return Ok(EvalMode::Grid { counts });
    }
    if let Some(n) = text.strip_prefix("es-") {
        return Ok(EvalMode::Es { iterations: parse_count(n, "es-N")?, sigma0: es_sigma0 });
    }
    Err(Error::Config(format!(
        "evaluation mode `{text}` not recognized; expected natural, worst-of-K, grid-AxBx..., or es-N"
    )))
}

fn parse_count(text: &str, what: &str) -> Result<u64> {
    let n: u64 = text
        .parse()
        .map_err(|_| Error::Config(format!("{what}: `{text}` is not a positive integer")))?;
    if n == 0 {
        return Err(Error::Config(format!("{what}: count must be at least 1")));
    }
    Ok(n)
}

/// The training-loop configuration implied by the model and regime
/// sections.
pub fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        model: config.model.cnn_config(),
        optimizer: config.model.optimizer_kind(),
        learning_rate: config.model.learning_rate,
        batch_size: config.model.batch_size,
        iterations: config.regime.iterations,
        model_seed: config.model.model_seed,
        shuffle_seed: config.model.shuffle_seed,
        attack_seed: config.model.attack_seed,
        log_every: config.regime.log_every,
    }
}
