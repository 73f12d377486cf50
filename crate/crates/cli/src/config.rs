use std::fs;
use std::path::{Path, PathBuf};

use ridgeforge_core::appearance::AppearanceFilterConfig;
use ridgeforge_core::contrastive::{ContrastiveConfig, HingeConfig};
use ridgeforge_core::dataset::{GenDatasetConfig, ToyDatasetConfig};
use ridgeforge_core::eval::VerificationProtocol;
use ridgeforge_core::generator::GeneratorConfig;
use ridgeforge_core::recognition::{BackboneSpec, RecognizerTrainConfig};
use ridgeforge_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Loaded from TOML, then overridden by flags; the
/// effective value is echoed into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_tag: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Pins the worker pool to one thread.
    pub determinism: bool,
    pub heartbeat_secs: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub contrastive: ContrastiveSection,
    pub gan: GanRunConfig,
    pub recognizer: RecognizerSection,
    pub synth: GenDatasetConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_tag: "run".into(),
            seed: 0,
            out: None,
            determinism: false,
            heartbeat_secs: 30,
            paths: Paths::default(),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            contrastive: ContrastiveSection::default(),
            gan: GanRunConfig::default(),
            recognizer: RecognizerSection::default(),
            synth: GenDatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Input artifacts. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Real dataset root (identity folders or an `index.jsonl`).
    pub real_data: Option<PathBuf>,
    /// Recognizer used by the identity loss and intra-class statistics.
    pub id_model: Option<PathBuf>,
    pub gan: Option<PathBuf>,
    /// Recognizer evaluated by `eval-verify`.
    pub recognizer: Option<PathBuf>,
    /// Training set for `train-recognizer`: a generated dataset directory or
    /// a real dataset root (its train split is used).
    pub dataset: Option<PathBuf>,
    /// Evaluation set for `eval-verify`: a real root (its test split) or a
    /// generated dataset directory.
    pub verify_dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Used by `make-toy-dataset`.
    pub toy: ToyDatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, split_seed: 0, toy: ToyDatasetConfig::default() }
    }
}

/// Contrastive settings; unset fields take resolution-dependent defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub w_app: f64,
    pub id: Option<HingeConfig>,
    pub app: Option<HingeConfig>,
    pub filter: Option<AppearanceFilterConfig>,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        Self { w_app: 1.0, id: None, app: None, filter: None }
    }
}

impl ContrastiveSection {
    pub fn resolve(&self, resolution: usize) -> Result<ContrastiveConfig> {
        let base = ContrastiveConfig::for_resolution(resolution);
        let c = ContrastiveConfig {
            id: self.id.unwrap_or(base.id),
            app: self.app.unwrap_or(base.app),
            w_app: self.w_app,
            filter: self.filter.clone().unwrap_or(base.filter),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanRunConfig {
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Sample grid shape: appearance rows × identity columns.
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for GanRunConfig {
    fn default() -> Self {
        Self { checkpoint_every: 1000, log_every: 10, grid_rows: 4, grid_cols: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerSection {
    /// Family and variant, e.g. `resnet18` or `mobilenet-toy`.
    pub backbone: String,
    pub remove_first_subsample: bool,
    pub embedding_dim: usize,
    pub train: RecognizerTrainConfig,
}

impl Default for RecognizerSection {
    fn default() -> Self {
        Self {
            backbone: "resnet18".into(),
            remove_first_subsample: true,
            embedding_dim: 512,
            train: RecognizerTrainConfig::default(),
        }
    }
}

impl RecognizerSection {
    pub fn spec(&self) -> Result<BackboneSpec> {
        let mut spec: BackboneSpec = self.backbone.parse()?;
        spec.remove_first_subsample = self.remove_first_subsample;
        spec.embedding_dim = self.embedding_dim;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_identities: usize,
    pub n_pairs: usize,
    pub far_targets: Vec<f64>,
    pub protocol: VerificationProtocol,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_identities: 1000,
            n_pairs: 1000,
            far_targets: vec![0.001, 0.01],
            protocol: VerificationProtocol::default(),
            bins: 50,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Usage(format!("config file not found: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.contrastive.resolve(self.generator.resolution)?;
        self.recognizer.spec()?;
        self.recognizer.train.validate()?;
        self.synth.validate()?;
        if self.eval.far_targets.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("far_targets must lie in [0, 1]".into()));
        }
        if self.eval.bins == 0 || self.heartbeat_secs == 0 || self.gan.log_every == 0 || self.gan.checkpoint_every == 0 {
            return Err(Error::Config("bins, heartbeat_secs, log_every and checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("no output directory: pass --out or set `out`".into()))
    }
}

/// An input path that must exist, or a usage error naming it.
pub fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Usage(format!("no {what} given")))?;
    if !p.exists() {
        return Err(Error::Usage(format!("{what} not found: {}", p.display())));
    }
    Ok(p.clone())
}
