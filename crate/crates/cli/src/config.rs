//! Run configuration: a JSON config file overlaid by command-line flags,
//! resolved once, echoed verbatim into every run's manifest.

use geovae::datahub::TransformRanges;
use geovae::evalsuite::NoiseKind;
use geovae::stlayer::WarpKind;
use geovae::vae::{Likelihood, TrainConfig};
use geovae::DiffError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Failure classified by exit code: 2 configuration, 3 data or format,
/// 4 numerical.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    /// Classify a library error raised while touching data or files.
    pub fn from_data(err: DiffError) -> Self {
        match err {
            DiffError::NonFinite { .. } => Failure::Numeric(err.to_string()),
            _ => Failure::Data(err.to_string()),
        }
    }

    /// Classify a library error raised mid-computation.
    pub fn from_numeric(err: DiffError) -> Self {
        match err {
            DiffError::Io(_) | DiffError::BadContainer(_) => Failure::Data(err.to_string()),
            _ => Failure::Numeric(err.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Data(m) => write!(f, "data: {m}"),
            Failure::Numeric(m) => write!(f, "numerical: {m}"),
        }
    }
}

/// Which dataset a run uses, with everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        images: String,
        labels: Option<String>,
        #[serde(default)]
        transpose: bool,
    },
    Fashion {
        images: String,
        labels: Option<String>,
        #[serde(default)]
        transpose: bool,
    },
    Emnist {
        images: String,
        labels: Option<String>,
        #[serde(default)]
        transpose: bool,
    },
    Donut {
        #[serde(default = "donut_n")]
        n: usize,
        #[serde(default = "donut_inner")]
        inner: f64,
        #[serde(default = "donut_outer")]
        outer: f64,
    },
    Glyphs {
        #[serde(default = "glyph_n")]
        n: usize,
        #[serde(default = "TransformRanges::mild")]
        ranges: TransformRanges,
    },
}

fn donut_n() -> usize {
    2000
}
fn donut_inner() -> f64 {
    0.8
}
fn donut_outer() -> f64 {
    1.2
}
fn glyph_n() -> usize {
    512
}

/// Model architecture adjustments on top of the shape-derived preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverlay {
    pub latent_a: Option<usize>,
    pub latent_b: Option<usize>,
    pub enc_hidden: Option<Vec<usize>>,
    pub dec_hidden: Option<Vec<usize>>,
    pub warp_hidden: Option<usize>,
    /// One of `direct`, `decomposed`, `velocity`, `none`.
    pub warp: Option<String>,
    pub nonlocal_inner: Option<usize>,
    /// `bernoulli` or `gaussian`.
    pub likelihood: Option<String>,
    pub noise_scale: Option<f64>,
}

impl ModelOverlay {
    pub fn warp_kind(&self) -> Result<Option<Option<WarpKind>>, Failure> {
        Ok(match self.warp.as_deref() {
            None => None,
            Some("none") => Some(None),
            Some("direct") => Some(Some(WarpKind::Direct)),
            Some("decomposed") => Some(Some(WarpKind::Decomposed)),
            Some("velocity") => Some(Some(WarpKind::Velocity)),
            Some(other) => {
                return Err(Failure::Config(format!(
                    "unknown warp kind {other:?}, expected direct, decomposed, velocity, or none"
                )))
            }
        })
    }

    pub fn likelihood_kind(&self) -> Result<Option<Likelihood>, Failure> {
        Ok(match self.likelihood.as_deref() {
            None => None,
            Some("bernoulli") => Some(Likelihood::Bernoulli),
            Some("gaussian") => Some(Likelihood::Gaussian),
            Some(other) => {
                return Err(Failure::Config(format!(
                    "unknown likelihood {other:?}, expected bernoulli or gaussian"
                )))
            }
        })
    }
}

/// Small declared grid for train-time search; the best candidate by
/// validation ELBO wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub gd_weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverlay {
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub gd_weight: Option<f64>,
    pub entropy_weight: Option<f64>,
    pub knn_k: Option<usize>,
    pub disconnect_penalty: Option<f64>,
    pub grid: Option<GridSpec>,
}

impl TrainOverlay {
    pub fn apply(&self, base: &mut TrainConfig) {
        let t = self;
        if let Some(v) = t.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = t.beta1 {
            base.beta1 = v;
        }
        if let Some(v) = t.beta2 {
            base.beta2 = v;
        }
        if let Some(v) = t.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = t.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = t.epochs {
            base.epochs = v;
        }
        if let Some(v) = t.gd_weight {
            base.gd_weight = v;
        }
        if let Some(v) = t.entropy_weight {
            base.entropy_weight = v;
        }
        if let Some(v) = t.knn_k {
            base.knn_k = v;
        }
        if let Some(v) = t.disconnect_penalty {
            base.disconnect_penalty = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateOverlay {
    /// Endpoint as a dataset index.
    pub from: Option<usize>,
    pub to: Option<usize>,
    /// Endpoint as a raw latent vector; wins over indices.
    pub z1: Option<Vec<f64>>,
    pub z2: Option<Vec<f64>>,
    /// Curve sample count.
    pub samples: Option<usize>,
    pub delta: Option<f64>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub insertion_weight: Option<f64>,
    pub geodesic_weight: Option<f64>,
    pub min_geodesic_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOverlay {
    /// Latent sample count for the diagnostic sweep.
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateOverlay {
    /// `salt-pepper` or `gaussian`.
    pub noise: Option<String>,
    pub levels: Option<Vec<f64>>,
    pub iw_k: Option<usize>,
    /// Cap on evaluated items.
    pub samples: Option<usize>,
    /// Label treated as the outlier class for the ROC protocol.
    pub holdout: Option<i64>,
}

impl EvaluateOverlay {
    pub fn noise_kind(&self) -> Result<NoiseKind, Failure> {
        match self.noise.as_deref() {
            None | Some("salt-pepper") => Ok(NoiseKind::SaltPepper),
            Some("gaussian") => Ok(NoiseKind::Gaussian),
            Some(other) => Err(Failure::Config(format!(
                "unknown noise kind {other:?}, expected salt-pepper or gaussian"
            ))),
        }
    }
}

/// The JSON config document. Unknown keys anywhere are rejected by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub deterministic: Option<bool>,
    pub checkpoint: Option<String>,
    pub dataset: Option<DatasetSpec>,
    pub limit: Option<usize>,
    pub model: ModelOverlay,
    pub train: TrainOverlay,
    pub interpolate: InterpolateOverlay,
    pub diagnose: DiagnoseOverlay,
    pub evaluate: EvaluateOverlay,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), Failure> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let parsed: FileConfig = serde_json::from_value(value.clone())
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Ok((parsed, value))
    }
}

/// Everything a command needs, after the file and the flags were merged.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<DatasetSpec>,
    pub limit: Option<usize>,
    pub model: ModelOverlay,
    pub train: TrainOverlay,
    pub interpolate: InterpolateOverlay,
    pub diagnose: DiagnoseOverlay,
    pub evaluate: EvaluateOverlay,
}

impl Resolved {
    pub fn require_dataset(&self) -> Result<&DatasetSpec, Failure> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Failure::Config("no dataset specified (config `dataset` or --dataset)".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&PathBuf, Failure> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| Failure::Config("no checkpoint specified (config `checkpoint` or --checkpoint)".into()))
    }
}

/// The file every run writes next to its outputs: the config file as
/// parsed, the raw flags, and the fully-resolved result of merging them.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_file: Option<serde_json::Value>,
    pub flags: Vec<String>,
    pub resolved: serde_json::Value,
    /// Command-specific notes (selected grid point, protocols, warnings).
    pub notes: Vec<String>,
}

pub fn write_manifest(out: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| Failure::Data(format!("manifest serialization: {e}")))?;
    write_text(&out.join("manifest.json"), &body)
}

pub fn write_text(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Failure::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, body)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}
