//! JSON experiment configuration with a closed schema: unknown keys are
//! rejected so misspelled options fail loudly instead of silently using
//! defaults.

use crate::attacks::AttackKind;
use crate::error::{Error, Result};
use crate::reprogram::LabelMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

/// A perturbation budget written either as a JSON number or as an exact
/// fraction string like "64/255", matching the usual pixel-scale axis units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

impl Epsilon {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((num, den)) = s.split_once('/') {
            let n: f64 = num
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad epsilon numerator in {s:?}")))?;
            let d: f64 = den
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad epsilon denominator in {s:?}")))?;
            if d == 0.0 {
                return Err(Error::Config(format!("zero denominator in epsilon {s:?}")));
            }
            Ok(Epsilon(n / d))
        } else {
            s.parse()
                .map(Epsilon)
                .map_err(|_| Error::Config(format!("bad epsilon value {s:?}")))
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Epsilon(v)),
            Raw::Str(s) => Epsilon::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional Gaussian-blob images; a fast self-contained
    /// stand-in for file-based data.
    Synthetic {
        classes: usize,
        height: usize,
        width: usize,
        train: usize,
        test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// IDX-format image/label files (the MNIST container format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_noise() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "mlp" sizes the input layer from the dataset; "mlp-mnist" is the
    /// fixed 784-200-200-10 preset.
    pub preset: String,
    /// Hidden layer widths for the "mlp" preset.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "mlp".into(), hidden: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DefenseConfig {
    #[default]
    None,
    Sap {
        #[serde(default)]
        k: Option<usize>,
    },
    Dropout {
        rate: f64,
    },
    Gaussian {
        sigma: f64,
        /// Extra noise at the raw input in addition to hidden activations.
        #[serde(default)]
        input_sigma: Option<f64>,
    },
    Hrs {
        /// Channel count per switching block.
        channels: Vec<usize>,
        /// Layer indices where blocks split; defaults to even splits at
        /// hidden-layer boundaries.
        #[serde(default)]
        splits: Option<Vec<usize>>,
    },
    Advtrain {
        epsilon: Epsilon,
        #[serde(default = "default_advtrain_iters")]
        iters: usize,
        #[serde(default)]
        alpha: Option<f64>,
    },
}

fn default_advtrain_iters() -> usize {
    10
}

impl DefenseConfig {
    /// Short identifier used in report rows.
    pub fn label(&self) -> String {
        match self {
            DefenseConfig::None => "base".into(),
            DefenseConfig::Sap { k } => match k {
                Some(k) => format!("sap-k{k}"),
                None => "sap".into(),
            },
            DefenseConfig::Dropout { rate } => format!("dropout-{rate}"),
            DefenseConfig::Gaussian { sigma, .. } => format!("gaussian-{sigma}"),
            DefenseConfig::Hrs { channels, .. } => {
                let parts: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
                format!("hrs-{}", parts.join("x"))
            }
            DefenseConfig::Advtrain { epsilon, .. } => format!("advtrain-{}", epsilon.0),
        }
    }

    /// Strength factor for DES scatter plots.
    pub fn theta(&self) -> f64 {
        match self {
            DefenseConfig::None => 0.0,
            DefenseConfig::Sap { k } => k.map(|k| k as f64).unwrap_or(0.0),
            DefenseConfig::Dropout { rate } => *rate,
            DefenseConfig::Gaussian { sigma, .. } => *sigma,
            DefenseConfig::Hrs { channels, .. } => {
                channels.iter().map(|&c| c as f64).product()
            }
            DefenseConfig::Advtrain { epsilon, .. } => epsilon.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AttackModeConfig {
    #[default]
    Whitebox,
    Eot,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilons: Vec<Epsilon>,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub mode: AttackModeConfig,
    #[serde(default = "default_eot")]
    pub eot_samples: usize,
    /// Cap on attacked test examples; all of them when absent.
    #[serde(default)]
    pub examples: Option<usize>,
}

fn default_iters() -> usize {
    100
}

fn default_eot() -> usize {
    10
}

impl AttackSpec {
    pub fn oracle_mode(&self) -> crate::attacks::OracleMode {
        match self.mode {
            AttackModeConfig::Whitebox => crate::attacks::OracleMode::Whitebox,
            AttackModeConfig::Eot => crate::attacks::OracleMode::Eot(self.eot_samples),
            AttackModeConfig::Fixed => crate::attacks::OracleMode::Fixed,
        }
    }

    pub fn attack_config(&self, epsilon: f64) -> crate::attacks::AttackConfig {
        crate::attacks::AttackConfig {
            epsilon,
            alpha: self.alpha,
            iters: self.iters,
            kappa: self.kappa,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainParams {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_patience() -> usize {
    3
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            momentum: d_momentum(),
            patience: d_patience(),
        }
    }
}

impl TrainParams {
    pub fn to_train_config(&self) -> crate::train::TrainConfig {
        crate::train::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            patience: self.patience,
            ..Default::default()
        }
    }
}

/// DES sweep: each listed defense is trained and attacked, producing one
/// scatter point per defense relative to the plain baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DesSpec {
    pub defenses: Vec<DefenseConfig>,
    pub attack: AttackSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GradStdSpec {
    #[serde(default = "d_gs_examples")]
    pub examples: usize,
    #[serde(default = "d_gs_samples")]
    pub samples: usize,
    #[serde(default)]
    pub kappa: f64,
}

fn d_gs_examples() -> usize {
    10
}
fn d_gs_samples() -> usize {
    200
}

impl Default for GradStdSpec {
    fn default() -> Self {
        Self { examples: d_gs_examples(), samples: d_gs_samples(), kappa: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReprogramSpec {
    /// The new task's data; its images are fed through the trained program.
    pub task: DatasetConfig,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_rp_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_rp_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
}

fn d_kernel() -> usize {
    3
}
fn d_rp_epochs() -> usize {
    50
}
fn d_rp_lr() -> f64 {
    0.05
}

impl ReprogramSpec {
    pub fn to_config(&self) -> crate::reprogram::ReprogramConfig {
        crate::reprogram::ReprogramConfig {
            kernel: self.kernel,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            label_map: LabelMap::Identity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub des: Option<DesSpec>,
    #[serde(default)]
    pub grad_std: Option<GradStdSpec>,
    #[serde(default)]
    pub reprogram: Option<ReprogramSpec>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn d_seed() -> u64 {
    0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, height, width, train, test, noise, .. } => {
                if *classes < 2 || *height == 0 || *width == 0 || *train < *classes || *test == 0 {
                    return Err(Error::Config("synthetic dataset dimensions invalid".into()));
                }
                if !(0.0..=1.0).contains(noise) {
                    return Err(Error::Config("synthetic noise must lie in [0,1]".into()));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        match &self.defense {
            DefenseConfig::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config("dropout rate must lie in [0,1)".into()));
                }
            }
            DefenseConfig::Gaussian { sigma, input_sigma } => {
                if *sigma < 0.0 || input_sigma.map(|s| s < 0.0).unwrap_or(false) {
                    return Err(Error::Config("gaussian sigma must be nonnegative".into()));
                }
            }
            DefenseConfig::Hrs { channels, .. } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Config("hrs channel counts must be nonzero".into()));
                }
            }
            DefenseConfig::Advtrain { epsilon, .. } => {
                if epsilon.0 < 0.0 || epsilon.0 > 1.0 {
                    return Err(Error::Config("advtrain epsilon must lie in [0,1]".into()));
                }
            }
            _ => {}
        }
        for a in &self.attacks {
            for e in &a.epsilons {
                if e.0 < 0.0 || e.0 > 1.0 {
                    return Err(Error::Config(format!("attack epsilon {} out of [0,1]", e.0)));
                }
            }
            if a.mode == AttackModeConfig::Eot && a.eot_samples == 0 {
                return Err(Error::Config("eot-samples must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized config; stamped into every
    /// report so outputs are traceable to their inputs.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}
