//! Experiment configuration: a declarative TOML file with every
//! hyperparameter pre-filled to the standard HAR setup (200 rounds, 5
//! local epochs, batch 32, dropout 0.5, window 128 with 64-sample
//! overlap, 80/20 split), plus the compact architecture string notation.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedsim_core::aggregate::{
    FedDistConfig, FedMaConfig, GrowthTrigger, MatchEpsilon, PenaltyKind, PenaltyPolicy,
};
use fedsim_core::data::{SkewMode, SyntheticSpec};
use fedsim_core::engine::Strategy;
use fedsim_core::nn::{InputShape, LayerKind, ModelArchitecture};

fn default_rounds() -> u64 {
    200
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_dropout() -> f64 {
    0.5
}
fn default_window() -> usize {
    128
}
fn default_overlap() -> usize {
    64
}
fn default_split() -> f64 {
    0.8
}
fn default_checkpoint_interval() -> u64 {
    0
}
fn default_parallel() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.25
}
fn default_strategy() -> String {
    "fedavg".into()
}
fn default_base_layers() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub strategy: StrategySection,
    pub dataset: DatasetSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write a server checkpoint every N rounds (0 = final only).
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_parallel")]
    pub parallel_clients: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Architecture string, e.g. "196-16C_4M_1024D"; the softmax layer is
    /// appended automatically with the dataset's class count.
    pub arch: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            local_epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            dropout: default_dropout(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "default_strategy")]
    pub name: String,
    #[serde(default)]
    pub fedper: FedPerSection,
    #[serde(default)]
    pub fedma: FedMaSection,
    #[serde(default)]
    pub feddist: FedDistSection,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            name: default_strategy(),
            fedper: FedPerSection::default(),
            fedma: FedMaSection::default(),
            feddist: FedDistSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedPerSection {
    /// Leading layers shared through the server; the rest stay personal.
    #[serde(default = "default_base_layers")]
    pub base_layers: usize,
}

impl Default for FedPerSection {
    fn default() -> Self {
        FedPerSection { base_layers: default_base_layers() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FedMaSection {
    /// "adaptive" or a fixed numeric threshold for new-unit acceptance.
    #[serde(default)]
    pub epsilon: EpsilonSetting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Named(String),
    Fixed(f64),
}

impl Default for EpsilonSetting {
    fn default() -> Self {
        EpsilonSetting::Named("adaptive".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedDistSection {
    /// "linear" or "none".
    #[serde(default = "default_penalty_kind")]
    pub penalty: String,
    #[serde(default = "default_penalty_coefficient")]
    pub penalty_coefficient: f64,
    /// "individual" or "mean".
    #[serde(default = "default_trigger")]
    pub trigger: String,
    #[serde(default)]
    pub append_all_offenders: bool,
}

fn default_penalty_kind() -> String {
    "linear".into()
}
fn default_penalty_coefficient() -> f64 {
    fedsim_core::aggregate::DEFAULT_PENALTY_COEFFICIENT
}
fn default_trigger() -> String {
    "individual".into()
}

impl Default for FedDistSection {
    fn default() -> Self {
        FedDistSection {
            penalty: default_penalty_kind(),
            penalty_coefficient: default_penalty_coefficient(),
            trigger: default_trigger(),
            append_all_offenders: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: String,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub har_csv: Option<HarCsvSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub clients: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    pub window_len: usize,
    pub channels: usize,
    /// "iid", "label_skew" or "planted_outlier".
    pub mode: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub outlier_offset: f64,
    #[serde(default)]
    pub outlier_client: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_split")]
    pub train_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarCsvSection {
    /// Directory holding `<participant>_accelerometer.csv` (with a label
    /// column) and `<participant>_gyroscope.csv` pairs.
    pub dir: PathBuf,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    /// Class count override; inferred from the labels when absent.
    #[serde(default)]
    pub classes: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid config file")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.rounds < 1 {
            bail!("experiment.rounds must be at least 1");
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {
                if self.dataset.synthetic.is_none() {
                    bail!("dataset.kind = \"synthetic\" needs a [dataset.synthetic] table");
                }
            }
            "har_csv" => {
                if self.dataset.har_csv.is_none() {
                    bail!("dataset.kind = \"har_csv\" needs a [dataset.har_csv] table");
                }
            }
            other => bail!("unknown dataset kind {other:?} (expected \"synthetic\" or \"har_csv\")"),
        }
        self.strategy()?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        match self.strategy.name.as_str() {
            "fedavg" => Ok(Strategy::FedAvg),
            "fedper" => Ok(Strategy::FedPer { base_layers: self.strategy.fedper.base_layers }),
            "fedma" => {
                let epsilon = match &self.strategy.fedma.epsilon {
                    EpsilonSetting::Named(s) if s == "adaptive" => MatchEpsilon::Adaptive,
                    EpsilonSetting::Named(s) => {
                        bail!("unknown fedma epsilon {s:?} (expected \"adaptive\" or a number)")
                    }
                    EpsilonSetting::Fixed(v) => MatchEpsilon::Fixed(*v),
                };
                Ok(Strategy::FedMa { config: FedMaConfig { epsilon } })
            }
            "feddist" => {
                let s = &self.strategy.feddist;
                let kind = match s.penalty.as_str() {
                    "linear" => PenaltyKind::Linear,
                    "none" => PenaltyKind::None,
                    other => bail!("unknown feddist penalty {other:?}"),
                };
                let trigger = match s.trigger.as_str() {
                    "individual" => GrowthTrigger::IndividualDistance,
                    "mean" => GrowthTrigger::MeanDistance,
                    other => bail!("unknown feddist trigger {other:?}"),
                };
                Ok(Strategy::FedDist {
                    config: FedDistConfig {
                        penalty: PenaltyPolicy { kind, coefficient: s.penalty_coefficient },
                        trigger,
                        append_all_offenders: s.append_all_offenders,
                    },
                })
            }
            other => bail!(
                "unknown strategy {other:?} (expected fedavg | fedper | fedma | feddist)"
            ),
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = self
            .dataset
            .synthetic
            .as_ref()
            .ok_or_else(|| anyhow!("missing [dataset.synthetic]"))?;
        let mode = match s.mode.as_str() {
            "iid" => SkewMode::Iid,
            "label_skew" => SkewMode::LabelSkew { alpha: s.alpha },
            "planted_outlier" => SkewMode::PlantedOutlier {
                offset: s.outlier_offset,
                client: s.outlier_client,
            },
            other => bail!("unknown synthetic mode {other:?}"),
        };
        Ok(SyntheticSpec {
            clients: s.clients,
            classes: s.classes,
            samples_per_client: s.samples_per_client,
            window_len: s.window_len,
            channels: s.channels,
            mode,
            noise_std: s.noise_std,
            train_ratio: s.train_ratio,
            seed: fedsim_core::seed::derive(self.experiment.seed, &[0xda7a]),
        })
    }
}

/// Parses the compact architecture notation: underscore-separated tokens
/// `<filters>-<kernel>C` (conv), `<pool>M` (max pool) and `<units>D`
/// (dense), e.g. "196-16C_4M_1024D". A softmax layer with `classes` units
/// closes the network.
pub fn parse_arch(s: &str, input: InputShape, classes: usize) -> Result<ModelArchitecture> {
    if s.is_empty() {
        bail!("empty architecture string");
    }
    let mut kinds = Vec::new();
    let mut offset = 0usize;
    for token in s.split('_') {
        let position = offset;
        offset += token.len() + 1;
        let parse_count = |text: &str, what: &str| -> Result<usize> {
            let v: usize = text.parse().map_err(|_| {
                anyhow!(
                    "arch token {token:?} at position {position}: bad {what} {text:?}"
                )
            })?;
            if v == 0 {
                bail!("arch token {token:?} at position {position}: {what} must be positive");
            }
            Ok(v)
        };
        let kind = match token.chars().last() {
            Some('C') => {
                let body = &token[..token.len() - 1];
                let (filters, kernel) = body.split_once('-').ok_or_else(|| {
                    anyhow!(
                        "arch token {token:?} at position {position}: conv needs <filters>-<kernel>C"
                    )
                })?;
                LayerKind::Conv1D {
                    filters: parse_count(filters, "filter count")?,
                    kernel: parse_count(kernel, "kernel length")?,
                }
            }
            Some('M') => LayerKind::MaxPool1D {
                pool: parse_count(&token[..token.len() - 1], "pool length")?,
            },
            Some('D') => LayerKind::Dense {
                units: parse_count(&token[..token.len() - 1], "unit count")?,
            },
            _ => bail!(
                "arch token {token:?} at position {position}: expected a C, M or D suffix"
            ),
        };
        kinds.push(kind);
    }
    kinds.push(LayerKind::Softmax { classes });
    ModelArchitecture::new(input, kinds)
        .map_err(|e| anyhow!("architecture {s:?} does not fit input: {e}"))
}

/// Inverse of [`parse_arch`], omitting the softmax layer.
pub fn arch_to_string(arch: &ModelArchitecture) -> String {
    let mut tokens = Vec::new();
    for spec in &arch.layers {
        match spec.kind {
            LayerKind::Conv1D { filters, kernel } => tokens.push(format!("{filters}-{kernel}C")),
            LayerKind::MaxPool1D { pool } => tokens.push(format!("{pool}M")),
            LayerKind::Dense { units } => tokens.push(format!("{units}D")),
            LayerKind::Softmax { .. } => {}
        }
    }
    tokens.join("_")
}
