//! TOML experiment configuration shared between the library and the CLI.
//!
//! ```toml
//! seed = 42
//!
//! [dataset]
//! source = "synth"            # or a path to the CSV dataset layout
//! modalities = ["eeg"]
//! labels = "binary"
//!
//! [dataset.synth]
//! subjects = 6
//! trials_per_subject = 3
//! windows_per_trial = 18
//! sample_rates = [32]
//!
//! [dsp]
//! eeg = "eeg_default"
//!
//! [augment]
//! enabled = true
//! noise_sigma_rel = 0.02
//!
//! [model]
//! preset = "tiny"
//!
//! [train]
//! epochs = 30
//!
//! [eval]
//! protocol = "kfold10"
//! ```

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::augment::AugmentPolicy;
use crate::dataset::{LabelScheme, Modality, Protocol, SynthSpec};
use crate::dsp::FilterPreset;
use crate::error::{Error, Result};
use crate::model::{BlockKind, Fusion, ModalityConfig, NetConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// `"synth"` or a path to the CSV layout root.
    pub source: String,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<String>,
    #[serde(default = "default_labels")]
    pub labels: String,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

fn default_modalities() -> Vec<String> {
    vec!["eeg".into()]
}

fn default_labels() -> String {
    "binary".into()
}

/// Synthetic-source shape; classes come from the label scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "default_subjects")]
    pub subjects: u32,
    #[serde(default = "default_trials")]
    pub trials_per_subject: u32,
    #[serde(default = "default_windows")]
    pub windows_per_trial: u32,
    #[serde(default)]
    pub sample_rates: Option<Vec<u32>>,
}

fn default_subjects() -> u32 {
    6
}
fn default_trials() -> u32 {
    3
}
fn default_windows() -> u32 {
    18
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            subjects: default_subjects(),
            trials_per_subject: default_trials(),
            windows_per_trial: default_windows(),
            sample_rates: None,
        }
    }
}

/// Per-modality filter preset names.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DspSection {
    #[serde(default)]
    pub eeg: Option<String>,
    #[serde(default)]
    pub ecg: Option<String>,
    #[serde(default)]
    pub eda: Option<String>,
}

impl DspSection {
    pub fn preset_for(&self, modality: Modality) -> Result<FilterPreset> {
        let name = match modality {
            Modality::Eeg => &self.eeg,
            Modality::Ecg => &self.ecg,
            Modality::Eda => &self.eda,
        };
        match name {
            Some(n) => FilterPreset::parse(n),
            None => Ok(FilterPreset::default_for(modality)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_noise")]
    pub noise_sigma_rel: f64,
    #[serde(default = "default_warp")]
    pub max_warp: f64,
    #[serde(default = "default_knots")]
    pub warp_knots: usize,
    #[serde(default = "default_scale_low")]
    pub scale_low: f64,
    #[serde(default = "default_scale_high")]
    pub scale_high: f64,
    #[serde(default = "default_copies")]
    pub copies_per_window: usize,
}

fn default_true() -> bool {
    true
}
fn default_noise() -> f64 {
    0.02
}
fn default_warp() -> f64 {
    0.10
}
fn default_knots() -> usize {
    4
}
fn default_scale_low() -> f64 {
    0.8
}
fn default_scale_high() -> f64 {
    1.2
}
fn default_copies() -> usize {
    1
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            enabled: true,
            noise_sigma_rel: default_noise(),
            max_warp: default_warp(),
            warp_knots: default_knots(),
            scale_low: default_scale_low(),
            scale_high: default_scale_high(),
            copies_per_window: default_copies(),
        }
    }
}

impl AugmentSection {
    pub fn policy(&self) -> Option<AugmentPolicy> {
        self.enabled.then(|| AugmentPolicy {
            noise_sigma_rel: self.noise_sigma_rel,
            max_warp: self.max_warp,
            warp_knots: self.warp_knots,
            scale_low: self.scale_low,
            scale_high: self.scale_high,
            copies_per_window: self.copies_per_window,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `"default"` (published per-modality table) or `"tiny"` (desk scale).
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub use_gru: bool,
    #[serde(default = "default_block_kind")]
    pub block_kind: BlockKind,
    #[serde(default)]
    pub gru_on_raw: bool,
    /// Optional overrides applied to every modality.
    #[serde(default)]
    pub kernels: Option<Vec<usize>>,
    #[serde(default)]
    pub feature_maps: Option<usize>,
    #[serde(default)]
    pub resnet_blocks: Option<usize>,
    #[serde(default)]
    pub gru_hidden: Option<usize>,
    #[serde(default)]
    pub cbam_reduction: Option<usize>,
}

fn default_preset() -> String {
    "default".into()
}
fn default_dropout() -> f64 {
    0.25
}
fn default_block_kind() -> BlockKind {
    BlockKind::ResNetCbam
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: default_preset(),
            dropout: default_dropout(),
            use_gru: true,
            block_kind: default_block_kind(),
            gru_on_raw: false,
            kernels: None,
            feature_maps: None,
            resnet_blocks: None,
            gru_hidden: None,
            cbam_reduction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// `"kfold10"`, `"kfoldN"`, or `"loso"`.
    #[serde(default = "default_protocol")]
    pub protocol: String,
}

fn default_protocol() -> String {
    "kfold10".into()
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: default_protocol(),
        }
    }
}

pub fn parse_protocol(s: &str) -> Result<Protocol> {
    if s.eq_ignore_ascii_case("loso") {
        return Ok(Protocol::Loso);
    }
    if let Some(k) = s.strip_prefix("kfold") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad protocol '{s}'")))?;
        return Ok(Protocol::KFold(k));
    }
    Err(Error::Config(format!(
        "unknown protocol '{s}' (expected kfoldN or loso)"
    )))
}

/// The full experiment description, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub dsp: DspSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Training hyperparameters with the published defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_factor")]
    pub scheduler_factor: f64,
    #[serde(default = "default_patience")]
    pub scheduler_patience: usize,
}

fn default_lr() -> f64 {
    0.001
}
fn default_wd() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    100
}
fn default_factor() -> f64 {
    0.5
}
fn default_patience() -> usize {
    15
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            scheduler_factor: default_factor(),
            scheduler_patience: default_patience(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn modalities(&self) -> Result<Vec<Modality>> {
        if self.dataset.modalities.is_empty() {
            return Err(Error::Config("no modalities configured".into()));
        }
        self.dataset
            .modalities
            .iter()
            .map(|s| Modality::parse(s))
            .collect()
    }

    pub fn label_scheme(&self) -> Result<LabelScheme> {
        LabelScheme::parse(&self.dataset.labels)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        parse_protocol(&self.eval.protocol)
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset.source == "synth"
    }

    pub fn dataset_root(&self) -> Option<PathBuf> {
        (!self.is_synthetic()).then(|| PathBuf::from(&self.dataset.source))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let section = self.dataset.synth.clone().unwrap_or_default();
        Ok(SynthSpec {
            subjects: section.subjects,
            trials_per_subject: section.trials_per_subject,
            classes: self.label_scheme()?.classes(),
            modalities: self.modalities()?,
            windows_per_trial: section.windows_per_trial,
            sample_rates: section.sample_rates,
        })
    }

    /// Sample rate each modality's windows will have under this config.
    fn sample_rate_for(&self, index: usize, modality: Modality) -> u32 {
        if self.is_synthetic() {
            if let Some(rates) = self
                .dataset
                .synth
                .as_ref()
                .and_then(|s| s.sample_rates.as_ref())
            {
                if let Some(&r) = rates.get(index) {
                    return r;
                }
            }
        }
        modality.canonical_sample_rate_hz()
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let modalities = self.modalities()?;
        let multimodal = modalities.len() > 1;
        let mut configs = Vec::with_capacity(modalities.len());
        for (i, &m) in modalities.iter().enumerate() {
            let mut mc = match self.model.preset.as_str() {
                "tiny" => ModalityConfig::tiny(m),
                "default" if multimodal => ModalityConfig::default_multimodal(m),
                "default" => ModalityConfig::default_unimodal(m),
                other => {
                    return Err(Error::Config(format!(
                        "unknown model preset '{other}' (expected default or tiny)"
                    )))
                }
            };
            mc.sample_rate_hz = self.sample_rate_for(i, m);
            if let Some(kernels) = &self.model.kernels {
                mc.kernels = kernels.clone();
            }
            if let Some(f) = self.model.feature_maps {
                mc.feature_maps = f;
            }
            if let Some(b) = self.model.resnet_blocks {
                mc.resnet_blocks = b;
            }
            if let Some(h) = self.model.gru_hidden {
                mc.gru_hidden = h;
            }
            if let Some(r) = self.model.cbam_reduction {
                mc.cbam_reduction = r;
            }
            mc.gru_on_raw = self.model.gru_on_raw;
            configs.push(mc);
        }
        let net = NetConfig {
            modalities: configs,
            num_classes: self.label_scheme()?.classes(),
            dropout: self.model.dropout,
            fusion: if multimodal {
                Fusion::SelfAttention
            } else {
                Fusion::None
            },
            use_gru: self.model.use_gru,
            block_kind: self.model.block_kind,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            scheduler_factor: self.train.scheduler_factor,
            scheduler_patience: self.train.scheduler_patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn augment_policy(&self) -> Option<AugmentPolicy> {
        self.augment.policy()
    }

    fn validate(&self) -> Result<()> {
        let modalities = self.modalities()?;
        self.label_scheme()?;
        self.protocol()?;
        for &m in &modalities {
            self.dsp.preset_for(m)?;
        }
        if let Some(synth) = &self.dataset.synth {
            if let Some(rates) = &synth.sample_rates {
                if rates.len() != modalities.len() {
                    return Err(Error::Config(format!(
                        "{} sample rates configured for {} modalities",
                        rates.len(),
                        modalities.len()
                    )));
                }
            }
        }
        if !self.is_synthetic() && self.dataset.synth.is_some() {
            return Err(Error::Config(
                "[dataset.synth] is only meaningful with source = \"synth\"".into(),
            ));
        }
        if let Some(policy) = self.augment.policy() {
            policy.validate()?;
        }
        Ok(())
    }
}
