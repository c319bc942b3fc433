//! Declarative experiment description, read from and written to JSON.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasim::CorpusSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Shared queries, per-modality keys/values scaled by the fusion weights.
    Decoupled,
    /// Plain shared-projection attention with uniform 1/M scaling.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width shared by all modalities.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens_per_modality: usize,
    pub ffn_mult: usize,
    pub task_head_layers: usize,
    /// Channels of the two strided convolutions in time-series encoders.
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub visual_hidden: usize,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    /// Row length of the decoder's reshaped input; `d_model` must divide by it.
    pub decoder_width: usize,
    pub variance_floor: f64,
    /// Pre-norm residual layers; `false` applies `LN(FFN(Attn))` with no skip.
    pub residual: bool,
    pub fusion: FusionKind,
    /// Average the common-space code over present modalities instead of summing.
    pub average_common_code: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 1,
            tokens_per_modality: 1,
            ffn_mult: 2,
            task_head_layers: 4,
            conv_channels: vec![16, 32],
            conv_kernel: 5,
            visual_hidden: 64,
            decoder_channels: 32,
            decoder_blocks: 4,
            decoder_width: 8,
            variance_floor: 1e-6,
            residual: true,
            fusion: FusionKind::Decoupled,
            average_common_code: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationTarget {
    /// `P_L ∝ 1 / L_modal`: low-loss modalities should carry high weight.
    InverseLoss,
    /// `P_L = softmax(-L_modal)`.
    NegLossSoftmax,
    /// `P_L = L_modal / Σ L_modal`, the raw loss proportions.
    LossShare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// `½(KL(p‖q) + KL(q‖p))`.
    SymmetricKl,
    /// Jensen-Shannon divergence with a midpoint distribution.
    JensenShannon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_modal: f64,
    pub lambda_cali: f64,
    pub calibration_target: CalibrationTarget,
    pub divergence: Divergence,
    /// Entry clamp applied to both distributions before the divergence.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_modal: 0.1, lambda_cali: 0.1, calibration_target: CalibrationTarget::InverseLoss, divergence: Divergence::SymmetricKl, delta: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-modality probability of hiding a present window during training.
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, mask_prob: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Switch {
    UncertaintyOff,
    FluctuationOff,
    CalibrationOff,
    StaticWeights,
    TiedProjections,
    ReconstructionOff,
    NormalizationOff,
    InputScalingOff,
}

impl Switch {
    pub const ALL: [Switch; 8] = [
        Switch::UncertaintyOff,
        Switch::FluctuationOff,
        Switch::CalibrationOff,
        Switch::StaticWeights,
        Switch::TiedProjections,
        Switch::ReconstructionOff,
        Switch::NormalizationOff,
        Switch::InputScalingOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Switch::UncertaintyOff => "uncertainty-off",
            Switch::FluctuationOff => "fluctuation-off",
            Switch::CalibrationOff => "calibration-off",
            Switch::StaticWeights => "static-weights",
            Switch::TiedProjections => "tied-projections",
            Switch::ReconstructionOff => "reconstruction-off",
            Switch::NormalizationOff => "normalization-off",
            Switch::InputScalingOff => "input-scaling-off",
        }
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Switch::ALL
            .into_iter()
            .find(|sw| sw.name() == s)
            .ok_or_else(|| format!("unknown ablation switch '{s}' (expected one of: {})", Switch::ALL.map(|s| s.name()).join(", ")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub uncertainty_off: bool,
    pub fluctuation_off: bool,
    pub calibration_off: bool,
    pub static_weights: bool,
    pub tied_projections: bool,
    pub reconstruction_off: bool,
    pub normalization_off: bool,
    pub input_scaling_off: bool,
}

impl Ablation {
    pub fn set(&mut self, sw: Switch) {
        *self.flag_mut(sw) = true;
    }

    pub fn is_set(&self, sw: Switch) -> bool {
        match sw {
            Switch::UncertaintyOff => self.uncertainty_off,
            Switch::FluctuationOff => self.fluctuation_off,
            Switch::CalibrationOff => self.calibration_off,
            Switch::StaticWeights => self.static_weights,
            Switch::TiedProjections => self.tied_projections,
            Switch::ReconstructionOff => self.reconstruction_off,
            Switch::NormalizationOff => self.normalization_off,
            Switch::InputScalingOff => self.input_scaling_off,
        }
    }

    fn flag_mut(&mut self, sw: Switch) -> &mut bool {
        match sw {
            Switch::UncertaintyOff => &mut self.uncertainty_off,
            Switch::FluctuationOff => &mut self.fluctuation_off,
            Switch::CalibrationOff => &mut self.calibration_off,
            Switch::StaticWeights => &mut self.static_weights,
            Switch::TiedProjections => &mut self.tied_projections,
            Switch::ReconstructionOff => &mut self.reconstruction_off,
            Switch::NormalizationOff => &mut self.normalization_off,
            Switch::InputScalingOff => &mut self.input_scaling_off,
        }
    }

    pub fn active(&self) -> Vec<Switch> {
        Switch::ALL.into_iter().filter(|s| self.is_set(*s)).collect()
    }

    /// Comma-separated active switches, or `none`.
    pub fn label(&self) -> String {
        let active = self.active();
        if active.is_empty() {
            "none".to_string()
        } else {
            active.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub noise_rates: Vec<f64>,
    pub missing_rates: Vec<f64>,
    pub missing_modalities: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { noise_rates: vec![0.0, 0.5, 1.0], missing_rates: vec![0.0, 0.5], missing_modalities: vec![1] }
    }
}

/// One evaluation condition of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub noise_rate: f64,
    pub missing_rate: f64,
    pub missing_modality: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("noise{:03}_missing{:03}_m{}", (self.noise_rate * 100.0).round() as i64, (self.missing_rate * 100.0).round() as i64, self.missing_modality)
    }
}

impl SweepConfig {
    /// Cartesian product in (missing-modality, missing-rate, noise-rate) order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &missing_modality in &self.missing_modalities {
            for &missing_rate in &self.missing_rates {
                for &noise_rate in &self.noise_rates {
                    out.push(Cell { noise_rate, missing_rate, missing_modality });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub sweep: SweepConfig,
    /// Seed for parameter initialization, batching, and training-time masking.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            sweep: SweepConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.corpus.validate().map_err(|e| ConfigError(e.to_string()))?;
        let m = &self.model;
        let err = |s: String| Err(ConfigError(s));
        if m.d_model == 0 || m.layers == 0 || m.heads == 0 || m.tokens_per_modality == 0 {
            return err("d_model, layers, heads and tokens_per_modality must be positive".into());
        }
        if !m.d_model.is_multiple_of(m.tokens_per_modality) {
            return err(format!("d_model {} not divisible by tokens_per_modality {}", m.d_model, m.tokens_per_modality));
        }
        let token_width = m.d_model / m.tokens_per_modality;
        if !token_width.is_multiple_of(m.heads) {
            return err(format!("token width {token_width} not divisible by heads {}", m.heads));
        }
        if m.decoder_width == 0 || !m.d_model.is_multiple_of(m.decoder_width) {
            return err(format!("d_model {} not divisible by decoder_width {}", m.d_model, m.decoder_width));
        }
        if m.task_head_layers == 0 || m.decoder_blocks == 0 || m.conv_channels.is_empty() {
            return err("task head, decoder and encoder need at least one layer".into());
        }
        if !(m.variance_floor > 0.0) {
            return err("variance_floor must be positive".into());
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return err("batch_size and lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.mask_prob) {
            return err("mask_prob must lie in [0, 1]".into());
        }
        if self.loss.lambda_modal < 0.0 || self.loss.lambda_cali < 0.0 || !(self.loss.delta > 0.0) {
            return err("loss weights must be nonnegative and delta positive".into());
        }
        let n_mod = self.corpus.num_modalities();
        for r in self.sweep.noise_rates.iter().chain(&self.sweep.missing_rates) {
            if !(0.0..=1.0).contains(r) {
                return err(format!("sweep rate {r} outside [0, 1]"));
            }
        }
        if let Some(bad) = self.sweep.missing_modalities.iter().find(|&&m| m >= n_mod) {
            return err(format!("sweep missing modality {bad} out of range for {n_mod} modalities"));
        }
        Ok(())
    }

    /// Effective calibration weight after ablation switches.
    pub fn lambda_cali(&self) -> f64 {
        if self.ablation.calibration_off {
            0.0
        } else {
            self.loss.lambda_cali
        }
    }
}
