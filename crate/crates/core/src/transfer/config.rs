//! Run configuration: one TOML document with a section per module.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::Lambdas;
use crate::model::EncoderSpec;
use crate::optim::Sgd;
use crate::synth::SynthSpec;

/// When pseudo-labels are recomputed during transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelRefresh {
    PerEpoch,
    PerIteration,
}

/// Whether BN running statistics follow the target data during transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnTargetUpdate {
    /// Running statistics stay at their source values.
    Frozen,
    /// Train-mode passes over target batches update the running statistics.
    Running,
}

/// How the paired feature-matching term is reduced over the
/// task-irrelevant set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiReduction {
    /// Sum over every pair (mini-batch sums rescaled by `n_ti / |batch|`).
    Sum,
    /// The sum divided by `n_ti`: the mean over pairs.
    Mean,
}

/// Switches for the optional loss terms. A disabled term has weight zero
/// regardless of its λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub ti: bool,
    pub d: bool,
    pub pl: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            ti: true,
            d: true,
            pl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub lambda_ti: f64,
    pub lambda_d: f64,
    pub lambda_pl: f64,
    pub lambda_ad: f64,
    pub lambda_adv: f64,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub transfer_epochs: usize,
    pub lr_encoder: f64,
    pub lr_head_and_zeta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub pseudo_label_refresh: PseudoLabelRefresh,
    pub bn_target_update: BnTargetUpdate,
    pub ti_reduction: TiReduction,
    pub toggles: LossToggles,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            lambda_ti: 0.3,
            lambda_d: 0.3,
            lambda_pl: 0.3,
            lambda_ad: 10.0,
            lambda_adv: 1.0,
            batch_size: 32,
            source_epochs: 20,
            transfer_epochs: 15,
            lr_encoder: 1e-3,
            lr_head_and_zeta: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            label_smoothing: 0.1,
            seed: 0,
            pseudo_label_refresh: PseudoLabelRefresh::PerEpoch,
            bn_target_update: BnTargetUpdate::Frozen,
            ti_reduction: TiReduction::Mean,
            toggles: LossToggles::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_ti", self.lambda_ti),
            ("lambda_d", self.lambda_d),
            ("lambda_pl", self.lambda_pl),
            ("lambda_ad", self.lambda_ad),
            ("lambda_adv", self.lambda_adv),
        ];
        for (name, v) in lambdas {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_head_and_zeta", self.lr_head_and_zeta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Sgd::new(self.momentum, self.weight_decay)?;
        Ok(())
    }

    /// Non-fatal remarks, e.g. a modality-specific λ outside (0.1, 0.5).
    pub fn warnings(&self) -> Vec<String> {
        [("lambda_ti", self.lambda_ti), ("lambda_d", self.lambda_d)]
            .into_iter()
            .filter(|&(_, v)| v != 0.0 && !(v > 0.1 && v < 0.5))
            .map(|(name, v)| format!("{name} = {v} is outside the usual range (0.1, 0.5)"))
            .collect()
    }

    /// λ values after applying the toggles.
    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            ti: if self.toggles.ti { self.lambda_ti } else { 0.0 },
            d: if self.toggles.d { self.lambda_d } else { 0.0 },
            pl: if self.toggles.pl { self.lambda_pl } else { 0.0 },
        }
    }

    pub fn optimizer(&self) -> Result<Sgd> {
        Sgd::new(self.momentum, self.weight_decay)
    }
}

/// The full configuration file.
///
/// ```toml
/// [data]
/// num_tr_classes = 6
///
/// [model]
/// hidden_dims = [64, 64]
///
/// [transfer]
/// lambda_ti = 0.3
/// ```
///
/// Every key is optional; missing keys take their defaults. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub model: EncoderSpec,
    pub transfer: TransferConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.transfer.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim {} differs from data.input_dim {}",
                self.model.input_dim, self.data.input_dim
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}
