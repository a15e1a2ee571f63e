//! Accuracy and the four-arm ablation.

use super::engine::transfer;
use super::{LossToggles, TransferConfig};
use crate::error::{Error, Result};
use crate::model::{FusedTargetModel, SourceModel};
use crate::synth::{LabeledData, PairedTIDataset, UnlabeledData};
use crate::tensor::Tensor;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cannot score an empty set".into()));
    }
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of the fused model on labeled held-out data.
pub fn evaluate(model: &FusedTargetModel, data: &LabeledData) -> Result<f64> {
    accuracy(&model.predict(&data.inputs())?, &data.labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    Ma,
    MaD,
    MaTi,
    MaDTi,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [Self::Ma, Self::MaD, Self::MaTi, Self::MaDTi];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ma => "ma",
            Self::MaD => "ma+d",
            Self::MaTi => "ma+ti",
            Self::MaDTi => "ma+d+ti",
        }
    }

    /// `config` with the modality-specific terms switched for this arm.
    pub fn apply(self, config: &TransferConfig) -> TransferConfig {
        let (ti, d) = match self {
            Self::Ma => (false, false),
            Self::MaD => (false, true),
            Self::MaTi => (true, false),
            Self::MaDTi => (true, true),
        };
        TransferConfig {
            toggles: LossToggles {
                ti,
                d,
                ..config.toggles
            },
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub accuracy: f64,
    pub zeta: Vec<f64>,
}

/// Runs [`transfer`] once per arm with a shared seed and scores each result.
pub fn ablate(
    sources: &[SourceModel],
    target: &UnlabeledData,
    target_labels: &LabeledData,
    ti: &PairedTIDataset,
    config: &TransferConfig,
) -> Result<Vec<AblationRow>> {
    AblationArm::ALL
        .iter()
        .map(|&arm| {
            let out = transfer(sources, target, ti, &arm.apply(config), &mut ())?;
            Ok(AblationRow {
                arm,
                accuracy: evaluate(&out.model, target_labels)?,
                zeta: out.model.zeta.projected.clone(),
            })
        })
        .collect()
}
