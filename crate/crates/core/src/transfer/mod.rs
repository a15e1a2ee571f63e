//! Source training, the transfer loop, its unpaired adversarial variant,
//! evaluation and the ablation harness.

mod config;
mod engine;
mod eval;
mod source;
mod unpaired;

pub use config::{
    BnTargetUpdate, ExperimentConfig, LossToggles, PseudoLabelRefresh, TiReduction, TransferConfig,
};
pub use engine::{transfer, IterationRecord, Precompute, TransferObserver, TransferOutcome};
pub use eval::{ablate, accuracy, evaluate, AblationArm, AblationRow};
pub use source::{label_smoothed_cross_entropy, smoothed_targets, train_source, LabeledBatchSource};
pub use unpaired::{discriminator_accuracy, fused_features, transfer_unpaired, UnpairedOutcome};

pub use crate::model::zeta_project;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::LossReport;

/// `θ₀ · (1 + 10p)^(−3/4)` for training progress `p ∈ [0, 1]`.
pub fn lr_schedule(theta0: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidValue(format!("progress {p} outside [0, 1]")));
    }
    Ok(theta0 * (1.0 + 10.0 * p).powf(-0.75))
}

/// Progress of one transfer run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Current epoch, starting at 0.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: usize,
    pub total_iterations: usize,
    /// Drives target batch order.
    pub target_rng: ChaCha8Rng,
    /// Drives task-irrelevant batch order.
    pub ti_rng: ChaCha8Rng,
    pub report: Option<LossReport>,
    /// ζ after every completed iteration.
    pub zeta_history: Vec<Vec<f64>>,
}

impl TrainState {
    /// `completed_iterations / total_iterations`.
    pub fn progress(&self) -> f64 {
        if self.total_iterations == 0 {
            return 0.0;
        }
        (self.iteration as f64 / self.total_iterations as f64).min(1.0)
    }
}
