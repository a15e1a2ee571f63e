//! Supervised training of one source model.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_schedule, TransferConfig};
use crate::error::{Error, Result};
use crate::loss::PROB_FLOOR;
use crate::model::{EncoderSpec, SourceModel};
use crate::nn::Mode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Labeled inputs for [`train_source`].
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatchSource<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
}

/// Smoothed targets: `1 − α` on the true class plus `α / N` everywhere.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, alpha: f64) -> Tensor {
    let off = alpha / num_classes as f64;
    let mut t = Tensor::full(&[labels.len(), num_classes], off);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * num_classes + y] += 1.0 - alpha;
    }
    t
}

/// `−(1/B) Σ_i Σ_k q_ik log p_ik` with smoothed `q`.
pub fn label_smoothed_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    let (b, n) = (tape.value(probs).rows(), tape.value(probs).cols());
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Contract(format!("label {bad} outside [0, {n})")));
    }
    let q = tape.constant(smoothed_targets(labels, n, alpha));
    let clamped = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.ln(clamped);
    let prod = tape.mul(q, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Index batches of one epoch. The last partial batch is dropped when it has
/// fewer than two rows, since train-mode BN needs at least two.
pub(crate) fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .collect()
}

/// Trains encoder and classifier with label-smoothed cross entropy and SGD.
///
/// The backbone uses `lr_encoder`, the bottleneck and classifier use
/// `lr_head_and_zeta`; both follow [`lr_schedule`]. Running BN statistics are
/// updated from every batch.
pub fn train_source(
    data: LabeledBatchSource<'_>,
    spec: EncoderSpec,
    num_classes: usize,
    config: &TransferConfig,
) -> Result<SourceModel> {
    config.validate()?;
    let n = data.inputs.rows();
    if n < 2 || data.labels.len() != n {
        return Err(Error::Contract(format!(
            "need at least two labeled rows, got {n} rows and {} labels",
            data.labels.len()
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {num_classes})")));
    }
    for k in 0..num_classes {
        if !data.labels.contains(&k) {
            warn!("class {k} has no training samples");
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SourceModel::init(spec, num_classes, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let sgd = config.optimizer()?;

    let mut order: Vec<usize> = (0..n).collect();
    let per_epoch = epoch_batches(&order, config.batch_size).len();
    let total = (per_epoch * config.source_epochs).max(1);
    let mut step = 0usize;

    for epoch in 0..config.source_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in epoch_batches(&order, config.batch_size) {
            let p = step as f64 / total as f64;
            let x = data.inputs.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true, true);
            let xv = tape.constant(x);
            let pass = model.encode_on(&mut tape, &bound, xv, Mode::Train)?;
            let probs = model.probs_on(&mut tape, &bound, pass.features)?;
            let loss = label_smoothed_cross_entropy(&mut tape, probs, &y, config.label_smoothing)?;
            epoch_loss += tape.value(loss).item();
            let grads = tape.backward(loss)?;

            model.zero_grad();
            model.accumulate(&grads, &bound)?;
            model.track_bn_stats(&tape, &pass);
            sgd.step(model.backbone_params_mut(), lr_schedule(config.lr_encoder, p)?)?;
            let head_lr = lr_schedule(config.lr_head_and_zeta, p)?;
            sgd.step(model.bottleneck_params_mut(), head_lr)?;
            sgd.step(model.classifier_params_mut(), head_lr)?;
            step += 1;
        }
        debug!(
            "source epoch {}: mean loss {:.4}",
            epoch + 1,
            epoch_loss / per_epoch.max(1) as f64
        );
    }
    model.zero_grad();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_rows_sum_to_one() {
        let t = smoothed_targets(&[0, 2], 3, 0.1);
        for i in 0..2 {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!((t.get(1, 2) - (0.9 + 0.1 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn no_smoothing_is_plain_cross_entropy() {
        let p = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let l = label_smoothed_cross_entropy(&mut tape, pv, &[1, 0], 0.0).unwrap();
        let want = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn short_tail_batch_is_dropped() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4);
        assert_eq!(b.len(), 2);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(epoch_batches(&order, 4).len(), 3);
    }
}
