//! Transfer with unpaired task-irrelevant data and a domain discriminator.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Cycler, Precompute, Run, TransferObserver, TransferOutcome};
use super::{lr_schedule, PseudoLabelRefresh, TransferConfig};
use crate::error::{Error, Result};
use crate::loss::{
    loss_adv_discriminator, loss_true_discriminator, precompute_ti_features, weighted_features,
    weighted_features_on, Discriminator, LossReport,
};
use crate::model::{MixingWeights, SourceModel};
use crate::nn::Mode;
use crate::synth::UnlabeledData;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct UnpairedOutcome {
    pub transfer: TransferOutcome,
    pub discriminator: Discriminator,
}

/// `Σ_j ζ_j f_j(x)` with every encoder in eval mode.
pub fn fused_features(models: &[SourceModel], zeta: &MixingWeights, x: &Tensor) -> Result<Tensor> {
    let per: Vec<Tensor> = models
        .iter()
        .map(|m| m.encode(x, Mode::Eval).map(|e| e.features))
        .collect::<Result<_>>()?;
    weighted_features(&per, &zeta.projected)
}

/// Fraction of rows the discriminator puts on the right side of 0.5, with
/// `source` rows labeled 1 and `target` rows labeled 0.
pub fn discriminator_accuracy(d: &Discriminator, source: &Tensor, target: &Tensor) -> Result<f64> {
    let n = source.rows() + target.rows();
    if n == 0 {
        return Err(Error::Contract("no features to classify".into()));
    }
    let s = d.predict(source)?;
    let t = d.predict(target)?;
    let hits = s.data().iter().filter(|&&p| p > 0.5).count()
        + t.data().iter().filter(|&&p| p <= 0.5).count();
    Ok(hits as f64 / n as f64)
}

/// Alternates a discriminator step on `L_TD` with an encoder and ζ step on
/// `L_ma + λ_adv·λ_AD·L_AD + λ_d·L_d`.
///
/// Source-side features of `ti_source` come from the original encoders and
/// are computed once. Target-side features of `ti_target` come from the
/// adapted encoders in train mode. The two sets need not be aligned or even
/// the same size. With `λ_adv = 0` the encoder trajectory equals a paired run
/// with `λ_TI = 0`.
pub fn transfer_unpaired(
    sources: &[SourceModel],
    target: &UnlabeledData,
    ti_source: &Tensor,
    ti_target: &Tensor,
    config: &TransferConfig,
    observer: &mut dyn TransferObserver,
) -> Result<UnpairedOutcome> {
    let mut lambdas = config.lambdas();
    lambdas.ti = 0.0;
    let mut adv_weight = config.lambda_adv * config.lambda_ad;
    if (ti_source.rows() == 0 || ti_target.rows() < 2) && adv_weight != 0.0 {
        warn!("unpaired task-irrelevant data is missing; running without the adversarial term");
        adv_weight = 0.0;
    }
    let mut run = Run::new(sources, target, config, lambdas)?;

    let mut d_rng = ChaCha8Rng::seed_from_u64(config.seed);
    d_rng.set_stream(4);
    let mut disc = Discriminator::init(run.models[0].feature_dim(), &mut d_rng);

    let cache = if adv_weight != 0.0 {
        let c = precompute_ti_features(&run.models, ti_source)?;
        observer.on_precompute(Precompute::TIFeatureCache);
        Some(c)
    } else {
        None
    };
    let snapshots = run.snapshots();
    observer.on_precompute(Precompute::BnSnapshots);
    let mut src_cycle = Cycler::new(ti_source.rows());
    let mut tgt_cycle = Cycler::new(ti_target.rows());

    for epoch in 0..config.transfer_epochs {
        run.state.epoch = epoch;
        if config.pseudo_label_refresh == PseudoLabelRefresh::PerEpoch {
            run.refresh_labels()?;
        }
        for batch in run.epoch_order() {
            if config.pseudo_label_refresh == PseudoLabelRefresh::PerIteration {
                run.refresh_labels()?;
            }
            let p = run.state.progress();
            let x = run.target.select_rows(&batch)?;
            let mut tape = Tape::new();
            let zeta = run.zeta.bind(&mut tape, true);
            let tp = run.encode_all(&mut tape, &x)?;
            let (ent, div, pl) = run.agnostic_terms(&mut tape, &tp, zeta, &batch)?;
            let d = run.distribution_term(&mut tape, &snapshots, &tp, zeta)?;

            let mut l_td = None;
            let mut l_ad = None;
            let mut adv_pass = None;
            let mut adv_term: Option<Var> = None;
            if let Some(cache) = &cache {
                let src_idx = src_cycle.next_batch(&mut run.state.ti_rng, config.batch_size);
                let tgt_idx = tgt_cycle.next_batch(&mut run.state.ti_rng, config.batch_size);
                let src_feats = cache.weighted(run.zeta_values(), &src_idx)?;

                let sp = run.encode_all(&mut tape, &ti_target.select_rows(&tgt_idx)?)?;
                let feats: Vec<Var> = sp.passes.iter().map(|p| p.features).collect();
                let tgt_fused = weighted_features_on(&mut tape, &feats, zeta)?;

                // Discriminator step on detached features.
                let td = {
                    let mut dt = Tape::new();
                    let bd = disc.bind(&mut dt, true);
                    let s = dt.constant(src_feats);
                    let t = dt.constant(tape.value(tgt_fused).clone());
                    let ds = disc.forward_on(&mut dt, &bd, s)?;
                    let dtg = disc.forward_on(&mut dt, &bd, t)?;
                    let loss = loss_true_discriminator(&mut dt, ds, dtg)?;
                    let g = dt.backward(loss)?;
                    for prm in disc.params_mut() {
                        prm.zero_grad();
                    }
                    disc.accumulate(&g, &bd)?;
                    run.sgd
                        .step(disc.params_mut(), lr_schedule(config.lr_head_and_zeta, p)?)?;
                    dt.value(loss).item()
                };
                l_td = Some(td);

                // Encoder side: the updated discriminator is a constant.
                let bd = disc.bind(&mut tape, false);
                let dtg = disc.forward_on(&mut tape, &bd, tgt_fused)?;
                let ad = loss_adv_discriminator(&mut tape, dtg)?;
                l_ad = Some(tape.value(ad).item());
                adv_term = Some(ad);
                adv_pass = Some(sp);
            }

            let mut total = tape.sub(ent, div)?;
            for (var, w) in [(pl, lambdas.pl), (d, lambdas.d)] {
                if w != 0.0 {
                    let t = tape.scale(var, w);
                    total = tape.add(total, t)?;
                }
            }
            if let Some(ad) = adv_term {
                let t = tape.scale(ad, adv_weight);
                total = tape.add(total, t)?;
            }
            let v = |x: Var| tape.value(x).item();
            let mut report = LossReport::compose(0.0, v(d), v(ent), v(div), v(pl), lambdas);
            report.l_td = l_td;
            report.l_ad = l_ad;
            if let (Some(td), Some(ad)) = (l_td, l_ad) {
                report.l_adv = Some(td + config.lambda_ad * ad);
                report.l_ms += adv_weight * ad;
            }
            report.total = v(total);
            if !report.total.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "objective became non-finite at iteration {}",
                    run.state.iteration + 1
                )));
            }

            let grads = tape.backward(total)?;
            let mut passes = vec![&tp];
            if let Some(sp) = &adv_pass {
                passes.push(sp);
            }
            let lr = run.apply_step(&tape, &grads, zeta, &passes, &tp)?;
            run.record(report, lr, observer)?;
        }
        observer.on_epoch_end(epoch + 1, &run.fused()?)?;
    }
    Ok(UnpairedOutcome {
        transfer: run.finish()?,
        discriminator: disc,
    })
}
