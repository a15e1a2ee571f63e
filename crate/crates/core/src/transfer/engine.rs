//! The transfer loop with paired task-irrelevant data.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::source::epoch_batches;
use super::{
    lr_schedule, BnTargetUpdate, PseudoLabelRefresh, TiReduction, TrainState,
    TransferConfig,
};
use crate::error::{Error, Result};
use crate::loss::{
    loss_distribution, loss_entropy, loss_diversity, loss_pseudo, loss_ti, precompute_ti_features,
    total_objective, Lambdas, LossReport, LossTerms, TIFeatureCache,
};
use crate::model::{
    check_compatible, check_simplex, fuse_on, zeta_project, BnStatsSnapshot, BoundModel,
    EncoderPass, FusedTargetModel, MixingWeights, SourceModel,
};
use crate::nn::{Mode, Param};
use crate::optim::Sgd;
use crate::pseudo::compute_pseudo_labels;
use crate::synth::{PairedTIDataset, UnlabeledData};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// One-off computations done before the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precompute {
    TIFeatureCache,
    BnSnapshots,
}

/// Logged values of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// 1-based.
    pub epoch: usize,
    pub report: LossReport,
    pub zeta: Vec<f64>,
    /// Scheduled encoder learning rate used for this iteration.
    pub lr: f64,
}

/// Hooks into a running transfer. All methods default to doing nothing.
pub trait TransferObserver {
    fn on_precompute(&mut self, _what: Precompute) {}

    fn on_iteration(&mut self, _record: &IterationRecord, _models: &[SourceModel]) -> Result<()> {
        Ok(())
    }

    /// Called after each epoch with the current adapted models.
    fn on_epoch_end(&mut self, _epoch: usize, _model: &FusedTargetModel) -> Result<()> {
        Ok(())
    }
}

impl TransferObserver for () {}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: FusedTargetModel,
    pub history: Vec<IterationRecord>,
    pub state: TrainState,
}

/// Endless shuffled pass over `0..n`.
pub(crate) struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next_batch(&mut self, rng: &mut ChaCha8Rng, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// A batch encoded by every source on one tape.
pub(crate) struct SourcePasses {
    pub bounds: Vec<BoundModel>,
    pub passes: Vec<EncoderPass>,
}

/// State shared by the paired and unpaired loops.
pub(crate) struct Run<'a> {
    pub config: &'a TransferConfig,
    pub lambdas: Lambdas,
    pub models: Vec<SourceModel>,
    /// Holds the current mixing weights; after an optimizer step it briefly
    /// holds the raw values before projection.
    pub zeta: Param,
    pub raw_zeta: Vec<f64>,
    pub sgd: Sgd,
    pub target: &'a Tensor,
    pub state: TrainState,
    pub labels: Option<Vec<usize>>,
    pub history: Vec<IterationRecord>,
}

impl<'a> Run<'a> {
    pub(crate) fn new(
        sources: &[SourceModel],
        target: &'a UnlabeledData,
        config: &'a TransferConfig,
        lambdas: Lambdas,
    ) -> Result<Self> {
        config.validate()?;
        check_compatible(sources)?;
        let spec0 = &sources[0].spec;
        if sources.iter().any(|m| m.spec.input_dim != spec0.input_dim) {
            return Err(Error::Config("input_dim mismatch across sources".into()));
        }
        let target = target.inputs();
        if target.rows() < 2 {
            return Err(Error::DegenerateBatch(
                "transfer needs at least two target samples".into(),
            ));
        }
        if target.cols() != spec0.input_dim {
            return Err(Error::Shape {
                op: "transfer",
                lhs: target.shape().to_vec(),
                rhs: vec![spec0.input_dim],
            });
        }
        let mut models = sources.to_vec();
        for m in &mut models {
            m.frozen_classifier = true;
            m.zero_grad();
        }
        let batch = config.batch_size.min(target.rows());
        let order: Vec<usize> = (0..target.rows()).collect();
        let iters_per_epoch = epoch_batches(&order, batch).len();

        let mut target_rng = ChaCha8Rng::seed_from_u64(config.seed);
        target_rng.set_stream(2);
        let mut ti_rng = ChaCha8Rng::seed_from_u64(config.seed);
        ti_rng.set_stream(3);

        let n = models.len();
        let init = MixingWeights::uniform(n);
        Ok(Self {
            config,
            lambdas,
            models,
            zeta: Param::new(Tensor::vector(init.projected.clone())),
            raw_zeta: init.raw,
            sgd: config.optimizer()?,
            target,
            state: TrainState {
                epoch: 0,
                iteration: 0,
                total_iterations: iters_per_epoch * config.transfer_epochs,
                target_rng,
                ti_rng,
                report: None,
                zeta_history: Vec::new(),
            },
            labels: None,
            history: Vec::new(),
        })
    }

    pub(crate) fn batch_size(&self) -> usize {
        self.config.batch_size.min(self.target.rows())
    }

    pub(crate) fn zeta_values(&self) -> &[f64] {
        self.zeta.value.data()
    }

    pub(crate) fn snapshots(&self) -> Vec<BnStatsSnapshot> {
        self.models.iter().map(SourceModel::extract_bn_stats).collect()
    }

    pub(crate) fn refresh_labels(&mut self) -> Result<()> {
        if self.lambdas.pl != 0.0 {
            let zeta = self.zeta_values().to_vec();
            self.labels = Some(compute_pseudo_labels(&self.models, &zeta, self.target)?.labels);
        }
        Ok(())
    }

    /// Binds every model (encoders trainable, classifiers constant) and
    /// encodes `x` in train mode.
    pub(crate) fn encode_all(&self, tape: &mut Tape, x: &Tensor) -> Result<SourcePasses> {
        let xv = tape.constant(x.clone());
        let mut bounds = Vec::with_capacity(self.models.len());
        let mut passes = Vec::with_capacity(self.models.len());
        for m in &self.models {
            let b = m.bind(tape, true, false);
            passes.push(m.encode_on(tape, &b, xv, Mode::Train)?);
            bounds.push(b);
        }
        Ok(SourcePasses { bounds, passes })
    }

    /// Information maximization and pseudo-label terms on the fused
    /// prediction of the target batch. Returns `(ent, div, pl)`.
    pub(crate) fn agnostic_terms(
        &self,
        tape: &mut Tape,
        target: &SourcePasses,
        zeta: Var,
        batch: &[usize],
    ) -> Result<(Var, Var, Var)> {
        let mut probs = Vec::with_capacity(self.models.len());
        for ((m, b), p) in self.models.iter().zip(&target.bounds).zip(&target.passes) {
            probs.push(m.probs_on(tape, b, p.features)?);
        }
        let fused = fuse_on(tape, &probs, zeta)?;
        let ent = loss_entropy(tape, fused)?;
        let div = loss_diversity(tape, fused)?;
        let pl = match (&self.labels, self.lambdas.pl != 0.0) {
            (Some(all), true) => {
                let picked: Vec<usize> = batch.iter().map(|&i| all[i]).collect();
                loss_pseudo(tape, fused, &picked)?
            }
            _ => tape.constant(Tensor::scalar(0.0)),
        };
        Ok((ent, div, pl))
    }

    pub(crate) fn distribution_term(
        &self,
        tape: &mut Tape,
        snapshots: &[BnStatsSnapshot],
        target: &SourcePasses,
        zeta: Var,
    ) -> Result<Var> {
        if self.lambdas.d == 0.0 {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let stats: Vec<Vec<(Var, Var)>> = target.passes.iter().map(|p| p.bn_stats.clone()).collect();
        loss_distribution(tape, snapshots, &stats, zeta)
    }

    /// Accumulates gradients from every listed pass, steps every parameter
    /// group, projects ζ and optionally tracks BN statistics.
    pub(crate) fn apply_step(
        &mut self,
        tape: &Tape,
        grads: &Gradients,
        zeta_var: Var,
        passes: &[&SourcePasses],
        target_pass: &SourcePasses,
    ) -> Result<f64> {
        let p = self.state.progress();
        let lr_enc = lr_schedule(self.config.lr_encoder, p)?;
        let lr_head = lr_schedule(self.config.lr_head_and_zeta, p)?;

        for (j, m) in self.models.iter_mut().enumerate() {
            m.zero_grad();
            for sp in passes {
                m.accumulate(grads, &sp.bounds[j])?;
            }
            self.sgd.step(m.backbone_params_mut(), lr_enc)?;
            self.sgd.step(m.bottleneck_params_mut(), lr_head)?;
            if self.config.bn_target_update == BnTargetUpdate::Running {
                m.track_bn_stats(tape, &target_pass.passes[j]);
            }
        }

        self.zeta.zero_grad();
        self.zeta.accumulate(grads, zeta_var)?;
        self.sgd.step([&mut self.zeta], lr_head)?;
        self.raw_zeta = self.zeta.value.data().to_vec();
        let projected = zeta_project(&self.raw_zeta);
        check_simplex(&projected)?;
        self.zeta.value = Tensor::vector(projected);
        Ok(lr_enc)
    }

    pub(crate) fn record(
        &mut self,
        report: LossReport,
        lr: f64,
        observer: &mut dyn TransferObserver,
    ) -> Result<()> {
        self.state.iteration += 1;
        let zeta = self.zeta_values().to_vec();
        let record = IterationRecord {
            iteration: self.state.iteration,
            epoch: self.state.epoch + 1,
            report,
            zeta: zeta.clone(),
            lr,
        };
        observer.on_iteration(&record, &self.models)?;
        self.state.report = Some(report);
        self.state.zeta_history.push(zeta);
        self.history.push(record);
        Ok(())
    }

    pub(crate) fn mixing(&self) -> MixingWeights {
        MixingWeights {
            raw: self.raw_zeta.clone(),
            projected: self.zeta_values().to_vec(),
        }
    }

    pub(crate) fn fused(&self) -> Result<FusedTargetModel> {
        FusedTargetModel::new(self.models.clone(), self.mixing())
    }

    /// Target batches of the next epoch.
    pub(crate) fn epoch_order(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.target.rows()).collect();
        order.shuffle(&mut self.state.target_rng);
        epoch_batches(&order, self.batch_size())
            .into_iter()
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub(crate) fn finish(self) -> Result<TransferOutcome> {
        let model = self.fused()?;
        Ok(TransferOutcome {
            model,
            history: self.history,
            state: self.state,
        })
    }
}

/// Adapts the source encoders and learns ζ on unlabeled target data.
///
/// Classifiers stay frozen. The task-irrelevant cache and BN snapshots are
/// taken once before the first iteration. An empty `ti` set disables the
/// feature-matching term with a warning.
pub fn transfer(
    sources: &[SourceModel],
    target: &UnlabeledData,
    ti: &PairedTIDataset,
    config: &TransferConfig,
    observer: &mut dyn TransferObserver,
) -> Result<TransferOutcome> {
    let mut lambdas = config.lambdas();
    if ti.is_empty() && lambdas.ti != 0.0 {
        warn!("task-irrelevant set is empty; running without the feature-matching term");
        lambdas.ti = 0.0;
    }
    for w in config.warnings() {
        warn!("{w}");
    }
    let mut run = Run::new(sources, target, config, lambdas)?;

    let ti_target = ti.target.to_tensor();
    let cache: Option<TIFeatureCache> = if lambdas.ti != 0.0 {
        let c = precompute_ti_features(&run.models, &ti.source.to_tensor())?;
        observer.on_precompute(Precompute::TIFeatureCache);
        Some(c)
    } else {
        None
    };
    let snapshots = run.snapshots();
    observer.on_precompute(Precompute::BnSnapshots);
    let mut ti_cycle = Cycler::new(ti.len());

    for epoch in 0..config.transfer_epochs {
        run.state.epoch = epoch;
        if config.pseudo_label_refresh == PseudoLabelRefresh::PerEpoch {
            run.refresh_labels()?;
        }
        for batch in run.epoch_order() {
            if config.pseudo_label_refresh == PseudoLabelRefresh::PerIteration {
                run.refresh_labels()?;
            }
            let x = run.target.select_rows(&batch)?;
            let mut tape = Tape::new();
            let zeta = run.zeta.bind(&mut tape, true);
            let tp = run.encode_all(&mut tape, &x)?;
            let (ent, div, pl) = run.agnostic_terms(&mut tape, &tp, zeta, &batch)?;
            let d = run.distribution_term(&mut tape, &snapshots, &tp, zeta)?;

            let mut ti_pass = None;
            let ti_term = match &cache {
                Some(cache) => {
                    let idx = ti_cycle.next_batch(&mut run.state.ti_rng, run.config.batch_size);
                    let xt = ti_target.select_rows(&idx)?;
                    let sp = run.encode_all(&mut tape, &xt)?;
                    let feats: Vec<Var> = sp.passes.iter().map(|p| p.features).collect();
                    let mut l = loss_ti(&mut tape, cache, &feats, zeta, &idx)?;
                    if config.ti_reduction == TiReduction::Mean {
                        l = tape.scale(l, 1.0 / cache.num_samples() as f64);
                    }
                    ti_pass = Some(sp);
                    l
                }
                None => tape.constant(Tensor::scalar(0.0)),
            };

            let terms = LossTerms {
                ti: ti_term,
                d,
                ent,
                div,
                pl,
            };
            let (total, report) = total_objective(&mut tape, terms, lambdas)?;
            if !report.total.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "objective became non-finite at iteration {}",
                    run.state.iteration + 1
                )));
            }
            let grads = tape.backward(total)?;
            let mut passes = vec![&tp];
            if let Some(sp) = &ti_pass {
                passes.push(sp);
            }
            let lr = run.apply_step(&tape, &grads, zeta, &passes, &tp)?;
            run.record(report, lr, observer)?;
        }
        observer.on_epoch_end(epoch + 1, &run.fused()?)?;
    }
    run.finish()
}
