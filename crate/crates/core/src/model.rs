//! Source models split into a feature encoder and a linear classifier, plus
//! the multi-source fused predictor.
//!
//! Encoder layout for `hidden_dims = [h1, h2]`:
//!
//! ```text
//! x ─ Dense(in→h1) ─ BN ─ ReLU ─ Dense(h1→h2) ─ BN ─ ReLU ─ Dense(h2→η) ─ BN ─ features
//! ```
//!
//! The hidden BN layers are present when `bn_after_each_hidden` is set and the
//! last one (the bottleneck BN) when `bottleneck_bn` is set. The classifier is
//! a single `Dense(η→N)` followed by softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_forward, linear_forward, BatchNormLayer, BoundBatchNorm, BoundDense, Dense, Mode,
    Param,
};
use crate::tape::{sigmoid, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub bn_after_each_hidden: bool,
    pub bottleneck_bn: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            bn_after_each_hidden: true,
            bottleneck_bn: true,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("input_dim and feature_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// Channel count of every BN site, in forward order.
    pub fn bn_sites(&self) -> Vec<usize> {
        let mut sites = Vec::new();
        if self.bn_after_each_hidden {
            sites.extend(&self.hidden_dims);
        }
        if self.bottleneck_bn {
            sites.push(self.feature_dim);
        }
        sites
    }
}

/// One trained source classifier `g ∘ f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub spec: EncoderSpec,
    pub num_classes: usize,
    pub hidden: Vec<Dense>,
    pub bottleneck: Dense,
    /// BN sites in forward order: hidden layers first, then the bottleneck.
    pub bn_layers: Vec<BatchNormLayer>,
    pub classifier: Dense,
    pub frozen_classifier: bool,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    hidden: Vec<BoundDense>,
    bottleneck: BoundDense,
    bn: Vec<BoundBatchNorm>,
    classifier: BoundDense,
}

/// Result of an encoder pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub features: Var,
    /// Per BN site, the batch mean and variance of its input (train mode only).
    pub bn_stats: Vec<(Var, Var)>,
}

/// Plain-value encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub features: Tensor,
    /// Per BN site `(mean, var)` of its input; empty in eval mode.
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SourceModel {
    pub fn init(spec: EncoderSpec, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut hidden = Vec::new();
        let mut prev = spec.input_dim;
        for &h in &spec.hidden_dims {
            hidden.push(Dense::init(prev, h, rng));
            prev = h;
        }
        let bottleneck = Dense::init(prev, spec.feature_dim, rng);
        let classifier = Dense::init(spec.feature_dim, num_classes, rng);
        let bn_layers = spec.bn_sites().into_iter().map(BatchNormLayer::new).collect();
        Ok(Self {
            spec,
            num_classes,
            hidden,
            bottleneck,
            bn_layers,
            classifier,
            frozen_classifier: false,
        })
    }

    /// All weights and biases zero, BN at its initial state.
    pub fn zeroed(spec: EncoderSpec, num_classes: usize) -> Result<Self> {
        spec.validate()?;
        let mut prev = spec.input_dim;
        let mut hidden = Vec::new();
        for &h in &spec.hidden_dims {
            hidden.push(Dense::zeros(prev, h));
            prev = h;
        }
        let bn_layers = spec.bn_sites().into_iter().map(BatchNormLayer::new).collect();
        Ok(Self {
            bottleneck: Dense::zeros(prev, spec.feature_dim),
            classifier: Dense::zeros(spec.feature_dim, num_classes),
            spec,
            num_classes,
            hidden,
            bn_layers,
            frozen_classifier: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn hidden_bn_index(&self, layer: usize) -> Option<usize> {
        self.spec.bn_after_each_hidden.then_some(layer)
    }

    fn bottleneck_bn_index(&self) -> Option<usize> {
        self.spec.bottleneck_bn.then(|| self.bn_layers.len() - 1)
    }

    /// Copies the parameters onto `tape`. A frozen classifier is always bound
    /// as a constant.
    pub fn bind(&self, tape: &mut Tape, train_encoder: bool, train_classifier: bool) -> BoundModel {
        BoundModel {
            hidden: self.hidden.iter().map(|d| d.bind(tape, train_encoder)).collect(),
            bottleneck: self.bottleneck.bind(tape, train_encoder),
            bn: self.bn_layers.iter().map(|b| b.bind(tape, train_encoder)).collect(),
            classifier: self
                .classifier
                .bind(tape, train_classifier && !self.frozen_classifier),
        }
    }

    pub fn encode_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        mode: Mode,
    ) -> Result<EncoderPass> {
        let xt = tape.value(x);
        if xt.shape().len() != 2 || xt.cols() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: xt.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let mut bn_stats = Vec::new();
        let mut h = x;
        for (i, dense) in bound.hidden.iter().enumerate() {
            h = linear_forward(tape, h, dense.weight, dense.bias)?;
            if let Some(b) = self.hidden_bn_index(i) {
                let out = batchnorm_forward(tape, h, &self.bn_layers[b], &bound.bn[b], mode)?;
                if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
                    bn_stats.push((m, v));
                }
                h = out.output;
            }
            h = tape.relu(h);
        }
        h = linear_forward(tape, h, bound.bottleneck.weight, bound.bottleneck.bias)?;
        if let Some(b) = self.bottleneck_bn_index() {
            let out = batchnorm_forward(tape, h, &self.bn_layers[b], &bound.bn[b], mode)?;
            if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
                bn_stats.push((m, v));
            }
            h = out.output;
        }
        Ok(EncoderPass {
            features: h,
            bn_stats,
        })
    }

    pub fn logits_on(&self, tape: &mut Tape, bound: &BoundModel, features: Var) -> Result<Var> {
        linear_forward(
            tape,
            features,
            bound.classifier.weight,
            bound.classifier.bias,
        )
    }

    pub fn probs_on(&self, tape: &mut Tape, bound: &BoundModel, features: Var) -> Result<Var> {
        let logits = self.logits_on(tape, bound, features)?;
        tape.softmax(logits)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages.
    pub fn track_bn_stats(&mut self, tape: &Tape, pass: &EncoderPass) {
        for (layer, (m, v)) in self.bn_layers.iter_mut().zip(&pass.bn_stats) {
            layer.track(tape.value(*m).data(), tape.value(*v).data());
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundModel) -> Result<()> {
        for (d, b) in self.hidden.iter_mut().zip(&bound.hidden) {
            d.accumulate(grads, b)?;
        }
        self.bottleneck.accumulate(grads, &bound.bottleneck)?;
        for (l, b) in self.bn_layers.iter_mut().zip(&bound.bn) {
            l.accumulate(grads, b)?;
        }
        if !self.frozen_classifier {
            self.classifier.accumulate(grads, &bound.classifier)?;
        }
        Ok(())
    }

    /// Hidden dense layers and their BN parameters (the backbone).
    pub fn backbone_params_mut(&mut self) -> Vec<&mut Param> {
        let n_hidden_bn = if self.spec.bn_after_each_hidden {
            self.hidden.len()
        } else {
            0
        };
        let mut out: Vec<&mut Param> = self.hidden.iter_mut().flat_map(|d| d.params_mut()).collect();
        out.extend(
            self.bn_layers[..n_hidden_bn]
                .iter_mut()
                .flat_map(|b| b.params_mut()),
        );
        out
    }

    /// Bottleneck dense layer and its BN parameters.
    pub fn bottleneck_params_mut(&mut self) -> Vec<&mut Param> {
        let n_hidden_bn = if self.spec.bn_after_each_hidden {
            self.hidden.len()
        } else {
            0
        };
        let mut out: Vec<&mut Param> = self.bottleneck.params_mut().into_iter().collect();
        out.extend(
            self.bn_layers[n_hidden_bn..]
                .iter_mut()
                .flat_map(|b| b.params_mut()),
        );
        out
    }

    /// Every encoder parameter: dense layers in forward order, then BN.
    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .flat_map(|d| d.params_mut())
            .collect();
        out.extend(self.bn_layers.iter_mut().flat_map(|b| b.params_mut()));
        out
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Param> {
        self.classifier.params_mut().into_iter().collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.backbone_params_mut() {
            p.zero_grad();
        }
        for p in self.bottleneck_params_mut() {
            p.zero_grad();
        }
        for p in self.classifier_params_mut() {
            p.zero_grad();
        }
    }

    /// Encodes a batch. Running statistics are not modified.
    pub fn encode(&self, batch: &Tensor, mode: Mode) -> Result<Encoded> {
        if !batch.is_finite() {
            return Err(Error::InvalidValue("non-finite encoder input".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let x = tape.constant(batch.clone());
        let pass = self.encode_on(&mut tape, &bound, x, mode)?;
        Ok(Encoded {
            features: tape.value(pass.features).clone(),
            bn_stats: pass
                .bn_stats
                .iter()
                .map(|(m, v)| {
                    (
                        tape.value(*m).data().to_vec(),
                        tape.value(*v).data().to_vec(),
                    )
                })
                .collect(),
        })
    }

    /// Class probabilities `softmax(g(f(x)))`.
    pub fn predict(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let x = tape.constant(batch.clone());
        let pass = self.encode_on(&mut tape, &bound, x, mode)?;
        let p = self.probs_on(&mut tape, &bound, pass.features)?;
        Ok(tape.value(p).clone())
    }

    /// Probabilities from precomputed features.
    pub fn classify_features(&self, features: &Tensor) -> Result<Tensor> {
        let logits = self.classifier.apply(features)?;
        Tensor::new(logits.shape().to_vec(), crate::tape::softmax_rows(&logits))
    }

    /// Deep copy of the running statistics of every BN site.
    pub fn extract_bn_stats(&self) -> BnStatsSnapshot {
        BnStatsSnapshot {
            layers: self
                .bn_layers
                .iter()
                .map(|l| LayerStats {
                    mean: l.running_mean.clone(),
                    var: l.running_var.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running BN statistics of one source model, captured before transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStatsSnapshot {
    layers: Vec<LayerStats>,
}

impl BnStatsSnapshot {
    pub fn new(layers: Vec<LayerStats>) -> Result<Self> {
        for l in &layers {
            if l.mean.len() != l.var.len() {
                return Err(Error::Contract("mean/var length mismatch".into()));
            }
            if l.var.iter().any(|v| *v < 0.0) {
                return Err(Error::Contract("negative running variance".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerStats] {
        &self.layers
    }
}

/// Per-source mixing weights ζ.
///
/// `raw` is the value after the latest gradient step, `projected` the value
/// after the sigmoid-and-normalize projection. `projected` lies on the
/// probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights {
    pub raw: Vec<f64>,
    pub projected: Vec<f64>,
}

impl MixingWeights {
    /// `ζ_k = 1/n`.
    pub fn uniform(n: usize) -> Self {
        let v = vec![1.0 / n as f64; n];
        Self {
            raw: v.clone(),
            projected: v,
        }
    }

    /// Uses `weights` as-is; they must already lie on the simplex.
    pub fn from_simplex(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights)?;
        Ok(Self {
            raw: weights.clone(),
            projected: weights,
        })
    }

    /// Records `raw` and projects it.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let projected = zeta_project(&raw);
        Self { raw, projected }
    }

    pub fn len(&self) -> usize {
        self.projected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projected.is_empty()
    }
}

/// Elementwise sigmoid, then division by the sum.
pub fn zeta_project(raw: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = raw.iter().map(|&v| sigmoid(v)).collect();
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract("empty mixing weights".into()));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// `Σ_j ζ_j p_j` for per-source probability rows recorded on a tape.
pub fn fuse_on(tape: &mut Tape, per_source: &[Var], zeta: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &p) in per_source.iter().enumerate() {
        let z = tape.index(zeta, j)?;
        let term = tape.mul(p, z)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no sources to fuse".into()))
}

/// `Σ_j ζ_j · predict(model_j, batch)`.
pub fn fuse_predict(
    models: &[SourceModel],
    zeta: &MixingWeights,
    batch: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    if models.len() != zeta.len() {
        return Err(Error::Contract(format!(
            "{} models but {} mixing weights",
            models.len(),
            zeta.len()
        )));
    }
    check_simplex(&zeta.projected)?;
    let mut acc: Option<Tensor> = None;
    for (m, &z) in models.iter().zip(&zeta.projected) {
        let p = m.predict(batch, mode)?;
        let term = p.map(|v| v * z);
        acc = Some(match acc {
            None => term,
            Some(mut a) => {
                a.add_assign(&term)?;
                a
            }
        });
    }
    acc.ok_or_else(|| Error::Contract("no sources to fuse".into()))
}

/// The adapted models combined by the learned mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTargetModel {
    pub models: Vec<SourceModel>,
    pub zeta: MixingWeights,
}

impl FusedTargetModel {
    pub fn new(models: Vec<SourceModel>, zeta: MixingWeights) -> Result<Self> {
        check_compatible(&models)?;
        if models.len() != zeta.len() {
            return Err(Error::Contract("model count differs from weight count".into()));
        }
        Ok(Self { models, zeta })
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        fuse_predict(&self.models, &self.zeta, batch, Mode::Eval)
    }

    pub fn num_classes(&self) -> usize {
        self.models[0].num_classes
    }
}

/// All models must agree on class count and feature width.
pub fn check_compatible(models: &[SourceModel]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("at least one source model is required".into()))?;
    for m in models {
        if m.num_classes != first.num_classes {
            return Err(Error::Contract(format!(
                "class count mismatch across sources: {} vs {}",
                first.num_classes, m.num_classes
            )));
        }
        if m.spec.feature_dim != first.spec.feature_dim {
            return Err(Error::Contract("feature_dim mismatch across sources".into()));
        }
    }
    Ok(())
}
