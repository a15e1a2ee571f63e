//! Loss terms of the transfer objective.
//!
//! Every function here records onto a caller-owned [`Tape`] so the terms can
//! be summed and differentiated together. Probabilities entering a logarithm
//! are clamped from below at [`PROB_FLOOR`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{BnStatsSnapshot, SourceModel};
use crate::nn::{linear_forward, BoundDense, Dense, Mode, Param};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// Source-modality features of the task-irrelevant samples, one
/// `[n_ti, feature_dim]` matrix per source. Computed once before transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TIFeatureCache {
    per_source: Vec<Tensor>,
}

impl TIFeatureCache {
    pub fn num_sources(&self) -> usize {
        self.per_source.len()
    }

    pub fn num_samples(&self) -> usize {
        self.per_source.first().map_or(0, Tensor::rows)
    }

    pub fn source(&self, j: usize) -> &Tensor {
        &self.per_source[j]
    }

    /// `Σ_j ζ_j ψ_j^i` for the selected samples.
    pub fn weighted(&self, zeta: &[f64], indices: &[usize]) -> Result<Tensor> {
        weighted_features(
            &self
                .per_source
                .iter()
                .map(|t| t.select_rows(indices))
                .collect::<Result<Vec<_>>>()?,
            zeta,
        )
    }
}

/// Encodes the source-modality half of the task-irrelevant pairs with every
/// source encoder (eval mode).
pub fn precompute_ti_features(
    sources: &[SourceModel],
    ti_source_data: &Tensor,
) -> Result<TIFeatureCache> {
    if ti_source_data.rows() == 0 {
        return Err(Error::Config("task-irrelevant set is empty".into()));
    }
    let per_source = sources
        .iter()
        .map(|m| m.encode(ti_source_data, Mode::Eval).map(|e| e.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(TIFeatureCache { per_source })
}

/// `Σ_j ζ_j f_j` over plain tensors.
pub fn weighted_features(per_source: &[Tensor], zeta: &[f64]) -> Result<Tensor> {
    if per_source.len() != zeta.len() || per_source.is_empty() {
        return Err(Error::Contract(format!(
            "{} feature sets but {} weights",
            per_source.len(),
            zeta.len()
        )));
    }
    let mut out = per_source[0].map(|v| v * zeta[0]);
    for (f, &z) in per_source.iter().zip(zeta).skip(1) {
        out.add_assign(&f.map(|v| v * z))?;
    }
    Ok(out)
}

/// `Σ_j ζ_j f_j` on the tape.
pub fn weighted_features_on(tape: &mut Tape, per_source: &[Var], zeta: Var) -> Result<Var> {
    crate::model::fuse_on(tape, per_source, zeta)
}

/// Paired feature matching:
/// `(n_ti / |batch|) · Σ_{i ∈ batch} Σ_j ‖ζ_j (ψ_j^i − f_j(x_i))‖²`.
///
/// The rescaling makes the mini-batch value an unbiased estimate of the sum
/// over the whole task-irrelevant set. `target_features[j]` is the
/// `[|batch|, feature_dim]` output of encoder `j` on the target-modality half
/// of the selected pairs.
pub fn loss_ti(
    tape: &mut Tape,
    cache: &TIFeatureCache,
    target_features: &[Var],
    zeta: Var,
    batch_indices: &[usize],
) -> Result<Var> {
    if target_features.len() != cache.num_sources() {
        return Err(Error::Contract(format!(
            "{} target feature sets for {} cached sources",
            target_features.len(),
            cache.num_sources()
        )));
    }
    if batch_indices.is_empty() {
        return Err(Error::Contract("empty task-irrelevant batch".into()));
    }
    let scale = cache.num_samples() as f64 / batch_indices.len() as f64;
    let mut total: Option<Var> = None;
    for (j, &f) in target_features.iter().enumerate() {
        let psi = tape.constant(cache.source(j).select_rows(batch_indices)?);
        let diff = tape.sub(psi, f)?;
        let z = tape.index(zeta, j)?;
        let weighted = tape.mul(diff, z)?;
        let sq = tape.square(weighted);
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no sources".into()))?;
    Ok(tape.scale(total, scale))
}

/// Per source, per BN site: `(mean, var)` of that site's input on the batch.
pub type BatchStats = Vec<Vec<(Vec<f64>, Vec<f64>)>>;

/// Batch statistics of every BN input under every source encoder.
pub fn target_batch_bn_stats(sources: &[SourceModel], target_batch: &Tensor) -> Result<BatchStats> {
    if target_batch.rows() < 2 {
        return Err(Error::DegenerateBatch(
            "batch statistics need at least 2 samples".into(),
        ));
    }
    sources
        .iter()
        .map(|m| m.encode(target_batch, Mode::Train).map(|e| e.bn_stats))
        .collect()
}

/// BN statistics matching:
/// `Σ_l ‖Σ_j ζ_j E[μ_l]_j − Σ_j ζ_j μ̂_{l,j}‖ + ‖Σ_j ζ_j E[σ²_l]_j − Σ_j ζ_j σ̂²_{l,j}‖`
/// with unsquared Euclidean norms.
///
/// `target_stats[j][l]` holds the differentiable batch mean and variance of
/// BN site `l` under encoder `j`.
pub fn loss_distribution(
    tape: &mut Tape,
    snapshots: &[BnStatsSnapshot],
    target_stats: &[Vec<(Var, Var)>],
    zeta: Var,
) -> Result<Var> {
    if snapshots.len() != target_stats.len() || snapshots.is_empty() {
        return Err(Error::Contract(format!(
            "{} snapshots but {} target stat sets",
            snapshots.len(),
            target_stats.len()
        )));
    }
    let num_layers = snapshots[0].layers().len();
    for (s, t) in snapshots.iter().zip(target_stats) {
        if s.layers().len() != num_layers || t.len() != num_layers {
            return Err(Error::Contract("BN layer count mismatch".into()));
        }
    }
    if num_layers == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let zetas: Vec<Var> = (0..snapshots.len())
        .map(|j| tape.index(zeta, j))
        .collect::<Result<_>>()?;

    let mut total: Option<Var> = None;
    for l in 0..num_layers {
        for moment in 0..2 {
            let mut source_mix: Option<Var> = None;
            let mut target_mix: Option<Var> = None;
            for (j, (snap, stats)) in snapshots.iter().zip(target_stats).enumerate() {
                let layer = &snap.layers()[l];
                let stored = if moment == 0 { &layer.mean } else { &layer.var };
                let batch = if moment == 0 { stats[l].0 } else { stats[l].1 };
                if tape.value(batch).numel() != stored.len() {
                    return Err(Error::Contract(format!(
                        "layer {l} has {} channels in the snapshot but {} in the batch",
                        stored.len(),
                        tape.value(batch).numel()
                    )));
                }
                let s = tape.constant(Tensor::new(vec![1, stored.len()], stored.clone())?);
                let sw = tape.mul(s, zetas[j])?;
                let tw = tape.mul(batch, zetas[j])?;
                source_mix = Some(match source_mix {
                    None => sw,
                    Some(a) => tape.add(a, sw)?,
                });
                target_mix = Some(match target_mix {
                    None => tw,
                    Some(a) => tape.add(a, tw)?,
                });
            }
            let (Some(sm), Some(tm)) = (source_mix, target_mix) else {
                unreachable!("at least one source");
            };
            let diff = tape.sub(sm, tm)?;
            let n = tape.norm(diff);
            total = Some(match total {
                None => n,
                Some(t) => tape.add(t, n)?,
            });
        }
    }
    Ok(total.expect("at least one layer"))
}

fn check_prob_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || t.row(i).iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract(format!(
                "row {i} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `Σ_c p_c log(max(p_c, floor))` for every element; `x_log_x` of a
/// probability tensor.
fn p_log_p(tape: &mut Tape, p: Var) -> Result<Var> {
    let clamped = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.ln(clamped);
    tape.mul(p, logp)
}

/// Conditional entropy `−(1/B) Σ_i Σ_c p_ic log p_ic`.
pub fn loss_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_prob_rows(tape.value(probs))?;
    let b = tape.value(probs).rows() as f64;
    let plp = p_log_p(tape, probs)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0 / b))
}

/// Diversity: entropy `−Σ_c p̄_c log p̄_c` of the batch-mean prediction.
pub fn loss_diversity(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_prob_rows(tape.value(probs))?;
    let mean = tape.mean_rows(probs)?;
    let plp = p_log_p(tape, mean)?;
    let s = tape.sum(plp);
    Ok(tape.neg(s))
}

/// Pseudo-label cross entropy `−(1/B) Σ_i log p_{i, ŷ_i}`.
pub fn loss_pseudo(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather(probs, labels)?;
    let clamped = tape.clamp_min(picked, PROB_FLOOR);
    let logs = tape.ln(clamped);
    let m = tape.mean(logs);
    Ok(tape.neg(m))
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub ti: f64,
    pub d: f64,
    pub pl: f64,
}

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_ti: f64,
    pub l_d: f64,
    pub l_ent: f64,
    pub l_div: f64,
    pub l_im: f64,
    pub l_pl: f64,
    pub l_ma: f64,
    pub l_ms: f64,
    pub total: f64,
    pub l_td: Option<f64>,
    pub l_ad: Option<f64>,
    pub l_adv: Option<f64>,
}

impl LossReport {
    /// Derives the combined quantities from the base terms:
    /// `l_im = l_div − l_ent`, `l_ma = −l_im + λ_pl·l_pl`,
    /// `l_ms = λ_TI·l_ti + λ_d·l_d`, `total = l_ma + l_ms`.
    pub fn compose(l_ti: f64, l_d: f64, l_ent: f64, l_div: f64, l_pl: f64, lambdas: Lambdas) -> Self {
        let l_im = l_div - l_ent;
        let l_ma = -l_im + lambdas.pl * l_pl;
        let l_ms = lambdas.ti * l_ti + lambdas.d * l_d;
        Self {
            l_ti,
            l_d,
            l_ent,
            l_div,
            l_im,
            l_pl,
            l_ma,
            l_ms,
            total: l_ma + l_ms,
            ..Default::default()
        }
    }

    /// Verifies the algebraic identities to `rel_tol`.
    pub fn check_identities(&self, lambdas: Lambdas, rel_tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1.0);
        let checks = [
            ("l_im", self.l_im, self.l_div - self.l_ent),
            ("l_ma", self.l_ma, -self.l_im + lambdas.pl * self.l_pl),
            ("l_ms", self.l_ms, lambdas.ti * self.l_ti + lambdas.d * self.l_d),
            ("total", self.total, self.l_ma + self.l_ms),
        ];
        for (name, got, want) in checks {
            if !close(got, want) {
                return Err(Error::Contract(format!("{name} = {got}, expected {want}")));
            }
        }
        Ok(())
    }
}

/// Tape handles of the base loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ti: Var,
    pub d: Var,
    pub ent: Var,
    pub div: Var,
    pub pl: Var,
}

/// `total = (−(l_div − l_ent) + λ_pl·l_pl) + (λ_TI·l_ti + λ_d·l_d)`.
///
/// Terms whose weight is zero are left out of the graph entirely so they
/// contribute nothing to any gradient.
pub fn total_objective(tape: &mut Tape, terms: LossTerms, lambdas: Lambdas) -> Result<(Var, LossReport)> {
    let mut total = tape.sub(terms.ent, terms.div)?;
    for (var, weight) in [(terms.pl, lambdas.pl), (terms.ti, lambdas.ti), (terms.d, lambdas.d)] {
        if weight != 0.0 {
            let w = tape.scale(var, weight);
            total = tape.add(total, w)?;
        }
    }
    let v = |x: Var| tape.value(x).item();
    let mut report = LossReport::compose(
        v(terms.ti),
        v(terms.d),
        v(terms.ent),
        v(terms.div),
        v(terms.pl),
        lambdas,
    );
    // Use the tape's own sum so logged and optimized totals agree bitwise.
    report.total = v(total);
    Ok((total, report))
}

/// Binary domain classifier `feature_dim → 32 → 1` with ReLU and sigmoid.
/// Outputs the probability that a feature came from the source modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDiscriminator {
    hidden: BoundDense,
    output: BoundDense,
}

pub const DISCRIMINATOR_HIDDEN: usize = 32;

impl Discriminator {
    pub fn init(feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Dense::init(feature_dim, DISCRIMINATOR_HIDDEN, rng),
            output: Dense::init(DISCRIMINATOR_HIDDEN, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            hidden: self.hidden.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }

    /// `[batch, 1]` source-probabilities.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundDiscriminator, x: Var) -> Result<Var> {
        let h = linear_forward(tape, x, bound.hidden.weight, bound.hidden.bias)?;
        let h = tape.relu(h);
        let o = linear_forward(tape, h, bound.output.weight, bound.output.bias)?;
        let p = tape.sigmoid(o);
        if tape.value(p).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Contract("discriminator produced NaN".into()));
        }
        Ok(p)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let p = self.forward_on(&mut tape, &b, xv)?;
        Ok(tape.value(p).clone())
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundDiscriminator) -> Result<()> {
        self.hidden.accumulate(grads, &bound.hidden)?;
        self.output.accumulate(grads, &bound.output)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.hidden.params_mut().into_iter().collect();
        v.extend(self.output.params_mut());
        v
    }
}

fn clamped_log(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp_min(p, PROB_FLOOR);
    tape.ln(c)
}

/// `−mean[log D(src) + log(1 − D(tgt))]` given discriminator outputs on the
/// ζ-weighted source and target features.
pub fn loss_true_discriminator(tape: &mut Tape, d_source: Var, d_target: Var) -> Result<Var> {
    let log_src = clamped_log(tape, d_source);
    let neg = tape.neg(d_target);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_tgt = clamped_log(tape, one_minus);
    let a = tape.mean(log_src);
    let b = tape.mean(log_tgt);
    let s = tape.add(a, b)?;
    Ok(tape.neg(s))
}

/// `−mean log D(tgt)`.
pub fn loss_adv_discriminator(tape: &mut Tape, d_target: Var) -> Result<Var> {
    let log_tgt = clamped_log(tape, d_target);
    let m = tape.mean(log_tgt);
    Ok(tape.neg(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerStats;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn ti_unit_distance() {
        let cache = TIFeatureCache {
            per_source: vec![Tensor::from_rows(&[[1.0, 0.0]])],
        };
        let v = eval(|t| {
            let f = t.param(Tensor::from_rows(&[[0.0, 0.0]]));
            let z = t.param(Tensor::vector(vec![1.0]));
            loss_ti(t, &cache, &[f], z, &[0])
        });
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ti_zero_when_aligned() {
        let feats = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]);
        let cache = TIFeatureCache {
            per_source: vec![feats.clone(), feats.clone()],
        };
        let v = eval(|t| {
            let a = t.constant(feats.clone());
            let b = t.constant(feats.clone());
            let z = t.param(Tensor::vector(vec![0.4, 0.6]));
            loss_ti(t, &cache, &[a, b], z, &[0, 1])
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ti_quadratic_in_zeta() {
        let cache = TIFeatureCache {
            per_source: vec![
                Tensor::from_rows(&[[1.0, -2.0]]),
                Tensor::from_rows(&[[0.5, 3.0]]),
            ],
        };
        let run = |z0: f64| {
            eval(|t| {
                let a = t.constant(Tensor::from_rows(&[[0.0, 1.0]]));
                let b = t.constant(Tensor::from_rows(&[[0.0, 0.0]]));
                let z = t.param(Tensor::vector(vec![z0, 0.0]));
                loss_ti(t, &cache, &[a, b], z, &[0])
            })
        };
        // Only source 0 contributes when ζ_1 = 0.
        assert!((run(0.8) / run(0.4) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ti_index_out_of_range() {
        let cache = TIFeatureCache {
            per_source: vec![Tensor::from_rows(&[[1.0]])],
        };
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_rows(&[[0.0]]));
        let z = t.param(Tensor::vector(vec![1.0]));
        assert!(loss_ti(&mut t, &cache, &[f], z, &[3]).is_err());
    }

    fn snapshot(mean: &[f64], var: &[f64]) -> BnStatsSnapshot {
        BnStatsSnapshot::new(vec![LayerStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn distribution_scalar_case() {
        let v = eval(|t| {
            let m = t.constant(Tensor::from_rows(&[[0.0]]));
            let s = t.constant(Tensor::from_rows(&[[2.0]]));
            let z = t.param(Tensor::vector(vec![1.0]));
            loss_distribution(t, &[snapshot(&[1.0], &[2.0])], &[vec![(m, s)]], z)
        });
        assert_eq!(v, 1.0);
    }

    #[test]
    fn distribution_zero_on_perfect_match() {
        for z in [[0.5, 0.5], [0.1, 0.9], [1.0, 0.0]] {
            let v = eval(|t| {
                let a = (
                    t.constant(Tensor::from_rows(&[[0.3, -1.0]])),
                    t.constant(Tensor::from_rows(&[[1.5, 0.2]])),
                );
                let b = (
                    t.constant(Tensor::from_rows(&[[2.0, 0.0]])),
                    t.constant(Tensor::from_rows(&[[0.7, 0.9]])),
                );
                let zv = t.param(Tensor::vector(z.to_vec()));
                loss_distribution(
                    t,
                    &[snapshot(&[0.3, -1.0], &[1.5, 0.2]), snapshot(&[2.0, 0.0], &[0.7, 0.9])],
                    &[vec![a], vec![b]],
                    zv,
                )
            });
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn distribution_layer_count_mismatch() {
        let mut t = Tape::new();
        let z = t.param(Tensor::vector(vec![1.0]));
        assert!(loss_distribution(&mut t, &[snapshot(&[1.0], &[1.0])], &[vec![]], z).is_err());
    }

    #[test]
    fn entropy_anchors() {
        let onehot = eval(|t| {
            let p = t.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]));
            loss_entropy(t, p)
        });
        assert_eq!(onehot, 0.0);
        let uniform = eval(|t| {
            let p = t.constant(Tensor::full(&[4, 17], 1.0 / 17.0));
            loss_entropy(t, p)
        });
        assert!((uniform - 17f64.ln()).abs() < 1e-10);
        assert!((uniform - 2.8332).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_unnormalized_rows() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_rows(&[[0.5, 0.6]]));
        assert!(matches!(loss_entropy(&mut t, p), Err(Error::Contract(_))));
    }

    #[test]
    fn diversity_anchors() {
        let collapsed = eval(|t| {
            let p = t.constant(Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]));
            loss_diversity(t, p)
        });
        assert_eq!(collapsed, 0.0);
        let spread = eval(|t| {
            let p = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
            loss_diversity(t, p)
        });
        assert!((spread - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pseudo_anchors() {
        let perfect = eval(|t| {
            let p = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
            loss_pseudo(t, p, &[0, 1])
        });
        assert_eq!(perfect, 0.0);
        let uniform = eval(|t| {
            let p = t.constant(Tensor::full(&[3, 5], 0.2));
            loss_pseudo(t, p, &[4, 0, 2])
        });
        assert!((uniform - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_out_of_range() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::full(&[1, 2], 0.5));
        assert!(loss_pseudo(&mut t, p, &[2]).is_err());
    }

    #[test]
    fn objective_at_confident_diverse_optimum() {
        // One-hot rows covering all N classes uniformly, all λ = 0.
        let n = 4;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_rows(&rows));
        let zero = t.constant(Tensor::scalar(0.0));
        let terms = LossTerms {
            ti: zero,
            d: zero,
            ent: loss_entropy(&mut t, p).unwrap(),
            div: loss_diversity(&mut t, p).unwrap(),
            pl: loss_pseudo(&mut t, p, &[0, 1, 2, 3]).unwrap(),
        };
        let lambdas = Lambdas {
            ti: 0.0,
            d: 0.0,
            pl: 0.0,
        };
        let (total, report) = total_objective(&mut t, terms, lambdas).unwrap();
        assert!((t.value(total).item() + (n as f64).ln()).abs() < 1e-12);
        report.check_identities(lambdas, 1e-12).unwrap();
    }

    #[test]
    fn uninformative_discriminator() {
        let (td, ad) = {
            let mut t = Tape::new();
            let s = t.constant(Tensor::full(&[5, 1], 0.5));
            let g = t.constant(Tensor::full(&[5, 1], 0.5));
            let td = loss_true_discriminator(&mut t, s, g).unwrap();
            let ad = loss_adv_discriminator(&mut t, g).unwrap();
            (t.value(td).item(), t.value(ad).item())
        };
        assert!((td - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ad - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separating_discriminator_limit() {
        let eps = 1e-6;
        let mut t = Tape::new();
        let s = t.constant(Tensor::full(&[3, 1], 1.0 - eps));
        let g = t.constant(Tensor::full(&[3, 1], eps));
        let td = loss_true_discriminator(&mut t, s, g).unwrap();
        let ad = loss_adv_discriminator(&mut t, g).unwrap();
        let expected_td = -2.0 * (1.0 - eps).ln();
        assert!((t.value(td).item() - expected_td).abs() < 1e-12);
        assert!(t.value(td).item() < 1e-5);
        assert!((t.value(ad).item() + eps.ln()).abs() < 1e-9);
        assert!(t.value(ad).item() > 13.0);
    }
}
