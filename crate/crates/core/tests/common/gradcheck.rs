//! Tape gradients of every loss term against central finite differences on a
//! two-source, eight-sample toy problem with feature_dim 8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal::loss::{
    loss_adv_discriminator, loss_distribution, loss_diversity, loss_entropy, loss_pseudo, loss_ti,
    loss_true_discriminator, precompute_ti_features, total_objective, weighted_features_on,
    Discriminator, Lambdas, LossTerms, TIFeatureCache,
};
use xmodal::model::{fuse_on, BnStatsSnapshot, EncoderSpec, SourceModel};
use xmodal::nn::{Mode, Param};
use xmodal::{Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Entropy,
    Diversity,
    Pseudo,
    Ti,
    Distribution,
    Total,
    TrueDiscriminator,
    AdvDiscriminator,
}

pub struct Toy {
    pub models: Vec<SourceModel>,
    pub snapshots: Vec<BnStatsSnapshot>,
    /// Fixed before differentiation, as in a transfer run.
    pub cache: TIFeatureCache,
    /// Raw mixing weights; the losses see their sigmoid-and-normalize image.
    pub zeta: Vec<f64>,
    pub disc: Discriminator,
    pub target: Tensor,
    pub ti_target: Tensor,
    pub labels: Vec<usize>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn toy() -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = EncoderSpec {
        input_dim: 5,
        hidden_dims: vec![6],
        feature_dim: 8,
        ..EncoderSpec::default()
    };
    let models: Vec<SourceModel> = (0..2)
        .map(|_| {
            let mut m = SourceModel::init(spec.clone(), 3, &mut rng).unwrap();
            m.frozen_classifier = true;
            // Move the running statistics away from their initial values.
            let x = random_matrix(&mut rng, 8, 5);
            let enc = m.encode(&x, Mode::Train).unwrap();
            for (layer, (mean, var)) in m.bn_layers.iter_mut().zip(&enc.bn_stats) {
                layer.track(mean, var);
            }
            m
        })
        .collect();
    let snapshots = models.iter().map(SourceModel::extract_bn_stats).collect();
    let ti_source = random_matrix(&mut rng, 8, 5);
    Toy {
        cache: precompute_ti_features(&models, &ti_source).unwrap(),
        models,
        snapshots,
        zeta: vec![-0.4, 0.7],
        disc: Discriminator::init(8, &mut rng),
        target: random_matrix(&mut rng, 8, 5),
        ti_target: random_matrix(&mut rng, 8, 5),
        labels: vec![0, 1, 2, 0, 0, 1, 2, 2],
    }
}

pub struct Built {
    pub tape: Tape,
    pub loss: Var,
    pub raw_zeta: Var,
    pub bounds: Vec<xmodal::model::BoundModel>,
    pub disc: xmodal::loss::BoundDiscriminator,
}

pub fn build(toy: &Toy, term: Term) -> Built {
    let mut tape = Tape::new();
    let raw = tape.leaf(Tensor::vector(toy.zeta.clone()), true);
    let squashed = tape.sigmoid(raw);
    let total = tape.sum(squashed);
    let inv = tape.pow(total, -1.0);
    let zeta = tape.mul(squashed, inv).unwrap();
    let bounds: Vec<_> = toy.models.iter().map(|m| m.bind(&mut tape, true, false)).collect();
    let disc = toy.disc.bind(&mut tape, true);
    let x = tape.constant(toy.target.clone());
    let passes: Vec<_> = toy
        .models
        .iter()
        .zip(&bounds)
        .map(|(m, b)| m.encode_on(&mut tape, b, x, Mode::Train).unwrap())
        .collect();
    let probs: Vec<Var> = toy
        .models
        .iter()
        .zip(&bounds)
        .zip(&passes)
        .map(|((m, b), p)| m.probs_on(&mut tape, b, p.features).unwrap())
        .collect();
    let fused = fuse_on(&mut tape, &probs, zeta).unwrap();

    let mut ti = || {
        let xt = tape.constant(toy.ti_target.clone());
        let feats: Vec<Var> = toy
            .models
            .iter()
            .zip(&bounds)
            .map(|(m, b)| m.encode_on(&mut tape, b, xt, Mode::Train).unwrap().features)
            .collect();
        let idx: Vec<usize> = (0..toy.ti_target.rows()).collect();
        loss_ti(&mut tape, &toy.cache, &feats, zeta, &idx).unwrap()
    };

    let loss = match term {
        Term::Entropy => loss_entropy(&mut tape, fused).unwrap(),
        Term::Diversity => loss_diversity(&mut tape, fused).unwrap(),
        Term::Pseudo => loss_pseudo(&mut tape, fused, &toy.labels).unwrap(),
        Term::Ti => ti(),
        Term::Distribution => {
            let stats: Vec<_> = passes.iter().map(|p| p.bn_stats.clone()).collect();
            loss_distribution(&mut tape, &toy.snapshots, &stats, zeta).unwrap()
        }
        Term::Total => {
            let l_ti = ti();
            let stats: Vec<_> = passes.iter().map(|p| p.bn_stats.clone()).collect();
            let terms = LossTerms {
                ti: l_ti,
                d: loss_distribution(&mut tape, &toy.snapshots, &stats, zeta).unwrap(),
                ent: loss_entropy(&mut tape, fused).unwrap(),
                div: loss_diversity(&mut tape, fused).unwrap(),
                pl: loss_pseudo(&mut tape, fused, &toy.labels).unwrap(),
            };
            let lambdas = Lambdas {
                ti: 0.3,
                d: 0.2,
                pl: 0.4,
            };
            total_objective(&mut tape, terms, lambdas).unwrap().0
        }
        Term::TrueDiscriminator | Term::AdvDiscriminator => {
            let feats: Vec<Var> = passes.iter().map(|p| p.features).collect();
            let tgt = weighted_features_on(&mut tape, &feats, zeta).unwrap();
            let d_tgt = toy.disc.forward_on(&mut tape, &disc, tgt).unwrap();
            if term == Term::AdvDiscriminator {
                loss_adv_discriminator(&mut tape, d_tgt).unwrap()
            } else {
                let src_feats: Vec<Var> = (0..2).map(|j| tape.constant(toy.cache.source(j).clone())).collect();
                let src = weighted_features_on(&mut tape, &src_feats, zeta).unwrap();
                let d_src = toy.disc.forward_on(&mut tape, &disc, src).unwrap();
                loss_true_discriminator(&mut tape, d_src, d_tgt).unwrap()
            }
        }
    };
    Built {
        tape,
        loss,
        raw_zeta: raw,
        bounds,
        disc,
    }
}

fn value(toy: &Toy, term: Term) -> f64 {
    let b = build(toy, term);
    b.tape.value(b.loss).item()
}

fn encoder_params(m: &mut SourceModel) -> Vec<&mut Param> {
    m.encoder_params_mut()
}

/// Count of compared entries and the worst relative error seen.
#[derive(Debug, Default, Clone, Copy)]
pub struct Summary {
    pub checked: usize,
    pub max_rel: f64,
}

impl Summary {
    fn check(&mut self, analytic: f64, numeric: f64, what: &str) -> Result<(), String> {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        // Below this scale the finite difference itself is noise.
        if scale < 1e-6 {
            if (analytic - numeric).abs() < 1e-8 {
                return Ok(());
            }
            return Err(format!("{what}: {analytic} vs {numeric}"));
        }
        let rel = (analytic - numeric).abs() / scale;
        self.max_rel = self.max_rel.max(rel);
        if rel < REL_TOL {
            Ok(())
        } else {
            Err(format!("{what}: analytic {analytic} numeric {numeric} rel {rel:e}"))
        }
    }
}

fn central(toy: &mut Toy, term: Term, bump: impl Fn(&mut Toy, f64)) -> f64 {
    bump(toy, H);
    let up = value(toy, term);
    bump(toy, -2.0 * H);
    let down = value(toy, term);
    bump(toy, H);
    (up - down) / (2.0 * H)
}

pub fn check_term(term: Term) -> Result<Summary, String> {
    let mut toy = toy();
    let built = build(&toy, term);
    let grads = built.tape.backward(built.loss).unwrap();
    let mut summary = Summary::default();

    // Encoder parameters.
    let mut analytic = toy.models.clone();
    for (m, b) in analytic.iter_mut().zip(&built.bounds) {
        m.zero_grad();
        m.accumulate(&grads, b).unwrap();
    }
    for j in 0..toy.models.len() {
        let counts: Vec<usize> = encoder_params(&mut toy.models[j]).iter().map(|p| p.value.numel()).collect();
        for (pi, &n) in counts.iter().enumerate() {
            for e in 0..n {
                let a = encoder_params(&mut analytic[j])[pi].grad.data()[e];
                let num = central(&mut toy, term, |t, d| {
                    encoder_params(&mut t.models[j])[pi].value.data_mut()[e] += d;
                });
                summary.check(a, num, &format!("{term:?} model {j} param {pi}[{e}]"))?;
            }
        }
    }

    // Raw mixing weights, through the projection.
    let gz = grads
        .get(built.raw_zeta)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; toy.zeta.len()]);
    for k in 0..toy.zeta.len() {
        let num = central(&mut toy, term, |t, d| t.zeta[k] += d);
        summary.check(gz[k], num, &format!("{term:?} zeta[{k}]"))?;
    }

    // Discriminator parameters, for the adversarial terms.
    if matches!(term, Term::TrueDiscriminator | Term::AdvDiscriminator) {
        let mut d = toy.disc.clone();
        for p in d.params_mut() {
            p.zero_grad();
        }
        d.accumulate(&grads, &built.disc).unwrap();
        let counts: Vec<usize> = d.params_mut().iter().map(|p| p.value.numel()).collect();
        for (pi, &n) in counts.iter().enumerate() {
            for e in 0..n {
                let a = d.params_mut()[pi].grad.data()[e];
                let num = central(&mut toy, term, |t, dd| {
                    t.disc.params_mut()[pi].value.data_mut()[e] += dd;
                });
                summary.check(a, num, &format!("{term:?} disc param {pi}[{e}]"))?;
            }
        }
    }
    Ok(summary)
}

pub const ALL_TERMS: [Term; 8] = [
    Term::Entropy,
    Term::Diversity,
    Term::Pseudo,
    Term::Ti,
    Term::Distribution,
    Term::Total,
    Term::TrueDiscriminator,
    Term::AdvDiscriminator,
];

