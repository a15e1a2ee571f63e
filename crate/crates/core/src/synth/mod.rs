//! Controllable paired two-modality classification data.
//!
//! Every class owns a mean in a low-dimensional latent space. A sample draws a
//! latent point around its class mean, passes it through a small per-domain
//! affine perturbation, and is then rendered into each modality by
//! `x_m = tanh(M_m · z + c_m) + σ_m · ε`. The two modalities share the same
//! latent point and noise draw `ε`; they differ by their mixing matrix, offset
//! and noise scale, all of which coincide when `modality_gap_scale = 0`.
//!
//! Classes are split into task-relevant (TR) classes, which the transfer has
//! to recognize, and task-irrelevant (TI) classes, which only supply paired
//! samples for feature matching.

mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_corpus, read_matrix, save_corpus, write_matrix, CorpusManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_tr_classes: usize,
    pub num_ti_classes: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub num_domains: usize,
    /// Domain whose target-modality data is to be classified.
    pub target_domain: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_radius: f64,
    /// Rejection threshold on the distance between any two class means.
    pub min_class_distance: f64,
    pub within_class_std: f64,
    pub domain_shift_scale: f64,
    pub modality_gap_scale: f64,
    /// Scale of the mixing matrices; larger values saturate `tanh` more.
    pub render_gain: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_tr_classes: 6,
            num_ti_classes: 6,
            latent_dim: 8,
            input_dim: 64,
            samples_per_class: 100,
            num_domains: 2,
            target_domain: 0,
            class_radius: 4.0,
            min_class_distance: 3.0,
            within_class_std: 1.0,
            domain_shift_scale: 0.2,
            modality_gap_scale: 2.0,
            render_gain: 1.0,
            noise_scale: 0.1,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tr_classes", self.num_tr_classes),
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
            ("samples_per_class", self.samples_per_class),
            ("num_domains", self.num_domains),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_tr_classes < 2 {
            return Err(Error::Config("need at least two task-relevant classes".into()));
        }
        if self.target_domain >= self.num_domains {
            return Err(Error::Config("target_domain out of range".into()));
        }
        let scales = [
            ("class_radius", self.class_radius),
            ("min_class_distance", self.min_class_distance),
            ("within_class_std", self.within_class_std),
            ("domain_shift_scale", self.domain_shift_scale),
            ("modality_gap_scale", self.modality_gap_scale),
            ("render_gain", self.render_gain),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in scales {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tr_classes + self.num_ti_classes
    }
}

/// Row-major `f32` matrix, the stored form of every split.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent matrix")
    }
}

/// Inputs with ground-truth labels and the latent id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Matrix32,
    pub labels: Vec<usize>,
    pub latent_ids: Vec<u64>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledData {
        UnlabeledData {
            x: self.x.to_tensor(),
        }
    }

    pub fn inputs(&self) -> Tensor {
        self.x.to_tensor()
    }
}

/// Target-modality inputs as seen by the transfer: no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledData {
    x: Tensor,
}

impl UnlabeledData {
    pub fn new(x: Tensor) -> Self {
        Self { x }
    }

    pub fn inputs(&self) -> &Tensor {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Aligned task-irrelevant pairs: row `i` of `source` and of `target` render
/// the same latent point.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTIDataset {
    pub source: Matrix32,
    pub target: Matrix32,
    pub latent_ids: Vec<u64>,
    /// TI class of each pair (never used by the transfer).
    pub classes: Vec<usize>,
}

impl PairedTIDataset {
    pub fn len(&self) -> usize {
        self.source.rows
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub spec: SynthSpec,
    pub tr_class_ids: Vec<usize>,
    pub ti_class_ids: Vec<usize>,
    /// Labeled source-modality data, one split per domain.
    pub source_domains: Vec<LabeledData>,
    /// Labeled source-modality data of the target domain, held out from
    /// source training.
    pub source_eval: LabeledData,
    /// Target-modality data of the target domain. Labels are for evaluation.
    pub target: LabeledData,
    pub ti: PairedTIDataset,
}

/// Shuffles `0..num_classes` and returns `(tr, ti)` id lists, each sorted.
///
/// The TI list holds every class not chosen as TR.
pub fn split_tr_ti(num_classes: usize, tr_count: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if tr_count > num_classes {
        return Err(Error::Config(format!(
            "cannot take {tr_count} task-relevant classes out of {num_classes}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut rng);
    let mut tr = ids[..tr_count].to_vec();
    let mut ti = ids[tr_count..].to_vec();
    tr.sort_unstable();
    ti.sort_unstable();
    Ok((tr, ti))
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Split = 1,
    Means = 2,
    Modality = 3,
    Domain = 4,
    Samples = 5,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Render {
    /// `[input_dim × latent_dim]`
    mix: Vec<f64>,
    offset: Vec<f64>,
    noise: f64,
}

struct DomainShift {
    /// `[latent × latent]`
    a: Vec<f64>,
    b: Vec<f64>,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    means: Vec<Vec<f64>>,
    renders: [Render; 2],
    domains: Vec<DomainShift>,
    rng: ChaCha8Rng,
    next_id: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Modality {
    Source = 0,
    Target = 1,
}

fn class_means(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream_rng(spec.seed, Stream::Means);
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0;
    while means.len() < spec.num_classes() {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Config(
                "could not place class means; lower min_class_distance".into(),
            ));
        }
        let dir: Vec<f64> = (0..spec.latent_dim).map(|_| gaussian(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let cand: Vec<f64> = dir.iter().map(|v| v / norm * spec.class_radius).collect();
        let far_enough = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                >= spec.min_class_distance
        });
        if far_enough {
            means.push(cand);
        }
    }
    Ok(means)
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        let means = class_means(spec)?;
        let (d, l) = (spec.input_dim, spec.latent_dim);
        let scale = spec.render_gain / (l as f64).sqrt();

        let mut rng = stream_rng(spec.seed, Stream::Modality);
        let base: Vec<f64> = (0..d * l).map(|_| scale * gaussian(&mut rng)).collect();
        let delta: Vec<f64> = (0..d * l).map(|_| scale * gaussian(&mut rng)).collect();
        let offset_dir: Vec<f64> = (0..d).map(|_| 0.5 * gaussian(&mut rng)).collect();
        let gap = spec.modality_gap_scale;

        let source = Render {
            mix: base.clone(),
            offset: vec![0.0; d],
            noise: spec.noise_scale,
        };
        let target = Render {
            mix: base.iter().zip(&delta).map(|(b, r)| b + gap * r).collect(),
            offset: offset_dir.iter().map(|o| gap * o).collect(),
            noise: spec.noise_scale * (1.0 + gap),
        };

        let mut rng = stream_rng(spec.seed, Stream::Domain);
        let s = spec.domain_shift_scale;
        let domains = (0..spec.num_domains)
            .map(|_| {
                let mut a: Vec<f64> = (0..l * l)
                    .map(|_| s * gaussian(&mut rng) / (l as f64).sqrt())
                    .collect();
                for i in 0..l {
                    a[i * l + i] += 1.0;
                }
                let b = (0..l).map(|_| s * gaussian(&mut rng)).collect();
                DomainShift { a, b }
            })
            .collect();

        Ok(Self {
            spec,
            means,
            renders: [source, target],
            domains,
            rng: stream_rng(spec.seed, Stream::Samples),
            next_id: 0,
        })
    }

    fn latent(&mut self, class: usize, domain: Option<usize>) -> Vec<f64> {
        let l = self.spec.latent_dim;
        let std = self.spec.within_class_std;
        let z: Vec<f64> = self.means[class]
            .iter()
            .map(|m| m + std * gaussian(&mut self.rng))
            .collect();
        match domain {
            None => z,
            Some(d) => {
                let shift = &self.domains[d];
                (0..l)
                    .map(|i| {
                        let row = &shift.a[i * l..(i + 1) * l];
                        row.iter().zip(&z).map(|(a, v)| a * v).sum::<f64>() + shift.b[i]
                    })
                    .collect()
            }
        }
    }

    fn render(&self, z: &[f64], eps: &[f64], modality: Modality) -> Vec<f32> {
        let r = &self.renders[modality as usize];
        let l = self.spec.latent_dim;
        (0..self.spec.input_dim)
            .map(|i| {
                let row = &r.mix[i * l..(i + 1) * l];
                let pre: f64 = row.iter().zip(z).map(|(a, v)| a * v).sum::<f64>() + r.offset[i];
                (pre.tanh() + r.noise * eps[i]) as f32
            })
            .collect()
    }

    /// Renders `samples_per_class` samples of every listed class in the
    /// requested modalities. Returns one matrix per modality, the labels
    /// (position in `classes`) and latent ids.
    fn draw(
        &mut self,
        classes: &[usize],
        domain: Option<usize>,
        modalities: &[Modality],
    ) -> (Vec<Matrix32>, Vec<usize>, Vec<u64>) {
        let n = classes.len() * self.spec.samples_per_class;
        let d = self.spec.input_dim;
        let mut mats: Vec<Vec<f32>> = vec![Vec::with_capacity(n * d); modalities.len()];
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for (label, &class) in classes.iter().enumerate() {
            for _ in 0..self.spec.samples_per_class {
                let z = self.latent(class, domain);
                let eps: Vec<f64> = (0..d).map(|_| gaussian(&mut self.rng)).collect();
                for (m, &modality) in mats.iter_mut().zip(modalities) {
                    m.extend(self.render(&z, &eps, modality));
                }
                labels.push(label);
                ids.push(self.next_id);
                self.next_id += 1;
            }
        }
        let mats = mats
            .into_iter()
            .map(|data| Matrix32 {
                rows: n,
                cols: d,
                data,
            })
            .collect();
        (mats, labels, ids)
    }
}

fn labeled((mut mats, labels, ids): (Vec<Matrix32>, Vec<usize>, Vec<u64>)) -> LabeledData {
    LabeledData {
        x: mats.remove(0),
        labels,
        latent_ids: ids,
    }
}

/// Deterministically generates a corpus from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let (tr, ti) = split_tr_ti(spec.num_classes(), spec.num_tr_classes, spec.seed)?;
    if tr.iter().any(|c| ti.contains(c)) {
        return Err(Error::Config("task-relevant and task-irrelevant classes overlap".into()));
    }
    let mut g = Generator::new(spec)?;
    let source_domains = (0..spec.num_domains)
        .map(|d| labeled(g.draw(&tr, Some(d), &[Modality::Source])))
        .collect();
    let source_eval = labeled(g.draw(&tr, Some(spec.target_domain), &[Modality::Source]));
    let target = labeled(g.draw(&tr, Some(spec.target_domain), &[Modality::Target]));
    let (mut pair, ti_labels, ti_ids) = g.draw(&ti, None, &[Modality::Source, Modality::Target]);
    let ti_target = pair.remove(1);
    let ti_source = pair.remove(0);
    Ok(GeneratedCorpus {
        spec: spec.clone(),
        tr_class_ids: tr,
        ti_class_ids: ti.clone(),
        source_domains,
        source_eval,
        target,
        ti: PairedTIDataset {
            source: ti_source,
            target: ti_target,
            latent_ids: ti_ids,
            classes: ti_labels.iter().map(|&l| ti[l]).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            samples_per_class: 5,
            input_dim: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (tr, ti) = split_tr_ti(12, 6, 42).unwrap();
        assert_eq!(tr.len(), 6);
        let mut all: Vec<usize> = tr.iter().chain(&ti).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(split_tr_ti(12, 6, 42).unwrap(), (tr, ti));
    }

    #[test]
    fn split_disjoint_for_many_seeds() {
        for seed in 0..100 {
            let (tr, ti) = split_tr_ti(20, 7, seed).unwrap();
            assert!(tr.iter().all(|c| !ti.contains(c)));
        }
    }

    #[test]
    fn split_rejects_oversized_request() {
        assert!(split_tr_ti(4, 5, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn zero_gap_gives_identical_pairs() {
        let spec = SynthSpec {
            modality_gap_scale: 0.0,
            ..small()
        };
        let c = generate(&spec).unwrap();
        assert_eq!(c.ti.source, c.ti.target);
    }

    #[test]
    fn nonzero_gap_separates_pairs() {
        let c = generate(&small()).unwrap();
        assert_ne!(c.ti.source, c.ti.target);
    }

    #[test]
    fn split_sizes_and_labels() {
        let s = small();
        let c = generate(&s).unwrap();
        assert_eq!(c.source_domains.len(), s.num_domains);
        assert_eq!(c.target.len(), s.num_tr_classes * s.samples_per_class);
        assert_eq!(c.ti.len(), s.num_ti_classes * s.samples_per_class);
        assert!(c.target.labels.iter().all(|&l| l < s.num_tr_classes));
        assert!(c.ti.classes.iter().all(|k| c.ti_class_ids.contains(k)));
    }

    #[test]
    fn latent_ids_are_unique() {
        let c = generate(&small()).unwrap();
        let mut ids: Vec<u64> = c
            .source_domains
            .iter()
            .flat_map(|d| d.latent_ids.clone())
            .chain(c.target.latent_ids.clone())
            .chain(c.ti.latent_ids.clone())
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SynthSpec {
            target_domain: 5,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = SynthSpec {
            noise_scale: -1.0,
            ..small()
        };
        assert!(generate(&bad).is_err());
    }
}
