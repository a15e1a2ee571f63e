//! Self-supervised pseudo-labels by nearest ζ-weighted centroid.
//!
//! One invocation of [`compute_pseudo_labels`] runs exactly two assignment
//! passes:
//!
//! 1. soft centroids per source, weighted by each source's class
//!    probabilities, combined across sources by ζ (generation 0);
//! 2. nearest-centroid assignment of the ζ-weighted features;
//! 3. hard centroids from those assignments (generation 1), with empty classes
//!    keeping their generation-0 centroid;
//! 4. a second nearest-centroid assignment, which is final.
//!
//! Distances are squared Euclidean. Ties go to the lowest class index.

use crate::error::{Error, Result};
use crate::loss::weighted_features;
use crate::model::SourceModel;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Added to every soft-centroid denominator.
pub const DENOM_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generation {
    Soft = 0,
    Hard = 1,
}

/// `[num_classes, feature_dim]` class centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Tensor,
    pub generation: Generation,
    /// Classes that received no member in a hard pass.
    pub empty: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub generation: Generation,
}

fn check_sources(features: &[Tensor], zeta: &[f64]) -> Result<(usize, usize)> {
    if features.is_empty() || features.len() != zeta.len() {
        return Err(Error::Contract(format!(
            "{} feature sets but {} mixing weights",
            features.len(),
            zeta.len()
        )));
    }
    let (rows, cols) = (features[0].rows(), features[0].cols());
    if features.iter().any(|f| f.rows() != rows || f.cols() != cols) {
        return Err(Error::Contract("per-source feature shapes differ".into()));
    }
    Ok((rows, cols))
}

/// `c_k = Σ_j ζ_j · (Σ_i p_ijk f_j(x_i)) / (Σ_i p_ijk + guard)`.
pub fn soft_centroids(features: &[Tensor], probs: &[Tensor], zeta: &[f64]) -> Result<CentroidSet> {
    let (rows, dim) = check_sources(features, zeta)?;
    if probs.len() != features.len() {
        return Err(Error::Contract("one probability matrix per source required".into()));
    }
    let classes = probs[0].cols();
    if probs.iter().any(|p| p.rows() != rows || p.cols() != classes) {
        return Err(Error::Contract("probability shapes differ from features".into()));
    }
    let mut combined = vec![0.0; classes * dim];
    for ((f, p), &z) in features.iter().zip(probs).zip(zeta) {
        for k in 0..classes {
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for i in 0..rows {
                let w = p.get(i, k);
                den += w;
                for (acc, &v) in num.iter_mut().zip(f.row(i)) {
                    *acc += w * v;
                }
            }
            let den = den + DENOM_GUARD;
            for (d, acc) in num.iter().enumerate() {
                combined[k * dim + d] += z * (acc / den);
            }
        }
    }
    Ok(CentroidSet {
        centroids: Tensor::new(vec![classes, dim], combined)?,
        generation: Generation::Soft,
        empty: vec![false; classes],
    })
}

/// Index of the nearest centroid per row; the lowest index wins ties.
pub fn assign_labels(fused_features: &Tensor, centroids: &CentroidSet) -> Result<PseudoLabels> {
    let c = &centroids.centroids;
    if fused_features.cols() != c.cols() {
        return Err(Error::Shape {
            op: "assign_labels",
            lhs: fused_features.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let labels = (0..fused_features.rows())
        .map(|i| {
            let x = fused_features.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..c.rows() {
                let d: f64 = x.iter().zip(c.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(PseudoLabels {
        labels,
        generation: centroids.generation,
    })
}

/// Per-class member means per source, ζ-combined. Classes without members
/// carry `fallback`'s centroid forward.
pub fn hard_centroids(
    features: &[Tensor],
    labels: &PseudoLabels,
    zeta: &[f64],
    fallback: &CentroidSet,
) -> Result<CentroidSet> {
    let (rows, dim) = check_sources(features, zeta)?;
    if labels.labels.len() != rows {
        return Err(Error::Contract("label count differs from sample count".into()));
    }
    let classes = fallback.centroids.rows();
    if let Some(&bad) = labels.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    let mut counts = vec![0usize; classes];
    for &l in &labels.labels {
        counts[l] += 1;
    }
    let mut combined = vec![0.0; classes * dim];
    for (f, &z) in features.iter().zip(zeta) {
        let mut sums = vec![0.0; classes * dim];
        for (i, &l) in labels.labels.iter().enumerate() {
            for (acc, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(f.row(i)) {
                *acc += v;
            }
        }
        for k in 0..classes {
            if counts[k] == 0 {
                continue;
            }
            for d in 0..dim {
                combined[k * dim + d] += z * (sums[k * dim + d] / counts[k] as f64);
            }
        }
    }
    let empty: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    for k in (0..classes).filter(|&k| empty[k]) {
        combined[k * dim..(k + 1) * dim].copy_from_slice(fallback.centroids.row(k));
    }
    Ok(CentroidSet {
        centroids: Tensor::new(vec![classes, dim], combined)?,
        generation: Generation::Hard,
        empty,
    })
}

/// The full pipeline on precomputed per-source features and probabilities.
pub fn pseudo_labels_from(features: &[Tensor], probs: &[Tensor], zeta: &[f64]) -> Result<PseudoLabels> {
    let fused = weighted_features(features, zeta)?;
    let soft = soft_centroids(features, probs, zeta)?;
    let first = assign_labels(&fused, &soft)?;
    let hard = hard_centroids(features, &first, zeta, &soft)?;
    assign_labels(&fused, &hard)
}

/// Runs the pipeline with every source in eval mode on `target`.
pub fn compute_pseudo_labels(sources: &[SourceModel], zeta: &[f64], target: &Tensor) -> Result<PseudoLabels> {
    let mut features = Vec::with_capacity(sources.len());
    let mut probs = Vec::with_capacity(sources.len());
    for m in sources {
        let f = m.encode(target, Mode::Eval)?.features;
        probs.push(m.classify_features(&f)?);
        features.push(f);
    }
    pseudo_labels_from(&features, &probs, zeta)
}
