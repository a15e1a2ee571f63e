//! A direct re-implementation of the pseudo-label pipeline on nested vectors,
//! and a generator of small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal::pseudo::DENOM_GUARD;
use xmodal::Tensor;

/// `[source][sample][dim]` and `[source][sample][class]`.
pub struct Instance {
    pub feats: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<Vec<f64>>>,
    pub zeta: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..a.len() {
        s += (a[d] - b[d]) * (a[d] - b[d]);
    }
    s
}

/// Nearest centroid, lowest index on ties, and whether a tie occurred.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, bool) {
    let d: Vec<f64> = centroids.iter().map(|c| sq_dist(x, c)).collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let pos = d.iter().position(|&v| v == min).unwrap();
    (pos, d.iter().filter(|&&v| v == min).count() > 1)
}

/// Final labels and whether any assignment was a tie.
pub fn oracle(inst: &Instance) -> (Vec<usize>, bool) {
    let n_src = inst.feats.len();
    let n = inst.feats[0].len();
    let dim = inst.feats[0][0].len();
    let classes = inst.probs[0][0].len();

    let mut xbar = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for d in 0..dim {
            let mut v = inst.feats[0][i][d] * inst.zeta[0];
            for j in 1..n_src {
                v += inst.feats[j][i][d] * inst.zeta[j];
            }
            xbar[i][d] = v;
        }
    }

    let mut c0 = vec![vec![0.0; dim]; classes];
    for j in 0..n_src {
        for k in 0..classes {
            let mut den = 0.0;
            let mut num = vec![0.0; dim];
            for i in 0..n {
                den += inst.probs[j][i][k];
                for d in 0..dim {
                    num[d] += inst.probs[j][i][k] * inst.feats[j][i][d];
                }
            }
            for d in 0..dim {
                c0[k][d] += inst.zeta[j] * (num[d] / (den + DENOM_GUARD));
            }
        }
    }
    let first: Vec<(usize, bool)> = xbar.iter().map(|x| nearest(x, &c0)).collect();
    let y0: Vec<usize> = first.iter().map(|a| a.0).collect();

    let mut c1 = vec![vec![0.0; dim]; classes];
    for k in 0..classes {
        let members: Vec<usize> = (0..n).filter(|&i| y0[i] == k).collect();
        if members.is_empty() {
            c1[k] = c0[k].clone();
            continue;
        }
        for j in 0..n_src {
            for d in 0..dim {
                let mut s = 0.0;
                for &i in &members {
                    s += inst.feats[j][i][d];
                }
                c1[k][d] += inst.zeta[j] * (s / members.len() as f64);
            }
        }
    }
    let last: Vec<(usize, bool)> = xbar.iter().map(|x| nearest(x, &c1)).collect();
    let tie = first.iter().chain(&last).any(|a| a.1);
    (last.into_iter().map(|a| a.0).collect(), tie)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `style` 0: continuous values; 1: values on a coarse grid, so that
/// distances tie; 2: peaked probabilities over few distinct rows, so that
/// classes go empty.
pub fn instance(rng: &mut ChaCha8Rng, style: usize) -> Instance {
    let n_src = rng.random_range(1..=3);
    let classes = rng.random_range(2..=5);
    let n = rng.random_range(1..=50);
    let dim = rng.random_range(1..=4);
    let value = |rng: &mut ChaCha8Rng| match style {
        0 => rng.random_range(-2.0..2.0),
        _ => rng.random_range(-1i32..=1) as f64,
    };
    let feats = (0..n_src)
        .map(|_| {
            let distinct: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| value(rng)).collect()).collect();
            (0..n)
                .map(|_| {
                    if style == 2 {
                        distinct[rng.random_range(0..3)].clone()
                    } else {
                        (0..dim).map(|_| value(rng)).collect()
                    }
                })
                .collect()
        })
        .collect();
    let probs = (0..n_src)
        .map(|_| {
            (0..n)
                .map(|_| match style {
                    0 => normalize((0..classes).map(|_| rng.random_range(0.01..1.0)).collect()),
                    1 => vec![1.0 / classes as f64; classes],
                    _ => {
                        let mut v = vec![0.0; classes];
                        v[0] = 1.0;
                        v
                    }
                })
                .collect()
        })
        .collect();
    let zeta = match style {
        1 => vec![1.0 / n_src as f64; n_src],
        _ => normalize((0..n_src).map(|_| rng.random_range(0.1..1.0)).collect()),
    };
    Instance { feats, probs, zeta }
}

pub fn to_tensors(v: &[Vec<Vec<f64>>]) -> Vec<Tensor> {
    v.iter().map(|m| Tensor::from_rows(m)).collect()
}

/// Runs the library against the oracle on 100 seeded instances. Returns
/// whether ties and empty classes were exercised.
pub fn compare_100() -> Result<(bool, bool), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut saw_tie = false;
    let mut saw_empty = false;
    for case in 0..100 {
        let inst = instance(&mut rng, case % 3);
        let got = xmodal::pseudo::pseudo_labels_from(&to_tensors(&inst.feats), &to_tensors(&inst.probs), &inst.zeta)
            .map_err(|e| e.to_string())?;
        let (want, tie) = oracle(&inst);
        if got.generation != xmodal::pseudo::Generation::Hard || got.labels != want {
            return Err(format!("case {case}: got {:?}, oracle {want:?}", got.labels));
        }
        let classes = inst.probs[0][0].len();
        saw_empty |= (0..classes).any(|k| !want.contains(&k));
        saw_tie |= tie;
    }
    Ok((saw_tie, saw_empty))
}
