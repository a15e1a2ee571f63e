//! The pseudo-label pipeline against a direct re-implementation, label for
//! label.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle::compare_100;
use xmodal::pseudo::pseudo_labels_from;
use xmodal::Tensor;

#[test]
fn matches_oracle_on_100_instances() {
    let (tie, empty) = compare_100().unwrap();
    assert!(tie && empty);
}

#[test]
fn separated_clusters_recover_true_labels() {
    // Two tight clusters with confident, correct source probabilities.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    for i in 0..40 {
        let k = i % 2;
        let centre = if k == 0 { -3.0 } else { 3.0 };
        rows.push(vec![centre + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
        probs.push(if k == 0 { vec![0.9, 0.1] } else { vec![0.1, 0.9] });
        truth.push(k);
    }
    let got = pseudo_labels_from(&[Tensor::from_rows(&rows)], &[Tensor::from_rows(&probs)], &[1.0]).unwrap();
    assert_eq!(got.labels, truth);
}
