//! Synthetic datasets with known structure.

use gridmtl::datagen::{Dataset, Sample};
use gridmtl::labeling::LabelVector;
use gridmtl::powerflow::{FeatureLayout, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn layout(d: usize, cond: usize) -> FeatureLayout {
    FeatureLayout {
        segments: vec![(Segment::GenP, d)],
        cond_lines: cond,
        cond_buses: 0,
    }
}

/// `n` Gaussian samples in `d` dimensions labelled by `label(x, rng)`,
/// spread over `topologies` topology ids and a two-line condition vector.
pub fn dataset(
    n: usize,
    d: usize,
    topologies: u32,
    seed: u64,
    mut label: impl FnMut(&[f64], &mut ChaCha20Rng) -> [bool; 4],
) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let which = rng.random_range(0..2usize);
            let mut c = vec![0.0; 2];
            c[which] = 1.0;
            let y = LabelVector::from_bits(label(&x, &mut rng));
            Sample {
                sample_id: i as u64,
                x,
                c,
                y,
                topology_id: i as u32 % topologies.max(1),
                contingency_id: which as u32 + 1,
                draw_index: i as u64,
            }
        })
        .collect();
    Dataset::new(layout(d, 2), samples)
}

/// Two features, four linear boundaries, and no sample within `margin`
/// of any boundary.
pub fn separable(n: usize, seed: u64) -> Dataset {
    let margin = 0.05;
    let f = |x: &[f64]| [x[0], x[1], x[0] + x[1], x[0] - x[1] + 0.5];
    let mut ds = dataset(3 * n, 2, 1, seed, |x, _| f(x).map(|v| v > 0.0));
    ds.samples.retain(|s| f(&s.x).iter().all(|v| v.abs() > margin));
    ds.samples.truncate(n);
    assert_eq!(ds.samples.len(), n);
    ds
}

/// Counts by direct enumeration; positive class is insecure.
pub fn brute_counts(pred_secure: &[bool], truth_secure: &[bool]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred_secure.iter().zip(truth_secure) {
        match (!p, !t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    (tp, fp, tn, fn_)
}

/// F2 in count form, `5tp / (5tp + 4fn + fp)`; a split with no positives
/// and no alarms scores 1.
pub fn brute_f2(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    5.0 * tp as f64 / (5 * tp + 4 * fn_ + fp) as f64
}
