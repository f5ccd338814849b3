//! Seeded random instances for oracle checks.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::lattice::{JointLattice, LabelSequence, Vocab};

/// Joint logits drawn i.i.d. from `N(0, scale²)`.
pub fn random_lattice<R: Rng>(
    rng: &mut R,
    frames: usize,
    label_len: usize,
    classes: usize,
    scale: f64,
) -> JointLattice {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    JointLattice::new(Array3::from_shape_simple_fn(
        (frames, label_len + 1, classes),
        || normal.sample(rng),
    ))
}

/// Uniformly random labels from `1..=|V|`.
pub fn random_labels<R: Rng>(rng: &mut R, len: usize, vocab: &Vocab) -> LabelSequence {
    let tokens = (0..len)
        .map(|_| rng.random_range(1..=vocab.size()))
        .collect();
    LabelSequence::new(tokens, vocab).expect("labels drawn from vocab")
}
