//! Synthetic token streams drawn from a seeded order-2 Markov chain.
//!
//! Each token follows a fixed successor of the previous token with
//! probability 0.6, a fixed successor of the token before that with
//! probability 0.3, and is uniform otherwise. The first rule is learnable
//! from the residual stream alone; the second needs attention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P_PREV: f64 = 0.6;
const P_PREV2: f64 = 0.3;

pub fn synth_corpus(seed: u64, n_tokens: usize, vocab: usize) -> Vec<usize> {
    assert!(vocab >= 4, "vocabulary needs at least 4 tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut after_prev: Vec<usize> = (0..vocab).collect();
    after_prev.shuffle(&mut rng);
    let after_prev2: Vec<usize> = (0..vocab).map(|_| rng.random_range(0..vocab)).collect();

    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let tok = if i < 2 {
            rng.random_range(0..vocab)
        } else {
            let u: f64 = rng.random();
            if u < P_PREV {
                after_prev[out[i - 1]]
            } else if u < P_PREV + P_PREV2 {
                after_prev2[out[i - 2]]
            } else {
                rng.random_range(0..vocab)
            }
        };
        out.push(tok);
    }
    out
}

/// Disjoint train / held-out / calibration slices of one corpus.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub calib: Vec<usize>,
}

impl CorpusSplit {
    pub fn new(seed: u64, vocab: usize, n_train: usize, n_heldout: usize, n_calib: usize) -> Self {
        let all = synth_corpus(seed, n_train + n_heldout + n_calib, vocab);
        Self {
            train: all[..n_train].to_vec(),
            heldout: all[n_train..n_train + n_heldout].to_vec(),
            calib: all[n_train + n_heldout..].to_vec(),
        }
    }
}
