//! IID softmax tagger: each position predicted independently from its
//! observation id.

use serde::{Deserialize, Serialize};

use crate::data::{TokenDistribution, TokenSequence};
use crate::math::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IidParams {
    /// `obs_vocab_size x V` emission scores.
    pub emission: Mat,
    /// Per-label bias, length `V`.
    pub bias: Vec<f64>,
}

impl IidParams {
    pub fn zeros(obs_vocab_size: usize, v: usize) -> Self {
        IidParams {
            emission: Mat::zeros(obs_vocab_size, v),
            bias: vec![0.0; v],
        }
    }

    pub fn label_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn obs_vocab_size(&self) -> usize {
        self.emission.rows()
    }

    /// Unnormalized logits for one observation id.
    pub fn logits(&self, obs: usize) -> Vec<f64> {
        self.emission
            .row(obs)
            .iter()
            .zip(&self.bias)
            .map(|(e, b)| e + b)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.emission.is_finite() && self.bias.iter().all(|x| x.is_finite())
    }
}

/// Per-position softmax distributions: `softmax(emission[tokens[t]] + bias)`.
pub fn iid_marginals(params: &IidParams, seq: &TokenSequence) -> Vec<TokenDistribution> {
    iid_marginals_tokens(params, &seq.tokens)
}

pub fn iid_marginals_tokens(params: &IidParams, tokens: &[usize]) -> Vec<TokenDistribution> {
    tokens
        .iter()
        .map(|&t| TokenDistribution::from_logits(&params.logits(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn zero_params_are_uniform() {
        let params = IidParams::zeros(4, 3);
        let seq = TokenSequence::new(vec![0, 3, 1], vec![0, 0, 0]).unwrap();
        for d in iid_marginals(&params, &seq) {
            for p in d.probs() {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_logit_shift_leaves_distribution_unchanged() {
        let mut params = IidParams::zeros(2, 3);
        params.emission.row_mut(0).copy_from_slice(&[0.3, -1.0, 2.0]);
        let seq = TokenSequence::new(vec![0], vec![0]).unwrap();
        let base = iid_marginals(&params, &seq);
        for x in params.emission.row_mut(0) {
            *x += 7.5;
        }
        let shifted = iid_marginals(&params, &seq);
        for (a, b) in base[0].probs().iter().zip(shifted[0].probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_exp_normalize() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut params = IidParams::zeros(5, 3);
        for r in 0..5 {
            for x in params.emission.row_mut(r) {
                *x = rng.random_range(-2.0..2.0);
            }
        }
        for b in &mut params.bias {
            *b = rng.random_range(-1.0..1.0);
        }
        let seq = TokenSequence::new(vec![2, 0, 4], vec![0, 0, 0]).unwrap();
        let dists = iid_marginals(&params, &seq);
        for (t, d) in dists.iter().enumerate() {
            let tok = seq.tokens[t];
            let raw: Vec<f64> = (0..3)
                .map(|y| (params.emission.get(tok, y) + params.bias[y]).exp())
                .collect();
            let z: f64 = raw.iter().sum();
            for (p, r) in d.probs().iter().zip(&raw) {
                assert!((p - r / z).abs() < 1e-12);
            }
        }
    }
}
