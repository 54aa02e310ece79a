//! Synthetic data from a randomly drawn hidden Markov model.
//!
//! The generating HMM is retained so exact posterior marginals are available
//! as an oracle for calibration experiments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVocab, TokenDistribution, TokenSequence};
use crate::error::{Error, Result};

/// True parameters of a generating HMM.
///
/// `initial` is the stationary distribution of `transition`, so the marginal
/// state distribution is stationary at every position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub states: usize,
    pub obs_symbols: usize,
    /// Row-stochastic `states x states` matrix, `transition[i][j] = P(j | i)`.
    pub transition: Vec<Vec<f64>>,
    /// Row-stochastic `states x obs_symbols` matrix.
    pub emission: Vec<Vec<f64>>,
    /// Initial state distribution (stationary).
    pub initial: Vec<f64>,
}

/// Samples a probability vector from Dirichlet(1, ..., 1): normalized unit
/// exponentials.
fn dirichlet_uniform(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..dim)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln()
        })
        .collect();
    let s: f64 = row.iter().sum();
    for v in &mut row {
        *v /= s;
    }
    row
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..500 {
        let mut next = vec![0.0; n];
        for (i, p) in pi.iter().enumerate() {
            for (j, nx) in next.iter_mut().enumerate() {
                *nx += p * transition[i][j];
            }
        }
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-14 {
            break;
        }
    }
    pi
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl HmmSpec {
    /// Draws an HMM with Dirichlet(1) transition and emission rows.
    pub fn random(states: usize, obs_symbols: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if states < 2 || obs_symbols < 2 {
            return Err(Error::invalid("need states >= 2 and obs_symbols >= 2"));
        }
        let transition: Vec<Vec<f64>> = (0..states)
            .map(|_| dirichlet_uniform(rng, states))
            .collect();
        let emission: Vec<Vec<f64>> = (0..states)
            .map(|_| dirichlet_uniform(rng, obs_symbols))
            .collect();
        let initial = stationary_distribution(&transition);
        Ok(HmmSpec {
            states,
            obs_symbols,
            transition,
            emission,
            initial,
        })
    }

    /// Samples `n_seqs` sequences with lengths uniform in `len_range`.
    pub fn sample_dataset(
        &self,
        n_seqs: usize,
        len_range: (usize, usize),
        seed: u64,
    ) -> Result<Dataset> {
        let (lo, hi) = len_range;
        if lo < 1 || lo > hi {
            return Err(Error::invalid(format!("invalid len_range ({lo}, {hi})")));
        }
        if n_seqs < 1 {
            return Err(Error::invalid("n_seqs must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sequences = Vec::with_capacity(n_seqs);
        for _ in 0..n_seqs {
            let len = rng.random_range(lo..=hi);
            let mut tokens = Vec::with_capacity(len);
            let mut gold = Vec::with_capacity(len);
            let mut state = sample_categorical(&mut rng, &self.initial);
            for t in 0..len {
                if t > 0 {
                    state = sample_categorical(&mut rng, &self.transition[state]);
                }
                gold.push(state);
                tokens.push(sample_categorical(&mut rng, &self.emission[state]));
            }
            sequences.push(TokenSequence::new(tokens, gold)?);
        }
        let labels = (0..self.states).map(|s| format!("S{s}")).collect();
        Dataset::new(sequences, LabelVocab::new(labels)?, self.obs_symbols)
    }

    /// Exact posterior state marginals P(state_t | tokens) under this HMM,
    /// by scaled forward-backward in probability space.
    pub fn posterior_marginals(&self, tokens: &[usize]) -> Vec<TokenDistribution> {
        let n = self.states;
        let t_len = tokens.len();
        let mut alpha = vec![vec![0.0; n]; t_len];
        let mut scale = vec![0.0; t_len];

        for s in 0..n {
            alpha[0][s] = self.initial[s] * self.emission[s][tokens[0]];
        }
        scale[0] = alpha[0].iter().sum();
        alpha[0].iter_mut().for_each(|a| *a /= scale[0]);
        for t in 1..t_len {
            for s in 0..n {
                let mut v = 0.0;
                for sp in 0..n {
                    v += alpha[t - 1][sp] * self.transition[sp][s];
                }
                alpha[t][s] = v * self.emission[s][tokens[t]];
            }
            scale[t] = alpha[t].iter().sum();
            alpha[t].iter_mut().for_each(|a| *a /= scale[t]);
        }

        let mut beta = vec![vec![1.0; n]; t_len];
        for t in (0..t_len - 1).rev() {
            for s in 0..n {
                let mut v = 0.0;
                for sn in 0..n {
                    v += self.transition[s][sn] * self.emission[sn][tokens[t + 1]] * beta[t + 1][sn];
                }
                beta[t][s] = v / scale[t + 1];
            }
        }

        (0..t_len)
            .map(|t| {
                let mut probs: Vec<f64> = (0..n).map(|s| alpha[t][s] * beta[t][s]).collect();
                let z: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= z);
                TokenDistribution::new(probs).expect("posterior normalizes")
            })
            .collect()
    }
}

/// Draws an HMM and samples a dataset from it. Pure function of its
/// arguments: the same seed reproduces the same (dataset, spec) pair.
pub fn generate_hmm(
    states: usize,
    obs_symbols: usize,
    n_seqs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<(Dataset, HmmSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = HmmSpec::random(states, obs_symbols, &mut rng)?;
    // Derive the sampling seed from the same stream so one seed governs all.
    let sample_seed: u64 = rng.random();
    let data = spec.sample_dataset(n_seqs, len_range, sample_seed)?;
    Ok((data, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, spec_a) = generate_hmm(3, 5, 20, (2, 6), 7).unwrap();
        let (b, spec_b) = generate_hmm(3, 5, 20, (2, 6), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(spec_a, spec_b);
    }

    #[test]
    fn different_seeds_differ() {
        let (a, _) = generate_hmm(3, 5, 20, (2, 6), 7).unwrap();
        let (b, _) = generate_hmm(3, 5, 20, (2, 6), 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_len_range_is_an_error() {
        assert!(generate_hmm(3, 5, 10, (4, 2), 1).is_err());
        assert!(generate_hmm(3, 5, 10, (0, 2), 1).is_err());
    }

    #[test]
    fn identical_emission_rows_give_stationary_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = HmmSpec::random(2, 4, &mut rng).unwrap();
        spec.emission[1] = spec.emission[0].clone();
        let marg = spec.posterior_marginals(&[0, 1, 2, 3, 1]);
        for m in marg {
            for (p, pi) in m.probs().iter().zip(&spec.initial) {
                assert!((p - pi).abs() < 1e-10, "posterior {p} vs stationary {pi}");
            }
        }
    }

    #[test]
    fn stationary_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = HmmSpec::random(4, 3, &mut rng).unwrap();
        let pi = &spec.initial;
        for j in 0..4 {
            let prop: f64 = (0..4).map(|i| pi[i] * spec.transition[i][j]).sum();
            assert!((prop - pi[j]).abs() < 1e-10);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empirical_label_frequencies_match_stationary() {
        // 3 states, 10 obs, 500 sequences: multinomial 3-sigma bound.
        let (data, spec) = generate_hmm(3, 10, 500, (8, 14), 42).unwrap();
        let mut counts = [0usize; 3];
        for seq in &data.sequences {
            for &g in &seq.gold {
                counts[g] += 1;
            }
        }
        let n = data.total_tokens as f64;
        for s in 0..3 {
            let p = spec.initial[s];
            let sigma = (p * (1.0 - p) / n).sqrt();
            let freq = counts[s] as f64 / n;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "state {s}: freq {freq} vs stationary {p} (sigma {sigma})"
            );
        }
    }
}
