//! Linear-chain CRF with explicit start/stop potentials.
//!
//! Path score for labels `y` over a sequence of length `T`:
//!
//! ```text
//! start[y_0] + sum_t emit(t, y_t) + sum_{t>=1} trans[y_{t-1}][y_t] + stop[y_{T-1}]
//! ```
//!
//! with `emit(t, y) = emission[tokens[t]][y] + bias[y]`. All dynamic programs
//! run in log space with max-subtraction.

use serde::{Deserialize, Serialize};

use crate::data::{TokenDistribution, TokenSequence};
use crate::math::{log_sum_exp, Mat};
use crate::training::smoothed_target;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `obs_vocab_size x V` emission scores.
    pub emission: Mat,
    /// Per-label bias, length `V`.
    pub bias: Vec<f64>,
    /// `V x V` transition log-potentials, `transitions[prev][next]`.
    pub transitions: Mat,
    /// Start potentials, length `V`.
    pub start: Vec<f64>,
    /// Stop potentials, length `V`.
    pub stop: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(obs_vocab_size: usize, v: usize) -> Self {
        CrfParams {
            emission: Mat::zeros(obs_vocab_size, v),
            bias: vec![0.0; v],
            transitions: Mat::zeros(v, v),
            start: vec![0.0; v],
            stop: vec![0.0; v],
        }
    }

    pub fn label_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn obs_vocab_size(&self) -> usize {
        self.emission.rows()
    }

    #[inline]
    fn emit(&self, obs: usize, y: usize) -> f64 {
        self.emission.get(obs, y) + self.bias[y]
    }

    pub fn is_finite(&self) -> bool {
        self.emission.is_finite()
            && self.transitions.is_finite()
            && self.bias.iter().all(|x| x.is_finite())
            && self.start.iter().all(|x| x.is_finite())
            && self.stop.iter().all(|x| x.is_finite())
    }

    /// Log-space score of a full label path.
    pub fn path_score(&self, seq: &TokenSequence, path: &[usize]) -> f64 {
        let mut score = self.start[path[0]] + self.emit(seq.tokens[0], path[0]);
        for t in 1..path.len() {
            score += self.transitions.get(path[t - 1], path[t]) + self.emit(seq.tokens[t], path[t]);
        }
        score + self.stop[path[path.len() - 1]]
    }
}

struct ForwardBackward {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    log_z: f64,
}

fn forward_backward_tables(params: &CrfParams, tokens: &[usize]) -> ForwardBackward {
    let v = params.label_dim();
    let t_len = tokens.len();

    let mut alpha = vec![vec![0.0; v]; t_len];
    for y in 0..v {
        alpha[0][y] = params.start[y] + params.emit(tokens[0], y);
    }
    let mut scratch = vec![0.0; v];
    for t in 1..t_len {
        for y in 0..v {
            for (yp, s) in scratch.iter_mut().enumerate() {
                *s = alpha[t - 1][yp] + params.transitions.get(yp, y);
            }
            alpha[t][y] = params.emit(tokens[t], y) + log_sum_exp(&scratch);
        }
    }
    for (y, s) in scratch.iter_mut().enumerate() {
        *s = alpha[t_len - 1][y] + params.stop[y];
    }
    let log_z = log_sum_exp(&scratch);

    let mut beta = vec![vec![0.0; v]; t_len];
    for y in 0..v {
        beta[t_len - 1][y] = params.stop[y];
    }
    for t in (0..t_len - 1).rev() {
        for y in 0..v {
            for (yn, s) in scratch.iter_mut().enumerate() {
                *s = params.transitions.get(y, yn) + params.emit(tokens[t + 1], yn) + beta[t + 1][yn];
            }
            beta[t][y] = log_sum_exp(&scratch);
        }
    }

    ForwardBackward { alpha, beta, log_z }
}

impl ForwardBackward {
    /// log_Z recomputed from the backward pass; equals `log_z` up to rounding.
    fn log_z_backward(&self, params: &CrfParams, tokens: &[usize]) -> f64 {
        let v = params.label_dim();
        let scores: Vec<f64> = (0..v)
            .map(|y| params.start[y] + params.emit(tokens[0], y) + self.beta[0][y])
            .collect();
        log_sum_exp(&scores)
    }
}

/// Globally normalized per-position marginals and the log partition function.
pub fn crf_forward_backward(
    params: &CrfParams,
    seq: &TokenSequence,
) -> (Vec<TokenDistribution>, f64) {
    let fb = forward_backward_tables(params, &seq.tokens);
    let v = params.label_dim();
    let marginals = (0..seq.len())
        .map(|t| {
            let mut probs: Vec<f64> = (0..v)
                .map(|y| (fb.alpha[t][y] + fb.beta[t][y] - fb.log_z).exp())
                .collect();
            // Renormalize away rounding residue; the sum is already 1 +- 1e-12.
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            TokenDistribution::new(probs).expect("forward-backward marginal normalizes")
        })
        .collect();
    (marginals, fb.log_z)
}

/// log_Z computed from the forward and from the backward recursion; the two
/// must agree up to rounding (consistency diagnostic).
pub fn crf_log_z_both_directions(params: &CrfParams, seq: &TokenSequence) -> (f64, f64) {
    let fb = forward_backward_tables(params, &seq.tokens);
    let back = fb.log_z_backward(params, &seq.tokens);
    (fb.log_z, back)
}

/// MAP decoding. Ties break toward the lowest label index at every argmax,
/// which resolves equal-scoring paths toward the lowest index at the latest
/// position where they differ.
pub fn crf_viterbi(params: &CrfParams, seq: &TokenSequence) -> Vec<usize> {
    let v = params.label_dim();
    let t_len = seq.len();
    let mut delta = vec![vec![0.0; v]; t_len];
    let mut back = vec![vec![0usize; v]; t_len];

    for y in 0..v {
        delta[0][y] = params.start[y] + params.emit(seq.tokens[0], y);
    }
    for t in 1..t_len {
        for y in 0..v {
            let mut best_prev = 0;
            let mut best = delta[t - 1][0] + params.transitions.get(0, y);
            for yp in 1..v {
                let cand = delta[t - 1][yp] + params.transitions.get(yp, y);
                if cand > best {
                    best = cand;
                    best_prev = yp;
                }
            }
            delta[t][y] = best + params.emit(seq.tokens[t], y);
            back[t][y] = best_prev;
        }
    }

    let mut last = 0;
    let mut best = delta[t_len - 1][0] + params.stop[0];
    for y in 1..v {
        let cand = delta[t_len - 1][y] + params.stop[y];
        if cand > best {
            best = cand;
            last = y;
        }
    }

    let mut path = vec![0usize; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Negative log-likelihood of the gold path and its exact gradient
/// (expected feature counts minus gold feature counts).
pub fn crf_nll_grad(params: &CrfParams, seq: &TokenSequence) -> (f64, CrfParams) {
    crf_loss_grad(params, seq, 0.0)
}

/// NLL generalized with token-level label smoothing: the observed feature
/// counts are taken in expectation over independently smoothed targets, which
/// reduces exactly to the gold counts at `lambda = 0`.
pub fn crf_loss_grad(params: &CrfParams, seq: &TokenSequence, lambda: f64) -> (f64, CrfParams) {
    let v = params.label_dim();
    let t_len = seq.len();
    let tokens = &seq.tokens;
    let fb = forward_backward_tables(params, tokens);

    let targets: Vec<Vec<f64>> = seq
        .gold
        .iter()
        .map(|&g| smoothed_target(g, v, lambda).probs().to_vec())
        .collect();

    // Observed (smoothed) path score.
    let mut observed = 0.0;
    for y in 0..v {
        observed += targets[0][y] * params.start[y];
        observed += targets[t_len - 1][y] * params.stop[y];
    }
    for t in 0..t_len {
        for y in 0..v {
            observed += targets[t][y] * params.emit(tokens[t], y);
        }
    }
    for t in 1..t_len {
        for a in 0..v {
            if targets[t - 1][a] == 0.0 {
                continue;
            }
            for b in 0..v {
                observed += targets[t - 1][a] * targets[t][b] * params.transitions.get(a, b);
            }
        }
    }
    let loss = fb.log_z - observed;

    let mut grad = CrfParams::zeros(params.obs_vocab_size(), v);

    // Unary marginals drive emission, bias, start, stop expectations.
    for t in 0..t_len {
        for y in 0..v {
            let p = (fb.alpha[t][y] + fb.beta[t][y] - fb.log_z).exp();
            let delta = p - targets[t][y];
            grad.emission.add_at(tokens[t], y, delta);
            grad.bias[y] += delta;
            if t == 0 {
                grad.start[y] += delta;
            }
            if t == t_len - 1 {
                grad.stop[y] += delta;
            }
        }
    }

    // Pairwise marginals drive the transition expectations.
    for t in 1..t_len {
        for a in 0..v {
            for b in 0..v {
                let p = (fb.alpha[t - 1][a]
                    + params.transitions.get(a, b)
                    + params.emit(tokens[t], b)
                    + fb.beta[t][b]
                    - fb.log_z)
                    .exp();
                grad.transitions
                    .add_at(a, b, p - targets[t - 1][a] * targets[t][b]);
            }
        }
    }

    (loss, grad)
}
