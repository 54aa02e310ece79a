//! First-order autoregressive tagger (MEMM-style): the distribution at
//! position t conditions on the observation id and the previous label.

use serde::{Deserialize, Serialize};

use crate::data::{TokenDistribution, TokenSequence};
use crate::math::{argmax, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    /// `obs_vocab_size x V` emission scores.
    pub emission: Mat,
    /// `(V + 1) x V` previous-label scores; row `V` is the explicit
    /// begin-of-sequence row.
    pub prev_label: Mat,
    /// Per-label bias, length `V`.
    pub bias: Vec<f64>,
}

impl ArParams {
    pub fn zeros(obs_vocab_size: usize, v: usize) -> Self {
        ArParams {
            emission: Mat::zeros(obs_vocab_size, v),
            prev_label: Mat::zeros(v + 1, v),
            bias: vec![0.0; v],
        }
    }

    pub fn label_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn obs_vocab_size(&self) -> usize {
        self.emission.rows()
    }

    /// Index of the begin-of-sequence row in `prev_label`.
    pub fn bos_row(&self) -> usize {
        self.label_dim()
    }

    pub fn logits(&self, obs: usize, prev: usize) -> Vec<f64> {
        let e = self.emission.row(obs);
        let p = self.prev_label.row(prev);
        (0..self.label_dim())
            .map(|y| e[y] + p[y] + self.bias[y])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.emission.is_finite()
            && self.prev_label.is_finite()
            && self.bias.iter().all(|x| x.is_finite())
    }
}

/// Teacher-forced distributions: position t conditions on `gold[t-1]`
/// (or the BOS row at t = 0).
pub fn ar_teacher_forced(params: &ArParams, seq: &TokenSequence) -> Vec<TokenDistribution> {
    let bos = params.bos_row();
    seq.tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let prev = if t == 0 { bos } else { seq.gold[t - 1] };
            TokenDistribution::from_logits(&params.logits(tok, prev))
        })
        .collect()
}

/// Free-running distributions: position t conditions on the model's own
/// greedy prediction at t - 1.
pub fn ar_free_running(params: &ArParams, tokens: &[usize]) -> Vec<TokenDistribution> {
    let mut prev = params.bos_row();
    tokens
        .iter()
        .map(|&tok| {
            let d = TokenDistribution::from_logits(&params.logits(tok, prev));
            prev = d.argmax();
            d
        })
        .collect()
}

/// Greedy decode: argmax chain feeding its own previous prediction.
pub fn ar_greedy_decode(params: &ArParams, tokens: &[usize]) -> Vec<usize> {
    let mut prev = params.bos_row();
    tokens
        .iter()
        .map(|&tok| {
            let y = argmax(&params.logits(tok, prev));
            prev = y;
            y
        })
        .collect()
}
