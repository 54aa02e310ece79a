//! Per-sequence loss/gradient providers consumed by the shared trainer.

use crate::data::{Dataset, TokenSequence};
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::taggers::{crf_loss_grad, TaggerParams};
use crate::training::smoothed_target;

/// A training objective: accumulates the (unnormalized) gradient for one
/// sequence into `grad` and returns the sum of the sequence's token losses.
pub(crate) trait Objective {
    fn seq_loss_grad(
        &self,
        params: &TaggerParams,
        seq: &TokenSequence,
        seq_index: usize,
        grad: &mut TaggerParams,
    ) -> Result<f64>;

    /// Loss only, for held-set evaluation.
    fn seq_loss(&self, params: &TaggerParams, seq: &TokenSequence, seq_index: usize)
        -> Result<f64>;
}

/// Cross-entropy against (optionally smoothed) gold targets.
pub(crate) struct BaselineObjective {
    pub label_smoothing: f64,
}

/// Smoothed cross-entropy of one token and its logit gradient (`p - target`).
pub(crate) fn token_nll_grad(
    logits: &[f64],
    gold: usize,
    lambda: f64,
    grad_logits: &mut [f64],
) -> f64 {
    let probs = softmax(logits);
    let target = smoothed_target(gold, logits.len(), lambda);
    let mut loss = 0.0;
    for y in 0..logits.len() {
        let t = target.prob(y);
        if t > 0.0 {
            loss -= t * crate::math::ln_clamped(probs[y], 1e-300);
        }
        grad_logits[y] = probs[y] - t;
    }
    loss
}

pub(crate) fn token_nll(logits: &[f64], gold: usize, lambda: f64) -> f64 {
    let probs = softmax(logits);
    let target = smoothed_target(gold, logits.len(), lambda);
    let mut loss = 0.0;
    for y in 0..logits.len() {
        let t = target.prob(y);
        if t > 0.0 {
            loss -= t * crate::math::ln_clamped(probs[y], 1e-300);
        }
    }
    loss
}

/// Scatters a logit gradient into the parameter blocks it touches.
pub(crate) fn scatter_logit_grad(
    grad: &mut TaggerParams,
    token: usize,
    prev: Option<usize>,
    g: &[f64],
) {
    match grad {
        TaggerParams::Iid(p) => {
            let row = p.emission.row_mut(token);
            for (y, gy) in g.iter().enumerate() {
                row[y] += gy;
                p.bias[y] += gy;
            }
        }
        TaggerParams::Ar(p) => {
            let prev = prev.expect("AR gradient requires a previous-label row");
            for (y, gy) in g.iter().enumerate() {
                p.emission.add_at(token, y, *gy);
                p.prev_label.add_at(prev, y, *gy);
                p.bias[y] += gy;
            }
        }
        TaggerParams::Crf(_) => unreachable!("CRF gradients go through crf_loss_grad"),
    }
}

fn add_crf_grad(grad: &mut TaggerParams, delta: &TaggerParams) {
    match (grad, delta) {
        (TaggerParams::Crf(g), TaggerParams::Crf(d)) => {
            for (a, b) in g.emission.data_mut().iter_mut().zip(d.emission.data()) {
                *a += b;
            }
            for (a, b) in g.bias.iter_mut().zip(&d.bias) {
                *a += b;
            }
            for (a, b) in g.transitions.data_mut().iter_mut().zip(d.transitions.data()) {
                *a += b;
            }
            for (a, b) in g.start.iter_mut().zip(&d.start) {
                *a += b;
            }
            for (a, b) in g.stop.iter_mut().zip(&d.stop) {
                *a += b;
            }
        }
        _ => unreachable!("mismatched parameter families"),
    }
}

impl Objective for BaselineObjective {
    fn seq_loss_grad(
        &self,
        params: &TaggerParams,
        seq: &TokenSequence,
        _seq_index: usize,
        grad: &mut TaggerParams,
    ) -> Result<f64> {
        match params {
            TaggerParams::Iid(p) => {
                let mut g = vec![0.0; p.label_dim()];
                let mut loss = 0.0;
                for (t, &tok) in seq.tokens.iter().enumerate() {
                    let logits = p.logits(tok);
                    loss += token_nll_grad(&logits, seq.gold[t], self.label_smoothing, &mut g);
                    scatter_logit_grad(grad, tok, None, &g);
                }
                Ok(loss)
            }
            TaggerParams::Ar(p) => {
                let mut g = vec![0.0; p.label_dim()];
                let mut loss = 0.0;
                let bos = p.bos_row();
                for (t, &tok) in seq.tokens.iter().enumerate() {
                    let prev = if t == 0 { bos } else { seq.gold[t - 1] };
                    let logits = p.logits(tok, prev);
                    loss += token_nll_grad(&logits, seq.gold[t], self.label_smoothing, &mut g);
                    scatter_logit_grad(grad, tok, Some(prev), &g);
                }
                Ok(loss)
            }
            TaggerParams::Crf(p) => {
                let (loss, delta) = crf_loss_grad(p, seq, self.label_smoothing);
                add_crf_grad(grad, &TaggerParams::Crf(delta));
                Ok(loss)
            }
        }
    }

    fn seq_loss(
        &self,
        params: &TaggerParams,
        seq: &TokenSequence,
        _seq_index: usize,
    ) -> Result<f64> {
        match params {
            TaggerParams::Iid(p) => Ok(seq
                .tokens
                .iter()
                .enumerate()
                .map(|(t, &tok)| token_nll(&p.logits(tok), seq.gold[t], self.label_smoothing))
                .sum()),
            TaggerParams::Ar(p) => {
                let bos = p.bos_row();
                Ok(seq
                    .tokens
                    .iter()
                    .enumerate()
                    .map(|(t, &tok)| {
                        let prev = if t == 0 { bos } else { seq.gold[t - 1] };
                        token_nll(&p.logits(tok, prev), seq.gold[t], self.label_smoothing)
                    })
                    .sum())
            }
            TaggerParams::Crf(p) => {
                let (loss, _) = crf_loss_grad(p, seq, self.label_smoothing);
                Ok(loss)
            }
        }
    }
}

/// Mean per-token loss of `objective` over a dataset.
pub(crate) fn dataset_nll(
    params: &TaggerParams,
    data: &Dataset,
    objective: &dyn Objective,
) -> Result<f64> {
    if data.total_tokens == 0 {
        return Err(Error::invalid("cannot evaluate NLL on an empty dataset"));
    }
    let mut total = 0.0;
    for (i, seq) in data.sequences.iter().enumerate() {
        total += objective.seq_loss(params, seq, i)?;
    }
    Ok(total / data.total_tokens as f64)
}
