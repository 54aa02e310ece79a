//! Post-hoc temperature scaling fitted by golden-section search on held-out
//! NLL. Rank-preserving by construction.

use serde::{Deserialize, Serialize};

use crate::data::TokenDistribution;
use crate::error::{Error, Result};

/// Fitted post-hoc scaling temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParam {
    pub temperature: f64,
}

/// Fit result with before/after NLL for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub param: TemperatureParam,
    pub nll_before: f64,
    pub nll_after: f64,
    /// True when the inputs were degenerate (all logit vectors constant) and
    /// T = 1 was returned unfit.
    pub degenerate: bool,
}

/// `softmax(logits / T)`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<TokenDistribution> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(TokenDistribution::from_logits(&scaled))
}

/// Mean NLL of `softmax(logits / T)` against gold labels.
pub fn scaled_nll(logit_sets: &[Vec<f64>], gold: &[usize], temperature: f64) -> Result<f64> {
    if logit_sets.is_empty() || logit_sets.len() != gold.len() {
        return Err(Error::invalid("scaled_nll needs aligned non-empty inputs"));
    }
    let mut total = 0.0;
    for (logits, &g) in logit_sets.iter().zip(gold) {
        let dist = apply_temperature(logits, temperature)?;
        total -= crate::math::ln_clamped(dist.prob(g), 1e-300);
    }
    Ok(total / logit_sets.len() as f64)
}

const LOG_T_LO: f64 = -4.0;
const LOG_T_HI: f64 = 4.0;
const LOG_T_TOL: f64 = 1e-6;

/// Fits T minimizing mean held NLL by golden-section search over
/// `log T in [-4, 4]` to 1e-6 absolute tolerance in log T. Never returns a
/// temperature with NLL above the T = 1 NLL; degenerate inputs (every logit
/// vector constant) return T = 1 flagged.
pub fn fit_temperature(logit_sets: &[Vec<f64>], gold: &[usize]) -> Result<TemperatureFit> {
    if logit_sets.is_empty() || logit_sets.len() != gold.len() {
        return Err(Error::invalid("fit_temperature needs aligned non-empty inputs"));
    }
    for (i, logits) in logit_sets.iter().enumerate() {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid(format!("non-finite logits at index {i}")));
        }
        if gold[i] >= logits.len() {
            return Err(Error::invalid(format!("gold index out of range at {i}")));
        }
    }
    let nll_before = scaled_nll(logit_sets, gold, 1.0)?;

    let degenerate = logit_sets.iter().all(|logits| {
        let lo = logits.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo < 1e-12
    });
    if degenerate {
        return Ok(TemperatureFit {
            param: TemperatureParam { temperature: 1.0 },
            nll_before,
            nll_after: nll_before,
            degenerate: true,
        });
    }

    let objective = |log_t: f64| scaled_nll(logit_sets, gold, log_t.exp()).unwrap();

    // Golden-section search on log T.
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_LO, LOG_T_HI);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while (b - a).abs() > LOG_T_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d);
        }
    }
    let log_t = 0.5 * (a + b);
    let mut temperature = log_t.exp();
    let mut nll_after = scaled_nll(logit_sets, gold, temperature)?;

    // T = 1 lies in the search domain; keep it when the search cannot beat it.
    if nll_after > nll_before {
        temperature = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit {
        param: TemperatureParam { temperature },
        nll_before,
        nll_after,
        degenerate: false,
    })
}
