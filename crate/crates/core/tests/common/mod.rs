//! Independent oracles for integration tests: brute-force CRF path
//! enumeration, finite differences, and per-definition metric recomputation.
//! These deliberately avoid the library's own dynamic programs and binning
//! code paths.

#![allow(dead_code)]

use csp_core::calibration::PredictionRecord;
use csp_core::data::TokenSequence;
use csp_core::taggers::CrfParams;

/// Every label path of length `t_len` over `v` labels.
pub fn all_paths(v: usize, t_len: usize) -> Vec<Vec<usize>> {
    let total = v.pow(t_len as u32);
    let mut paths = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut path = vec![0usize; t_len];
        for slot in path.iter_mut().rev() {
            *slot = code % v;
            code /= v;
        }
        paths.push(path);
    }
    paths
}

/// Path score recomputed directly from the parameter blocks.
pub fn path_score(params: &CrfParams, tokens: &[usize], path: &[usize]) -> f64 {
    let v = params.label_dim();
    let emit = |t: usize, y: usize| params.emission.get(tokens[t], y) + params.bias[y];
    let mut score = params.start[path[0]] + emit(0, path[0]);
    for t in 1..path.len() {
        score += params.transitions.get(path[t - 1], path[t]) + emit(t, path[t]);
    }
    debug_assert!(path.iter().all(|&y| y < v));
    score + params.stop[path[path.len() - 1]]
}

/// Enumeration oracle: exact marginals and log_Z by summing over all paths.
pub fn enumerate_marginals(params: &CrfParams, tokens: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let v = params.label_dim();
    let t_len = tokens.len();
    let paths = all_paths(v, t_len);
    let scores: Vec<f64> = paths.iter().map(|p| path_score(params, tokens, p)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + z.ln();
    let mut marginals = vec![vec![0.0; v]; t_len];
    for (path, score) in paths.iter().zip(&scores) {
        let w = (score - max).exp() / z;
        for (t, &y) in path.iter().enumerate() {
            marginals[t][y] += w;
        }
    }
    (marginals, log_z)
}

/// Enumeration oracle for MAP decoding with the lowest-index-at-latest-
/// differing-position tie-break.
pub fn enumerate_viterbi(params: &CrfParams, tokens: &[usize]) -> Vec<usize> {
    let v = params.label_dim();
    let paths = all_paths(v, tokens.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for path in paths {
        let score = path_score(params, tokens, &path);
        let replace = match &best {
            None => true,
            Some((bs, bp)) => {
                if score > bs + 1e-12 {
                    true
                } else if (score - bs).abs() <= 1e-12 {
                    // Prefer the lower label at the latest differing position.
                    let mut pick = false;
                    for t in (0..path.len()).rev() {
                        if path[t] != bp[t] {
                            pick = path[t] < bp[t];
                            break;
                        }
                    }
                    pick
                } else {
                    false
                }
            }
        };
        if replace {
            best = Some((score, path));
        }
    }
    best.unwrap().1
}

/// Gold-path NLL recomputed by enumeration.
pub fn enumerate_nll(params: &CrfParams, seq: &TokenSequence) -> f64 {
    let (_, log_z) = enumerate_marginals(params, &seq.tokens);
    log_z - path_score(params, &seq.tokens, &seq.gold)
}

/// Per-definition ECE: sort ascending (stable), chunk with larger bins
/// first, weight absolute confidence/accuracy gaps by bin mass.
pub fn recompute_ece(records: &[(f64, bool)], n_bins: usize) -> f64 {
    let mut sorted: Vec<(f64, bool)> = records.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = sorted.len();
    let base = n / n_bins;
    let rem = n % n_bins;
    let mut out = 0.0;
    let mut start = 0;
    for b in 0..n_bins {
        let size = if b < rem { base + 1 } else { base };
        let group = &sorted[start..start + size];
        start += size;
        let conf: f64 = group.iter().map(|r| r.0).sum::<f64>() / size as f64;
        let acc: f64 = group.iter().filter(|r| r.1).count() as f64 / size as f64;
        out += (size as f64 / n as f64) * (conf - acc).abs();
    }
    out
}

pub fn recompute_brier(records: &[(f64, bool)]) -> f64 {
    records
        .iter()
        .map(|&(p, o)| (p - if o { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / records.len() as f64
}

pub fn to_records(pairs: &[(f64, bool)]) -> Vec<PredictionRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(confidence, correct))| PredictionRecord {
            confidence,
            correct,
            class_id: 0,
            position: i,
        })
        .collect()
}

/// Uniformly random CRF parameters in [-scale, scale].
pub fn random_crf(
    rng: &mut rand_chacha::ChaCha8Rng,
    obs: usize,
    v: usize,
    scale: f64,
) -> CrfParams {
    use rand::Rng;
    let mut p = CrfParams::zeros(obs, v);
    for x in p.emission.data_mut() {
        *x = rng.random_range(-scale..scale);
    }
    for x in p.transitions.data_mut() {
        *x = rng.random_range(-scale..scale);
    }
    for x in &mut p.bias {
        *x = rng.random_range(-scale..scale);
    }
    for x in &mut p.start {
        *x = rng.random_range(-scale..scale);
    }
    for x in &mut p.stop {
        *x = rng.random_range(-scale..scale);
    }
    p
}
