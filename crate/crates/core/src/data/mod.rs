//! Label vocabularies, token sequences, CoNLL ingestion, dataset splits, and
//! a synthetic HMM generator for oracle-verifiable experiments.

mod conll;
mod hmm;
mod jsonl;
mod split;

pub use conll::{parse_conll, parse_conll_with_vocab, ObsVocab, TagScheme};
pub use hmm::{generate_hmm, HmmSpec};
pub use jsonl::{read_dataset_jsonl, write_dataset_jsonl};
pub use split::split_dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the probability-sum invariant of [`TokenDistribution`].
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Ordered label vocabulary; `index(label)` is a bijection onto `[0, size)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    labels: Vec<String>,
}

impl LabelVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid("label vocabulary needs at least 2 labels"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid(format!("duplicate label `{l}`")));
            }
        }
        Ok(LabelVocab { labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// One observation sequence with its gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub gold: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, gold: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("sequence must have length >= 1"));
        }
        if tokens.len() != gold.len() {
            return Err(Error::invalid(format!(
                "tokens/gold length mismatch: {} vs {}",
                tokens.len(),
                gold.len()
            )));
        }
        Ok(TokenSequence { tokens, gold })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A collection of sequences over a shared label and observation vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<TokenSequence>,
    pub vocab: LabelVocab,
    pub obs_vocab_size: usize,
    pub total_tokens: usize,
}

impl Dataset {
    pub fn new(
        sequences: Vec<TokenSequence>,
        vocab: LabelVocab,
        obs_vocab_size: usize,
    ) -> Result<Self> {
        let v = vocab.size();
        let mut total = 0;
        for (i, seq) in sequences.iter().enumerate() {
            total += seq.len();
            if let Some(&g) = seq.gold.iter().find(|&&g| g >= v) {
                return Err(Error::invalid(format!(
                    "sequence {i}: gold label index {g} out of range (V = {v})"
                )));
            }
            if let Some(&t) = seq.tokens.iter().find(|&&t| t >= obs_vocab_size) {
                return Err(Error::invalid(format!(
                    "sequence {i}: observation id {t} out of range ({obs_vocab_size})"
                )));
            }
        }
        Ok(Dataset {
            sequences,
            vocab,
            obs_vocab_size,
            total_tokens: total,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }
}

/// Normalized probability vector over the label vocabulary for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates the normalization invariant: entries in [0,1], sum within
    /// `NORMALIZATION_TOL` of 1.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probability outside [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1 within {NORMALIZATION_TOL}"
            )));
        }
        Ok(TokenDistribution { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        TokenDistribution {
            probs: crate::math::softmax(logits),
        }
    }

    pub fn uniform(v: usize) -> Self {
        TokenDistribution {
            probs: vec![1.0 / v as f64; v],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.probs[label]
    }

    /// Highest-probability label; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        crate::math::argmax(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}
