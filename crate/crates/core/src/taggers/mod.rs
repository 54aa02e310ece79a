//! Desk-scale structured prediction models: IID softmax tagger, linear-chain
//! CRF with forward-backward marginals, and a first-order autoregressive
//! tagger trained with teacher forcing.

mod ar;
mod crf;
mod iid;
mod serialize;

pub use ar::{ar_greedy_decode, ar_teacher_forced, ArParams};
pub use crf::{
    crf_forward_backward, crf_log_z_both_directions, crf_loss_grad, crf_nll_grad, crf_viterbi,
    CrfParams,
};
pub use iid::{iid_marginals, iid_marginals_tokens, IidParams};
pub use serialize::{load_params, params_from_bytes, params_to_bytes, save_params, PARAMS_MAGIC};

use serde::{Deserialize, Serialize};

use crate::data::{TokenDistribution, TokenSequence};
use crate::error::{Error, Result};

/// Tagger family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Iid,
    Crf,
    Ar,
}

impl ModelType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelType::Iid => "iid",
            ModelType::Crf => "crf",
            ModelType::Ar => "ar",
        }
    }
}

impl std::str::FromStr for ModelType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(ModelType::Iid),
            "crf" => Ok(ModelType::Crf),
            "ar" => Ok(ModelType::Ar),
            other => Err(Error::invalid(format!("unknown model type `{other}`"))),
        }
    }
}

/// Parameters of any tagger family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaggerParams {
    Iid(IidParams),
    Crf(CrfParams),
    Ar(ArParams),
}

/// How autoregressive members compute token-level distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArMode {
    /// Condition on gold previous labels (teacher forcing).
    Gold,
    /// Condition on the model's own greedy prefix.
    Decode,
}

impl TaggerParams {
    pub fn model_type(&self) -> ModelType {
        match self {
            TaggerParams::Iid(_) => ModelType::Iid,
            TaggerParams::Crf(_) => ModelType::Crf,
            TaggerParams::Ar(_) => ModelType::Ar,
        }
    }

    pub fn zeros(model_type: ModelType, obs_vocab_size: usize, v: usize) -> Self {
        match model_type {
            ModelType::Iid => TaggerParams::Iid(IidParams::zeros(obs_vocab_size, v)),
            ModelType::Crf => TaggerParams::Crf(CrfParams::zeros(obs_vocab_size, v)),
            ModelType::Ar => TaggerParams::Ar(ArParams::zeros(obs_vocab_size, v)),
        }
    }

    pub fn label_dim(&self) -> usize {
        match self {
            TaggerParams::Iid(p) => p.label_dim(),
            TaggerParams::Crf(p) => p.label_dim(),
            TaggerParams::Ar(p) => p.label_dim(),
        }
    }

    pub fn obs_vocab_size(&self) -> usize {
        match self {
            TaggerParams::Iid(p) => p.obs_vocab_size(),
            TaggerParams::Crf(p) => p.obs_vocab_size(),
            TaggerParams::Ar(p) => p.obs_vocab_size(),
        }
    }

    /// Token-level distributions for one sequence.
    ///
    /// IID members use per-token softmax, CRF members forward-backward
    /// marginals, AR members teacher forcing (`ArMode::Gold`, gold labels
    /// required) or a free-running greedy pass (`ArMode::Decode`).
    pub fn marginals(
        &self,
        tokens: &[usize],
        gold: Option<&[usize]>,
        ar_mode: ArMode,
    ) -> Result<Vec<TokenDistribution>> {
        match self {
            TaggerParams::Iid(p) => Ok(iid_marginals_tokens(p, tokens)),
            TaggerParams::Crf(p) => {
                let seq = TokenSequence::new(tokens.to_vec(), vec![0; tokens.len()])?;
                Ok(crf_forward_backward(p, &seq).0)
            }
            TaggerParams::Ar(p) => match ar_mode {
                ArMode::Gold => {
                    let gold = gold.ok_or_else(|| {
                        Error::invalid("AR member in gold mode requires gold labels")
                    })?;
                    let seq = TokenSequence::new(tokens.to_vec(), gold.to_vec())?;
                    Ok(ar_teacher_forced(p, &seq))
                }
                ArMode::Decode => Ok(ar::ar_free_running(p, tokens)),
            },
        }
    }

    /// Per-token decode used for single-model predictions: IID argmax, CRF
    /// Viterbi, AR greedy.
    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        match self {
            TaggerParams::Iid(p) => Ok(iid_marginals_tokens(p, tokens)
                .iter()
                .map(|d| d.argmax())
                .collect()),
            TaggerParams::Crf(p) => {
                let seq = TokenSequence::new(tokens.to_vec(), vec![0; tokens.len()])?;
                Ok(crf_viterbi(p, &seq))
            }
            TaggerParams::Ar(p) => Ok(ar_greedy_decode(p, tokens)),
        }
    }
}
