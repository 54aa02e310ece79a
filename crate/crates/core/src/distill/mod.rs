//! Teacher memoization with top-V' truncation, the token-level distillation
//! loss, and student training.

mod store;

pub use store::{TeacherStore, TeacherStoreHeader, TeacherStoreIter, TeacherStoreWriter};
pub use store::{HEADER_LEN, STORE_MAGIC, STORE_VERSION};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TokenDistribution, TokenSequence};
use crate::ensembling::Ensemble;
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::taggers::{ArMode, ModelType, TaggerParams};
use crate::training::{
    dataset_nll, train_with_objective, Objective, TrainConfig, TrainResult,
};

/// Top-V' slice of a teacher distribution for one token: label indices with
/// their probabilities, probability-descending, not renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedDistribution {
    indices: Vec<u32>,
    probs: Vec<f32>,
}

impl TruncatedDistribution {
    /// Validates distinctness, descending order, and the mass bound.
    pub fn from_parts(indices: Vec<u32>, probs: Vec<f32>) -> Result<Self> {
        if indices.is_empty() || indices.len() != probs.len() {
            return Err(Error::invalid("truncated distribution shape mismatch"));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &indices {
            if !seen.insert(i) {
                return Err(Error::invalid(format!("duplicate index {i}")));
            }
        }
        if probs.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("probabilities not sorted descending"));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if !(0.0..=1.0 + 1e-6).contains(&sum) {
            return Err(Error::invalid(format!("truncated mass {sum} out of range")));
        }
        Ok(TruncatedDistribution { indices, probs })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().map(|&p| p as f64).sum()
    }

    /// Kept entries rescaled to sum to 1 (ablation path; storage never
    /// renormalizes).
    pub fn renormalized(&self) -> TruncatedDistribution {
        let z = self.mass();
        TruncatedDistribution {
            indices: self.indices.clone(),
            probs: self.probs.iter().map(|&p| (p as f64 / z) as f32).collect(),
        }
    }
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Interpolation weight on the distillation term, in [0, 1].
    pub beta: f64,
    /// Student-side softmax temperature (teacher probs are fixed on disk).
    pub temperature: f64,
    /// Truncation level used at memoization time.
    pub v_prime: usize,
    /// Label smoothing of the student's NLL term.
    pub lambda: f64,
    /// Renormalize truncated teacher mass inside the KD loss (ablation only).
    pub renormalize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.5,
            temperature: 1.0,
            v_prime: 64,
            lambda: 0.1,
            renormalize: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must be in [0, 1]"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.v_prime == 0 {
            return Err(Error::invalid("V' must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Keeps the V' highest-probability (index, probability) pairs, probability
/// descending, ties toward the lower index. Probabilities are not
/// renormalized.
pub fn truncate_topk(dist: &TokenDistribution, v_prime: usize) -> Result<TruncatedDistribution> {
    let v = dist.dim();
    if v_prime == 0 || v_prime > v {
        return Err(Error::invalid(format!("V' = {v_prime} out of range 1..={v}")));
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        dist.prob(b)
            .partial_cmp(&dist.prob(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(v_prime);
    let indices: Vec<u32> = order.iter().map(|&i| i as u32).collect();
    let probs: Vec<f32> = order.iter().map(|&i| dist.prob(i) as f32).collect();
    TruncatedDistribution::from_parts(indices, probs)
}

/// Memoizes the ensemble mixture for every token of `data`, in dataset
/// iteration order, truncated to V' entries per token. AR members contribute
/// teacher-forced distributions.
pub fn memoize_teacher(
    ens: &Ensemble,
    data: &Dataset,
    v_prime: usize,
    out: &Path,
) -> Result<TeacherStoreHeader> {
    let v = ens.label_dim();
    if v != data.vocab.size() {
        return Err(Error::invalid(format!(
            "ensemble label dim {v} does not match dataset V {}",
            data.vocab.size()
        )));
    }
    if data.sequences.is_empty() {
        return Err(Error::invalid("cannot memoize an empty dataset"));
    }
    let mut writer = TeacherStoreWriter::create(out, v_prime, v)?;
    for seq in &data.sequences {
        let mixture = ens.marginals(&seq.tokens, Some(&seq.gold), ArMode::Gold)?;
        for dist in &mixture {
            writer.append(&truncate_topk(dist, v_prime)?)?;
        }
    }
    writer.finish()
}

/// Opens a store and streams its records in write order.
pub fn stream_teacher(path: &Path) -> Result<TeacherStoreIter> {
    TeacherStore::open(path)?.iter()
}

/// Cross-entropy restricted to the teacher's stored support:
/// `-sum_j p_teacher(j) * log p_student_tau(j)`, with the temperature applied
/// to the student side only and teacher probabilities used as stored.
pub fn kd_loss(
    student: &TokenDistribution,
    teacher: &TruncatedDistribution,
    temperature: f64,
) -> f64 {
    let student_tau: Vec<f64> = if temperature == 1.0 {
        student.probs().to_vec()
    } else {
        let log_p: Vec<f64> = student
            .probs()
            .iter()
            .map(|&p| crate::math::ln_clamped(p, 1e-300) / temperature)
            .collect();
        softmax(&log_p)
    };
    teacher
        .indices()
        .iter()
        .zip(teacher.probs())
        .map(|(&j, &q)| -(q as f64) * crate::math::ln_clamped(student_tau[j as usize], 1e-12))
        .sum()
}

/// Per-token average of `(1 - beta) * NLL(lambda) + beta * kd_loss` over one
/// sequence, given the student's distributions and aligned teacher records.
pub fn student_loss(
    seq: &TokenSequence,
    student_dists: &[TokenDistribution],
    teacher_records: &[TruncatedDistribution],
    cfg: &DistillConfig,
) -> Result<f64> {
    cfg.validate()?;
    if student_dists.len() != seq.len() || teacher_records.len() != seq.len() {
        return Err(Error::invalid(format!(
            "alignment mismatch: {} tokens, {} student dists, {} teacher records",
            seq.len(),
            student_dists.len(),
            teacher_records.len()
        )));
    }
    let mut total = 0.0;
    for (t, dist) in student_dists.iter().enumerate() {
        let mut nll = 0.0;
        let target = crate::training::smoothed_target(seq.gold[t], dist.dim(), cfg.lambda);
        for y in 0..dist.dim() {
            let w = target.prob(y);
            if w > 0.0 {
                nll -= w * crate::math::ln_clamped(dist.prob(y), 1e-300);
            }
        }
        let kd = if cfg.beta > 0.0 {
            let record;
            let teacher = if cfg.renormalize {
                record = teacher_records[t].renormalized();
                &record
            } else {
                &teacher_records[t]
            };
            kd_loss(dist, teacher, cfg.temperature)
        } else {
            0.0
        };
        total += (1.0 - cfg.beta) * nll + cfg.beta * kd;
    }
    Ok(total / seq.len() as f64)
}

/// Objective combining the smoothed NLL with the memoized-teacher KD term.
/// Held-set evaluation falls back to the plain smoothed NLL (teacher records
/// exist for training tokens only).
struct DistillObjective {
    records: Vec<TruncatedDistribution>,
    seq_offsets: Vec<usize>,
    beta: f64,
    temperature: f64,
    lambda: f64,
    renormalize: bool,
}

impl DistillObjective {
    fn token_loss_grad(&self, logits: &[f64], gold: usize, record: &TruncatedDistribution, g: &mut [f64]) -> f64 {
        use crate::training::token_nll_grad;
        let nll = token_nll_grad(logits, gold, self.lambda, g);
        if self.beta == 0.0 {
            return nll;
        }
        let renorm_record;
        let teacher = if self.renormalize {
            renorm_record = record.renormalized();
            &renorm_record
        } else {
            record
        };
        let tau = self.temperature;
        let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
        let q_tau = softmax(&scaled);
        let teacher_mass = teacher.mass();
        let mut kd = 0.0;
        let mut g_kd: Vec<f64> = q_tau.iter().map(|&q| teacher_mass * q / tau).collect();
        for (&j, &p) in teacher.indices().iter().zip(teacher.probs()) {
            let j = j as usize;
            kd -= p as f64 * crate::math::ln_clamped(q_tau[j], 1e-12);
            g_kd[j] -= p as f64 / tau;
        }
        for (gy, gk) in g.iter_mut().zip(&g_kd) {
            *gy = (1.0 - self.beta) * *gy + self.beta * gk;
        }
        (1.0 - self.beta) * nll + self.beta * kd
    }
}

impl Objective for DistillObjective {
    fn seq_loss_grad(
        &self,
        params: &TaggerParams,
        seq: &TokenSequence,
        seq_index: usize,
        grad: &mut TaggerParams,
    ) -> Result<f64> {
        use crate::training::scatter_logit_grad;
        let offset = self.seq_offsets[seq_index];
        let mut loss = 0.0;
        match params {
            TaggerParams::Iid(p) => {
                let mut g = vec![0.0; p.label_dim()];
                for (t, &tok) in seq.tokens.iter().enumerate() {
                    let logits = p.logits(tok);
                    loss += self.token_loss_grad(
                        &logits,
                        seq.gold[t],
                        &self.records[offset + t],
                        &mut g,
                    );
                    scatter_logit_grad(grad, tok, None, &g);
                }
            }
            TaggerParams::Ar(p) => {
                let mut g = vec![0.0; p.label_dim()];
                let bos = p.bos_row();
                for (t, &tok) in seq.tokens.iter().enumerate() {
                    let prev = if t == 0 { bos } else { seq.gold[t - 1] };
                    let logits = p.logits(tok, prev);
                    loss += self.token_loss_grad(
                        &logits,
                        seq.gold[t],
                        &self.records[offset + t],
                        &mut g,
                    );
                    scatter_logit_grad(grad, tok, Some(prev), &g);
                }
            }
            TaggerParams::Crf(_) => {
                return Err(Error::invalid("distillation into CRF students is unsupported"));
            }
        }
        Ok(loss)
    }

    fn seq_loss(
        &self,
        params: &TaggerParams,
        seq: &TokenSequence,
        seq_index: usize,
    ) -> Result<f64> {
        let baseline = crate::training::BaselineObjective {
            label_smoothing: self.lambda,
        };
        baseline.seq_loss(params, seq, seq_index)
    }
}

/// Trains a student from scratch against a memoized teacher store whose token
/// order matches `data`. The student's NLL term uses `dcfg.lambda` smoothing;
/// `tcfg.label_smoothing` is ignored here.
pub fn train_student(
    data: &Dataset,
    held: &Dataset,
    store_path: &Path,
    model_type: ModelType,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<TrainResult> {
    dcfg.validate()?;
    if model_type == ModelType::Crf {
        return Err(Error::invalid("distillation into CRF students is unsupported"));
    }
    let store = TeacherStore::open(store_path)?;
    let header = *store.header();
    if header.token_count != data.total_tokens as u64 {
        return Err(Error::invalid(format!(
            "store holds {} records, dataset has {} tokens",
            header.token_count, data.total_tokens
        )));
    }
    if header.vocab_size != data.vocab.size() {
        return Err(Error::invalid(format!(
            "store vocab {} does not match dataset V {}",
            header.vocab_size,
            data.vocab.size()
        )));
    }
    let records = store.read_all()?;
    let mut seq_offsets = Vec::with_capacity(data.sequences.len());
    let mut off = 0;
    for seq in &data.sequences {
        seq_offsets.push(off);
        off += seq.len();
    }
    let objective = DistillObjective {
        records,
        seq_offsets,
        beta: dcfg.beta,
        temperature: dcfg.temperature,
        lambda: dcfg.lambda,
        renormalize: dcfg.renormalize,
    };
    train_with_objective(model_type, data, held, tcfg, &objective)
}

/// Baseline-held NLL helper shared by reports (mean per-token, smoothed).
pub fn held_nll(params: &TaggerParams, data: &Dataset, lambda: f64) -> Result<f64> {
    let obj = crate::training::BaselineObjective {
        label_smoothing: lambda,
    };
    dataset_nll(params, data, &obj)
}
