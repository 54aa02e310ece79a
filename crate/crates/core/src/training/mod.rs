//! Full-batch gradient-descent training for all tagger types: NLL with
//! optional label smoothing, early stopping on a held-out split, and the
//! SGDR cyclic learning-rate schedule with snapshot collection.

mod objective;

pub(crate) use objective::{
    dataset_nll, scatter_logit_grad, token_nll_grad, BaselineObjective, Objective,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TokenDistribution};
use crate::ensembling::Ensemble;
use crate::error::{Error, Result};
use crate::taggers::{params_from_bytes, params_to_bytes, ModelType, TaggerParams};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Sgdr {
        eta_min: f64,
        eta_max: f64,
        /// Steps per cycle; a cycle spans `cycle_len + 1` epochs (step 0 at
        /// eta_max through step `cycle_len` at eta_min).
        cycle_len: usize,
        /// Cycle-length multiplier applied after each restart.
        t_mult: usize,
    },
}

/// Training configuration shared by baseline and student training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Label smoothing factor in [0, 1).
    pub label_smoothing: f64,
    /// Early stopping patience in epochs; `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub schedule: Schedule,
    /// SGD momentum; 0 disables the velocity buffer entirely.
    pub momentum: f64,
    /// Parameters initialize uniform in [-init_scale, init_scale]; 0 gives
    /// deterministic zero init.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 50,
            seed: 0,
            label_smoothing: 0.0,
            early_stop_patience: Some(5),
            schedule: Schedule::Constant,
            momentum: 0.0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must be in [0, 1)"));
        }
        if let Schedule::Sgdr {
            eta_min,
            eta_max,
            cycle_len,
            ..
        } = self.schedule
        {
            if eta_min > eta_max {
                return Err(Error::invalid("sgdr requires eta_min <= eta_max"));
            }
            if cycle_len < 1 {
                return Err(Error::invalid("sgdr cycle_len must be >= 1"));
            }
            if self.epochs < cycle_len + 1 {
                return Err(Error::invalid(
                    "sgdr needs epochs >= cycle_len + 1 to reach a cycle minimum",
                ));
            }
            if self.early_stop_patience.is_some() {
                return Err(Error::invalid(
                    "sgdr runs for its full epoch budget; disable early stopping",
                ));
            }
        }
        Ok(())
    }
}

/// Model checkpoint captured at an SGDR cycle minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Serialized tagger parameters (`CSP1` format).
    pub params: Vec<u8>,
    /// Global epoch index at which the snapshot was taken.
    pub step: usize,
    pub lr_at_save: f64,
}

/// One history row per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub held_nll: f64,
    pub lr: f64,
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: TaggerParams,
    pub history: Vec<EpochStats>,
    pub snapshots: Vec<Snapshot>,
}

/// Smoothed target distribution: probability `(1 - lambda) + lambda / V` at
/// the gold label and `lambda / V` elsewhere.
pub fn smoothed_target(gold: usize, v: usize, lambda: f64) -> TokenDistribution {
    let mut probs = vec![lambda / v as f64; v];
    probs[gold] += 1.0 - lambda;
    TokenDistribution::new(probs).expect("smoothed target normalizes")
}

/// Cosine learning rate within one SGDR cycle of length `cycle_len`.
pub fn sgdr_lr(step_in_cycle: usize, cycle_len: usize, eta_min: f64, eta_max: f64) -> f64 {
    let frac = step_in_cycle as f64 / cycle_len as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn init_params(
    model_type: ModelType,
    obs_vocab_size: usize,
    v: usize,
    seed: u64,
    scale: f64,
) -> TaggerParams {
    let mut params = TaggerParams::zeros(model_type, obs_vocab_size, v);
    if scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |xs: &mut [f64]| {
            for x in xs {
                *x = rng.random_range(-scale..scale);
            }
        };
        match &mut params {
            TaggerParams::Iid(p) => {
                fill(p.emission.data_mut());
                fill(&mut p.bias);
            }
            TaggerParams::Crf(p) => {
                fill(p.emission.data_mut());
                fill(&mut p.bias);
                fill(p.transitions.data_mut());
                fill(&mut p.start);
                fill(&mut p.stop);
            }
            TaggerParams::Ar(p) => {
                fill(p.emission.data_mut());
                fill(p.prev_label.data_mut());
                fill(&mut p.bias);
            }
        }
    }
    params
}

fn for_each_block(params: &mut TaggerParams, mut f: impl FnMut(&mut [f64])) {
    match params {
        TaggerParams::Iid(p) => {
            f(p.emission.data_mut());
            f(&mut p.bias);
        }
        TaggerParams::Crf(p) => {
            f(p.emission.data_mut());
            f(&mut p.bias);
            f(p.transitions.data_mut());
            f(&mut p.start);
            f(&mut p.stop);
        }
        TaggerParams::Ar(p) => {
            f(p.emission.data_mut());
            f(p.prev_label.data_mut());
            f(&mut p.bias);
        }
    }
}

fn zip_blocks(a: &mut TaggerParams, b: &mut TaggerParams, mut f: impl FnMut(&mut [f64], &mut [f64])) {
    match (a, b) {
        (TaggerParams::Iid(x), TaggerParams::Iid(y)) => {
            f(x.emission.data_mut(), y.emission.data_mut());
            f(&mut x.bias, &mut y.bias);
        }
        (TaggerParams::Crf(x), TaggerParams::Crf(y)) => {
            f(x.emission.data_mut(), y.emission.data_mut());
            f(&mut x.bias, &mut y.bias);
            f(x.transitions.data_mut(), y.transitions.data_mut());
            f(&mut x.start, &mut y.start);
            f(&mut x.stop, &mut y.stop);
        }
        (TaggerParams::Ar(x), TaggerParams::Ar(y)) => {
            f(x.emission.data_mut(), y.emission.data_mut());
            f(x.prev_label.data_mut(), y.prev_label.data_mut());
            f(&mut x.bias, &mut y.bias);
        }
        _ => unreachable!("mismatched parameter families"),
    }
}

/// Trains a tagger with the standard (optionally smoothed) NLL objective.
pub fn train(
    model_type: ModelType,
    data: &Dataset,
    held: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let objective = BaselineObjective {
        label_smoothing: cfg.label_smoothing,
    };
    train_with_objective(model_type, data, held, cfg, &objective)
}

/// Shared trainer: full-batch gradients, per-token normalized loss, optional
/// momentum, SGDR snapshots, early stopping on held NLL.
pub(crate) fn train_with_objective(
    model_type: ModelType,
    data: &Dataset,
    held: &Dataset,
    cfg: &TrainConfig,
    objective: &dyn Objective,
) -> Result<TrainResult> {
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if cfg.early_stop_patience.is_some() && held.sequences.is_empty() {
        return Err(Error::invalid("early stopping requires a non-empty held set"));
    }

    let v = data.vocab.size();
    let mut params = init_params(model_type, data.obs_vocab_size, v, cfg.seed, cfg.init_scale);
    let mut grad = TaggerParams::zeros(model_type, data.obs_vocab_size, v);
    let mut velocity = (cfg.momentum > 0.0)
        .then(|| TaggerParams::zeros(model_type, data.obs_vocab_size, v));

    let inv_tokens = 1.0 / data.total_tokens as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();

    let mut best: Option<(f64, TaggerParams)> = None;
    let mut stale_epochs = 0usize;

    // SGDR state.
    let (mut step_in_cycle, mut cycle_len) = (0usize, 0usize);
    if let Schedule::Sgdr { cycle_len: t0, .. } = cfg.schedule {
        cycle_len = t0;
    }

    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.lr,
            Schedule::Sgdr {
                eta_min, eta_max, ..
            } => sgdr_lr(step_in_cycle, cycle_len, eta_min, eta_max),
        };

        for_each_block(&mut grad, |xs| xs.iter_mut().for_each(|x| *x = 0.0));
        let mut total_loss = 0.0;
        for (seq_index, seq) in data.sequences.iter().enumerate() {
            let loss = objective.seq_loss_grad(&params, seq, seq_index, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { seq_index });
            }
            total_loss += loss;
        }
        let train_nll = total_loss * inv_tokens;

        for_each_block(&mut grad, |xs| xs.iter_mut().for_each(|x| *x *= inv_tokens));
        match &mut velocity {
            Some(vel) => {
                let momentum = cfg.momentum;
                zip_blocks(vel, &mut grad, |vs, gs| {
                    for (v, g) in vs.iter_mut().zip(gs.iter()) {
                        *v = momentum * *v + *g;
                    }
                });
                zip_blocks(&mut params, vel, |ps, vs| {
                    for (p, v) in ps.iter_mut().zip(vs.iter()) {
                        *p -= lr * *v;
                    }
                });
            }
            None => {
                zip_blocks(&mut params, &mut grad, |ps, gs| {
                    for (p, g) in ps.iter_mut().zip(gs.iter()) {
                        *p -= lr * *g;
                    }
                });
            }
        }

        let held_nll = if held.sequences.is_empty() {
            f64::NAN
        } else {
            dataset_nll(&params, held, objective)?
        };
        history.push(EpochStats {
            epoch,
            train_nll,
            held_nll,
            lr,
        });

        if let Schedule::Sgdr { t_mult, .. } = cfg.schedule {
            if step_in_cycle == cycle_len {
                snapshots.push(Snapshot {
                    params: params_to_bytes(&params),
                    step: epoch,
                    lr_at_save: lr,
                });
                step_in_cycle = 0;
                cycle_len = cycle_len.saturating_mul(t_mult.max(1));
            } else {
                step_in_cycle += 1;
            }
        }

        if let Some(patience) = cfg.early_stop_patience {
            let improved = best.as_ref().is_none_or(|(b, _)| held_nll < *b);
            if improved {
                best = Some((held_nll, params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs > patience {
                    break;
                }
            }
        }
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(TrainResult {
        params: final_params,
        history,
        snapshots,
    })
}

/// Wraps the last `k` snapshots of an SGDR run as ensemble members
/// (oldest of the k first).
pub fn sgdr_snapshots_to_ensemble(snapshots: &[Snapshot], k: usize) -> Result<Ensemble> {
    if k == 0 {
        return Err(Error::invalid("snapshot ensemble needs k >= 1"));
    }
    if k > snapshots.len() {
        return Err(Error::invalid(format!(
            "requested {k} snapshots, only {} available",
            snapshots.len()
        )));
    }
    let members = snapshots[snapshots.len() - k..]
        .iter()
        .map(|s| params_from_bytes(&s.params))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

/// Writes history rows as `epoch,train_nll,held_nll,lr` CSV.
pub fn write_history_csv(history: &[EpochStats], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,train_nll,held_nll,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_nll, row.held_nll, row.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &std::path::Path) -> Result<Vec<EpochStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad float `{s}`"),
            })
        };
        rows.push(EpochStats {
            epoch: cols[0].parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad epoch `{}`", cols[0]),
            })?,
            train_nll: parse(cols[1])?,
            held_nll: parse(cols[2])?,
            lr: parse(cols[3])?,
        });
    }
    Ok(rows)
}
