//! End-to-end experiment pipeline: train members, ensemble, memoize, distill,
//! evaluate, and write reports. Fully reproducible from (config, seeds).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{calibration_report, per_class_records, CalibrationReport, TypeMap};
use crate::data::{generate_hmm, read_dataset_jsonl, split_dataset, Dataset, TokenDistribution};
use crate::distill::{memoize_teacher, train_student, DistillConfig};
use crate::ensembling::{Ensemble, EnsembleManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::eval::{pr_curve, span_f1, write_pr_csv, ThresholdSweep};
use crate::taggers::{save_params, ArMode, ModelType, TaggerParams};
use crate::training::{train, TrainConfig};

/// Data source for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    /// Synthetic HMM task; train and test are sampled from one model drawn
    /// per replicate.
    Hmm {
        states: usize,
        obs_symbols: usize,
        train_seqs: usize,
        test_seqs: usize,
        len_range: (usize, usize),
    },
    /// Pre-generated JSONL datasets shared by every replicate.
    Files { train: PathBuf, test: PathBuf },
}

/// How ensemble members are diversified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DiversityRecipe {
    /// Each member holds out a different fold for early stopping and trains
    /// on the remainder.
    Folds { n_folds: usize },
    /// Members share one train/held split; only the seed varies.
    Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model_type: ModelType,
    pub student_type: ModelType,
    /// Ensemble sizes to evaluate; the largest is the member count K.
    pub ensemble_sizes: Vec<usize>,
    /// Truncation level for memoization; `None` keeps the full vocabulary.
    pub v_prime: Option<usize>,
    pub beta: f64,
    pub student_lambda: f64,
    /// Outer replicate seeds; each replicate draws its own data and members.
    pub replicates: Vec<u64>,
    pub diversity: DiversityRecipe,
    pub train: TrainConfig,
    /// Epoch budget for the student (early stopping disabled; the teacher is
    /// a fixed target).
    pub student_epochs: usize,
    /// Distillation learning rate; `None` reuses the member rate.
    pub student_lr: Option<f64>,
    /// Student init scale; `None` reuses the member scale. Students fit a
    /// fixed soft teacher, which favors starting near uniform.
    pub student_init_scale: Option<f64>,
    pub n_bins: usize,
    pub output_dir: PathBuf,
}

/// Metric bundle for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub accuracy: f64,
    pub ece: f64,
    pub ece_1: f64,
    pub ece_5: f64,
    pub brier: f64,
    pub bs_plus: f64,
    pub bs_minus: f64,
    pub balanced_ece: f64,
    pub balanced_brier: f64,
    pub auc: f64,
    /// Exact-span F1; present only for IOB2-style vocabularies.
    pub span_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub seed: u64,
    pub members: Vec<ModelMetrics>,
    pub mean_member: ModelMetrics,
    /// One entry per requested ensemble size, in `ensemble_sizes` order.
    pub ensembles: Vec<ModelMetrics>,
    pub student: ModelMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateSummary>,
}

fn flat_marginals(
    params: &TaggerParams,
    data: &Dataset,
) -> Result<(Vec<TokenDistribution>, Vec<usize>)> {
    let mut dists = Vec::with_capacity(data.total_tokens);
    let mut gold = Vec::with_capacity(data.total_tokens);
    for seq in &data.sequences {
        dists.extend(params.marginals(&seq.tokens, None, ArMode::Decode)?);
        gold.extend_from_slice(&seq.gold);
    }
    Ok((dists, gold))
}

fn flat_ensemble_marginals(
    ens: &Ensemble,
    data: &Dataset,
) -> Result<(Vec<TokenDistribution>, Vec<usize>)> {
    let mut dists = Vec::with_capacity(data.total_tokens);
    let mut gold = Vec::with_capacity(data.total_tokens);
    for seq in &data.sequences {
        dists.extend(ens.marginals(&seq.tokens, None, ArMode::Decode)?);
        gold.extend_from_slice(&seq.gold);
    }
    Ok((dists, gold))
}

fn vocab_is_iob2(vocab: &crate::data::LabelVocab) -> bool {
    vocab.labels().iter().any(|l| l.starts_with("B-"))
}

/// Evaluates a model's flattened test marginals into a metric bundle and
/// optionally writes its report, reliability, and PR files.
#[allow(clippy::too_many_arguments)]
fn evaluate_model(
    name: &str,
    dists: &[TokenDistribution],
    gold: &[usize],
    data: &Dataset,
    decode: Option<&[Vec<usize>]>,
    n_bins: usize,
    out_dir: Option<&Path>,
) -> Result<ModelMetrics> {
    let report: CalibrationReport = calibration_report(dists, gold, &data.vocab, n_bins)?;
    let types = TypeMap::from_vocab(&data.vocab);
    let class_events: Vec<_> = per_class_records(dists, gold, &types)
        .into_iter()
        .flat_map(|c| c.records)
        .collect();
    let curve = pr_curve(&class_events, ThresholdSweep::Exact)?;

    let f1 = if vocab_is_iob2(&data.vocab) {
        let gold_seqs: Vec<Vec<usize>> =
            data.sequences.iter().map(|s| s.gold.clone()).collect();
        let pred_seqs: Vec<Vec<usize>> = match decode {
            Some(d) => d.to_vec(),
            None => {
                // Marginal argmax per position, re-chunked by sequence.
                let mut out = Vec::with_capacity(data.sequences.len());
                let mut offset = 0;
                for seq in &data.sequences {
                    out.push(
                        dists[offset..offset + seq.len()]
                            .iter()
                            .map(|d| d.argmax())
                            .collect(),
                    );
                    offset += seq.len();
                }
                out
            }
        };
        Some(span_f1(&pred_seqs, &gold_seqs, &data.vocab)?.f1)
    } else {
        None
    };

    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report)?;
        let report_path = dir.join(format!("report_{name}.json"));
        std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
        crate::calibration::write_reliability_csv(
            &report.reliability,
            &dir.join(format!("reliability_{name}.csv")),
        )?;
        write_pr_csv(&curve, &dir.join(format!("pr_{name}.csv")))?;
    }

    Ok(ModelMetrics {
        name: name.to_string(),
        accuracy: report.token_accuracy,
        ece: report.ece,
        ece_1: report.ece_1,
        ece_5: report.ece_5,
        brier: report.brier,
        bs_plus: report.bs_plus,
        bs_minus: report.bs_minus,
        balanced_ece: report.balanced_ece,
        balanced_brier: report.balanced_brier,
        auc: curve.auc,
        span_f1: f1,
    })
}

fn mean_member_metrics(members: &[ModelMetrics]) -> ModelMetrics {
    let n = members.len() as f64;
    let mean = |f: fn(&ModelMetrics) -> f64| members.iter().map(f).sum::<f64>() / n;
    ModelMetrics {
        name: "mean_member".to_string(),
        accuracy: mean(|m| m.accuracy),
        ece: mean(|m| m.ece),
        ece_1: mean(|m| m.ece_1),
        ece_5: mean(|m| m.ece_5),
        brier: mean(|m| m.brier),
        bs_plus: mean(|m| m.bs_plus),
        bs_minus: mean(|m| m.bs_minus),
        balanced_ece: mean(|m| m.balanced_ece),
        balanced_brier: mean(|m| m.balanced_brier),
        auc: mean(|m| m.auc),
        span_f1: members[0]
            .span_f1
            .map(|_| members.iter().filter_map(|m| m.span_f1).sum::<f64>() / n),
    }
}

fn member_seed(replicate_seed: u64, member: usize) -> u64 {
    replicate_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(member as u64 + 1)
}

/// Worker-thread cap for member training, from `CSP_THREADS` (default 1).
fn worker_threads() -> usize {
    std::env::var("CSP_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Trains all members of one replicate; results are returned in member order
/// regardless of worker scheduling (each member run is deterministic).
fn train_members(
    cfg: &ExperimentConfig,
    train_data: &Dataset,
    replicate_seed: u64,
    k: usize,
) -> Result<Vec<TaggerParams>> {
    let jobs: Vec<(usize, Dataset, Dataset, TrainConfig)> = (0..k)
        .map(|m| {
            let (member_train, member_held) = match cfg.diversity {
                DiversityRecipe::Folds { n_folds } => {
                    split_dataset(train_data, n_folds, m % n_folds, replicate_seed)?
                }
                DiversityRecipe::Seeds => split_dataset(train_data, 10, 0, replicate_seed)?,
            };
            let tcfg = TrainConfig {
                seed: member_seed(replicate_seed, m),
                ..cfg.train.clone()
            };
            Ok((m, member_train, member_held, tcfg))
        })
        .collect::<Result<_>>()?;

    let threads = worker_threads().min(jobs.len().max(1));
    if threads <= 1 {
        return jobs
            .into_iter()
            .map(|(_, tr, held, tcfg)| Ok(train(cfg.model_type, &tr, &held, &tcfg)?.params))
            .collect();
    }

    let mut results: Vec<Option<Result<TaggerParams>>> = (0..jobs.len()).map(|_| None).collect();
    let model_type = cfg.model_type;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(jobs.len().div_ceil(threads)) {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|(m, tr, held, tcfg)| {
                        (*m, train(model_type, tr, held, tcfg).map(|r| r.params))
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (m, result) in handle.join().expect("member training thread panicked") {
                results[m] = Some(result);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every member trained"))
        .collect()
}

fn load_task(task: &TaskSpec, replicate_seed: u64) -> Result<(Dataset, Dataset)> {
    match task {
        TaskSpec::Hmm {
            states,
            obs_symbols,
            train_seqs,
            test_seqs,
            len_range,
        } => {
            let (all, _) = generate_hmm(
                *states,
                *obs_symbols,
                train_seqs + test_seqs,
                *len_range,
                replicate_seed,
            )?;
            let train_part = Dataset::new(
                all.sequences[..*train_seqs].to_vec(),
                all.vocab.clone(),
                all.obs_vocab_size,
            )?;
            let test_part = Dataset::new(
                all.sequences[*train_seqs..].to_vec(),
                all.vocab.clone(),
                all.obs_vocab_size,
            )?;
            Ok((train_part, test_part))
        }
        TaskSpec::Files { train, test } => {
            Ok((read_dataset_jsonl(train)?, read_dataset_jsonl(test)?))
        }
    }
}

fn run_replicate(
    cfg: &ExperimentConfig,
    replicate_seed: u64,
    out_dir: &Path,
) -> Result<ReplicateSummary> {
    let (train_data, test_data) =
        load_task(&cfg.task, replicate_seed).map_err(|e| e.in_stage("gen-data"))?;
    let k = cfg.ensemble_sizes.iter().copied().max().unwrap_or(1);

    let member_params = train_members(cfg, &train_data, replicate_seed, k)
        .map_err(|e| e.in_stage("train-members"))?;

    // Persist members plus the seed-ordered manifest.
    let mut entries = Vec::with_capacity(k);
    for (m, params) in member_params.iter().enumerate() {
        let file = format!("member_{:02}.bin", m + 1);
        save_params(params, &out_dir.join(&file)).map_err(|e| e.in_stage("train-members"))?;
        entries.push(ManifestEntry {
            model_type: cfg.model_type,
            path: file,
        });
    }
    EnsembleManifest { members: entries }
        .write(&out_dir.join("ensemble.json"))
        .map_err(|e| e.in_stage("train-members"))?;

    let mut members = Vec::with_capacity(k);
    for (m, params) in member_params.iter().enumerate() {
        let (dists, gold) =
            flat_marginals(params, &test_data).map_err(|e| e.in_stage("evaluate"))?;
        members.push(
            evaluate_model(
                &format!("member_{:02}", m + 1),
                &dists,
                &gold,
                &test_data,
                None,
                cfg.n_bins,
                Some(out_dir),
            )
            .map_err(|e| e.in_stage("evaluate"))?,
        );
    }
    let mean_member = mean_member_metrics(&members);

    let mut ensembles = Vec::with_capacity(cfg.ensemble_sizes.len());
    for &size in &cfg.ensemble_sizes {
        let ens = Ensemble::new(member_params[..size].to_vec())
            .map_err(|e| e.in_stage("ensemble"))?;
        let (dists, gold) =
            flat_ensemble_marginals(&ens, &test_data).map_err(|e| e.in_stage("ensemble"))?;
        ensembles.push(
            evaluate_model(
                &format!("ensemble_{size}"),
                &dists,
                &gold,
                &test_data,
                None,
                cfg.n_bins,
                Some(out_dir),
            )
            .map_err(|e| e.in_stage("evaluate"))?,
        );
    }

    let teacher = Ensemble::new(member_params.clone()).map_err(|e| e.in_stage("memoize"))?;
    let v_prime = cfg.v_prime.unwrap_or(train_data.vocab.size());
    let store_path = out_dir.join("teacher.tstr");
    memoize_teacher(&teacher, &train_data, v_prime, &store_path)
        .map_err(|e| e.in_stage("memoize"))?;

    let dcfg = DistillConfig {
        beta: cfg.beta,
        temperature: 1.0,
        v_prime,
        lambda: cfg.student_lambda,
        renormalize: false,
    };
    let (_, student_held) = match cfg.diversity {
        DiversityRecipe::Folds { n_folds } => {
            split_dataset(&train_data, n_folds, n_folds - 1, replicate_seed)
                .map_err(|e| e.in_stage("distill"))?
        }
        DiversityRecipe::Seeds => split_dataset(&train_data, 10, 9, replicate_seed)
            .map_err(|e| e.in_stage("distill"))?,
    };
    let student_cfg = TrainConfig {
        seed: member_seed(replicate_seed, k + 1),
        epochs: cfg.student_epochs,
        early_stop_patience: None,
        lr: cfg.student_lr.unwrap_or(cfg.train.lr),
        init_scale: cfg.student_init_scale.unwrap_or(cfg.train.init_scale),
        ..cfg.train.clone()
    };
    let student = train_student(
        &train_data,
        &student_held,
        &store_path,
        cfg.student_type,
        &dcfg,
        &student_cfg,
    )
    .map_err(|e| e.in_stage("distill"))?;
    save_params(&student.params, &out_dir.join("student.bin"))
        .map_err(|e| e.in_stage("distill"))?;

    let (dists, gold) =
        flat_marginals(&student.params, &test_data).map_err(|e| e.in_stage("evaluate"))?;
    let student_metrics = evaluate_model(
        "student",
        &dists,
        &gold,
        &test_data,
        None,
        cfg.n_bins,
        Some(out_dir),
    )
    .map_err(|e| e.in_stage("evaluate"))?;

    Ok(ReplicateSummary {
        seed: replicate_seed,
        members,
        mean_member,
        ensembles,
        student: student_metrics,
    })
}

/// Per-replicate outcome of the single-run (SGDR snapshot) versus
/// independent-seed ensemble comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdrReplicate {
    pub seed: u64,
    pub mean_individual_ece: f64,
    pub snapshot_ensemble_ece: f64,
    pub seed_ensemble_ece: f64,
}

/// Trains `k` independent-seed models plus one SGDR run per replicate and
/// compares individual, snapshot-ensemble, and seed-ensemble calibration on
/// held-out data.
#[allow(clippy::too_many_arguments)]
pub fn run_sgdr_comparison(
    task: &TaskSpec,
    replicates: &[u64],
    k: usize,
    base: &TrainConfig,
    sgdr_epochs: usize,
    cycle_len: usize,
    eta_min: f64,
    n_bins: usize,
) -> Result<Vec<SgdrReplicate>> {
    use crate::training::{sgdr_snapshots_to_ensemble, Schedule};

    let mut out = Vec::with_capacity(replicates.len());
    for &seed in replicates {
        let (train_data, test_data) = load_task(task, seed)?;
        let empty_held = Dataset::new(Vec::new(), train_data.vocab.clone(), train_data.obs_vocab_size)?;

        let mut members = Vec::with_capacity(k);
        let mut member_ece = Vec::with_capacity(k);
        for m in 0..k {
            let tcfg = TrainConfig {
                seed: member_seed(seed, m),
                early_stop_patience: None,
                ..base.clone()
            };
            let params = train(ModelType::Iid, &train_data, &empty_held, &tcfg)?.params;
            let (dists, gold) = flat_marginals(&params, &test_data)?;
            member_ece.push(crate::calibration::ece(
                &crate::calibration::top1_records(&dists, &gold),
                n_bins,
            )?);
            members.push(params);
        }

        let sgdr_cfg = TrainConfig {
            seed: member_seed(seed, 0),
            epochs: sgdr_epochs,
            early_stop_patience: None,
            schedule: Schedule::Sgdr {
                eta_min,
                eta_max: base.lr,
                cycle_len,
                t_mult: 1,
            },
            ..base.clone()
        };
        let sgdr_run = train(ModelType::Iid, &train_data, &empty_held, &sgdr_cfg)?;
        let snapshot_ens = sgdr_snapshots_to_ensemble(&sgdr_run.snapshots, k)?;
        let seed_ens = Ensemble::new(members)?;

        let ece_of = |ens: &Ensemble| -> Result<f64> {
            let (dists, gold) = flat_ensemble_marginals(ens, &test_data)?;
            crate::calibration::ece(&crate::calibration::top1_records(&dists, &gold), n_bins)
        };
        out.push(SgdrReplicate {
            seed,
            mean_individual_ece: member_ece.iter().sum::<f64>() / k as f64,
            snapshot_ensemble_ece: ece_of(&snapshot_ens)?,
            seed_ensemble_ece: ece_of(&seed_ens)?,
        });
    }
    Ok(out)
}

fn summary_csv(summary: &ExperimentSummary) -> String {
    let mut out = String::from(
        "replicate,model,accuracy,ece,ece_1,ece_5,brier,bs_plus,bs_minus,balanced_ece,balanced_brier,auc,span_f1\n",
    );
    let mut push = |seed: u64, m: &ModelMetrics| {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            seed,
            m.name,
            m.accuracy,
            m.ece,
            m.ece_1,
            m.ece_5,
            m.brier,
            m.bs_plus,
            m.bs_minus,
            m.balanced_ece,
            m.balanced_brier,
            m.auc,
            m.span_f1.map(|v| v.to_string()).unwrap_or_default(),
        ));
    };
    for rep in &summary.replicates {
        for m in &rep.members {
            push(rep.seed, m);
        }
        push(rep.seed, &rep.mean_member);
        for e in &rep.ensembles {
            push(rep.seed, e);
        }
        push(rep.seed, &rep.student);
    }
    out
}

/// Runs the full pipeline (train -> ensemble -> memoize -> distill ->
/// evaluate) for every replicate seed and writes reports under
/// `cfg.output_dir`. A `status.json` marker flags partial outputs as stale
/// until the run completes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    if cfg.ensemble_sizes.is_empty() {
        return Err(Error::invalid("ensemble_sizes must be non-empty"));
    }
    if cfg.replicates.is_empty() {
        return Err(Error::invalid("need at least one replicate seed"));
    }
    if let DiversityRecipe::Folds { n_folds } = cfg.diversity {
        let k = cfg.ensemble_sizes.iter().copied().max().unwrap();
        if k > n_folds {
            return Err(Error::invalid(format!(
                "{k} members cannot hold out distinct folds among {n_folds}"
            )));
        }
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let status_path = cfg.output_dir.join("status.json");
    std::fs::write(&status_path, "{\"status\":\"running\"}\n")
        .map_err(|e| Error::io(&status_path, e))?;

    let mut replicates = Vec::with_capacity(cfg.replicates.len());
    for &seed in &cfg.replicates {
        let rep_dir = cfg.output_dir.join(format!("replicate_{seed}"));
        std::fs::create_dir_all(&rep_dir).map_err(|e| Error::io(&rep_dir, e))?;
        replicates.push(run_replicate(cfg, seed, &rep_dir)?);
    }

    let summary = ExperimentSummary {
        config: cfg.clone(),
        replicates,
    };
    let summary_path = cfg.output_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    let csv_path = cfg.output_dir.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(&summary)).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&status_path, "{\"status\":\"complete\"}\n")
        .map_err(|e| Error::io(&status_path, e))?;
    Ok(summary)
}
