//! `csp`: train, ensemble, memoize, distill, calibrate, and report on
//! desk-scale sequence taggers.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csp_core::calibration::{
    calibration_report, fit_temperature, per_class_records, scaled_nll, write_reliability_csv,
    TypeMap,
};
use csp_core::data::{
    generate_hmm, read_dataset_jsonl, write_dataset_jsonl, Dataset, TokenDistribution,
};
use csp_core::distill::{memoize_teacher, train_student, DistillConfig};
use csp_core::ensembling::{build_ensemble, Ensemble};
use csp_core::eval::{pr_curve, run_experiment, write_pr_csv, ExperimentConfig, ThresholdSweep};
use csp_core::taggers::{load_params, save_params, ArMode, ModelType, TaggerParams};
use csp_core::training::{train, write_history_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "csp", version, about = "Ensemble distillation for sequence taggers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic HMM dataset (and optional test split) to JSONL.
    GenData(GenDataArgs),
    /// Train a single tagger.
    Train(TrainArgs),
    /// Evaluate an ensemble manifest on a dataset.
    EnsembleEval(EnsembleEvalArgs),
    /// Memoize truncated ensemble distributions for every training token.
    Memoize(MemoizeArgs),
    /// Train a student against a memoized teacher store.
    Distill(DistillArgs),
    /// Fit or apply post-hoc temperature scaling.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Evaluate a single model and write its calibration report.
    Report(ReportArgs),
    /// Emit a precision-recall curve from thresholded token probabilities.
    PrCurve(PrCurveArgs),
    /// Run a full train/ensemble/memoize/distill/evaluate experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    states: usize,
    #[arg(long)]
    obs: usize,
    #[arg(long)]
    seqs: usize,
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also sample this many test sequences from the same HMM.
    #[arg(long)]
    test_seqs: Option<usize>,
    #[arg(long, requires = "test_seqs")]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelTypeArg,
    #[arg(long)]
    data: PathBuf,
    /// Held-out split for early stopping and history.
    #[arg(long)]
    held: Option<PathBuf>,
    /// Training config JSON (TrainConfig fields); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Early-stopping patience; negative disables.
    #[arg(long)]
    patience: Option<i64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleEvalArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 1-based member ids; defaults to every manifest member.
    #[arg(long, value_delimiter = ',')]
    subset: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    n_bins: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    reliability: Option<PathBuf>,
}

#[derive(Args)]
struct MemoizeArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vprime: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    held: Option<PathBuf>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    model: ModelTypeArg,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Label smoothing of the student NLL term.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Renormalize truncated teacher mass in the KD loss (ablation).
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Fit a temperature on held-out data and print before/after NLL.
    Fit(CalibrateFitArgs),
    /// Evaluate a model with a fixed temperature applied.
    Apply(CalibrateApplyArgs),
}

#[derive(Args)]
struct CalibrateFitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    held: PathBuf,
    /// Write the fitted temperature as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    temperature: f64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_bins: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    reliability: Option<PathBuf>,
}

#[derive(Args)]
struct PrCurveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict events to one entity type; default pools all types.
    #[arg(long = "type")]
    ty: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// ExperimentConfig JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy)]
struct ModelTypeArg(ModelType);

impl std::str::FromStr for ModelTypeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.parse::<ModelType>()
            .map(ModelTypeArg)
            .map_err(|e| e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => do_train(args),
        Command::EnsembleEval(args) => ensemble_eval(args),
        Command::Memoize(args) => memoize(args),
        Command::Distill(args) => distill(args),
        Command::Calibrate(CalibrateCommand::Fit(args)) => calibrate_fit(args),
        Command::Calibrate(CalibrateCommand::Apply(args)) => calibrate_apply(args),
        Command::Report(args) => report(args),
        Command::PrCurve(args) => pr_curve_cmd(args),
        Command::Experiment(args) => experiment(args),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let total = args.seqs + args.test_seqs.unwrap_or(0);
    let (all, _) = generate_hmm(
        args.states,
        args.obs,
        total,
        (args.len_min, args.len_max),
        args.seed,
    )?;
    let train_part = Dataset::new(
        all.sequences[..args.seqs].to_vec(),
        all.vocab.clone(),
        all.obs_vocab_size,
    )?;
    write_dataset_jsonl(&train_part, &args.out)?;
    println!(
        "wrote {} sequences ({} tokens) to {}",
        train_part.n_sequences(),
        train_part.total_tokens,
        args.out.display()
    );
    if let (Some(n_test), Some(test_out)) = (args.test_seqs, args.test_out.as_ref()) {
        let test_part = Dataset::new(
            all.sequences[args.seqs..args.seqs + n_test].to_vec(),
            all.vocab.clone(),
            all.obs_vocab_size,
        )?;
        write_dataset_jsonl(&test_part, test_out)?;
        println!(
            "wrote {} test sequences to {}",
            test_part.n_sequences(),
            test_out.display()
        );
    }
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_overrides(
    cfg: &mut TrainConfig,
    lr: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    smoothing: Option<f64>,
    init_scale: Option<f64>,
    patience: Option<i64>,
) {
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = smoothing {
        cfg.label_smoothing = v;
    }
    if let Some(v) = init_scale {
        cfg.init_scale = v;
    }
    if let Some(v) = patience {
        cfg.early_stop_patience = usize::try_from(v).ok();
    }
}

fn empty_like(data: &Dataset) -> Result<Dataset> {
    Ok(Dataset::new(
        Vec::new(),
        data.vocab.clone(),
        data.obs_vocab_size,
    )?)
}

fn do_train(args: TrainArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let held = match &args.held {
        Some(p) => load_data(p)?,
        None => empty_like(&data)?,
    };
    let mut cfg = load_train_config(args.config.as_deref())?;
    apply_overrides(
        &mut cfg,
        args.lr,
        args.epochs,
        args.seed,
        args.smoothing,
        args.init_scale,
        args.patience,
    );
    if args.held.is_none() {
        cfg.early_stop_patience = None;
    }
    let result = train(args.model.0, &data, &held, &cfg)?;
    save_params(&result.params, &args.out)?;
    if let Some(history) = &args.history {
        write_history_csv(&result.history, history)?;
    }
    let last = result.history.last();
    println!(
        "trained {} for {} epochs (final train nll {:.6}) -> {}",
        args.model.0.as_str(),
        result.history.len(),
        last.map(|h| h.train_nll).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

/// Flattened free-running marginals plus gold labels over a dataset.
fn model_marginals(
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

fn write_report(
    dists: &[TokenDistribution],
    gold: &[usize],
    data: &Dataset,
    n_bins: usize,
    report_path: Option<&Path>,
    reliability_path: Option<&Path>,
) -> Result<()> {
    let report = calibration_report(dists, gold, &data.vocab, n_bins)?;
    let json = serde_json::to_string_pretty(&report)?;
    match report_path {
        Some(p) => {
            std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            println!(
                "accuracy {:.4}  ece {:.4}  brier {:.4}  -> {}",
                report.token_accuracy,
                report.ece,
                report.brier,
                p.display()
            );
        }
        None => println!("{json}"),
    }
    if let Some(p) = reliability_path {
        write_reliability_csv(&report.reliability, p)?;
    }
    Ok(())
}

fn ensemble_eval(args: EnsembleEvalArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let subset = if args.subset.is_empty() {
        let manifest = csp_core::ensembling::EnsembleManifest::read(&args.ensemble)?;
        (1..=manifest.members.len()).collect()
    } else {
        args.subset.clone()
    };
    let ens = build_ensemble(&args.ensemble, &subset)?;
    let mut dists = Vec::with_capacity(data.total_tokens);
    let mut gold = Vec::with_capacity(data.total_tokens);
    for seq in &data.sequences {
        dists.extend(ens.marginals(&seq.tokens, None, ArMode::Decode)?);
        gold.extend_from_slice(&seq.gold);
    }
    write_report(
        &dists,
        &gold,
        &data,
        args.n_bins,
        args.report.as_deref(),
        args.reliability.as_deref(),
    )
}

fn memoize(args: MemoizeArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let manifest = csp_core::ensembling::EnsembleManifest::read(&args.ensemble)?;
    let subset: Vec<usize> = (1..=manifest.members.len()).collect();
    let ens: Ensemble = build_ensemble(&args.ensemble, &subset)?;
    let header = memoize_teacher(&ens, &data, args.vprime, &args.out)?;
    println!(
        "memoized {} records (V' = {}, V = {}, crc32 {:#010x}) -> {}",
        header.token_count,
        header.v_prime,
        header.vocab_size,
        header.checksum,
        args.out.display()
    );
    Ok(())
}

fn distill(args: DistillArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let held = match &args.held {
        Some(p) => load_data(p)?,
        None => empty_like(&data)?,
    };
    let mut tcfg = load_train_config(args.config.as_deref())?;
    apply_overrides(&mut tcfg, args.lr, args.epochs, args.seed, None, None, None);
    if args.held.is_none() {
        tcfg.early_stop_patience = None;
    }
    let store = csp_core::distill::TeacherStore::open(&args.store)?;
    let dcfg = DistillConfig {
        beta: args.beta,
        temperature: args.temperature,
        v_prime: store.header().v_prime,
        lambda: args.lambda,
        renormalize: args.renormalize,
    };
    let result = train_student(&data, &held, &args.store, args.model.0, &dcfg, &tcfg)?;
    save_params(&result.params, &args.out)?;
    if let Some(history) = &args.history {
        write_history_csv(&result.history, history)?;
    }
    println!(
        "distilled {} student (beta {}, V' {}) -> {}",
        args.model.0.as_str(),
        args.beta,
        dcfg.v_prime,
        args.out.display()
    );
    Ok(())
}

/// Per-token log-probability vectors, used as logits for temperature fitting
/// (shift-invariant, so ln p is equivalent to the raw logits).
fn log_prob_logits(params: &TaggerParams, data: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (dists, gold) = model_marginals(params, data)?;
    let logits = dists
        .iter()
        .map(|d| d.probs().iter().map(|&p| p.max(1e-300).ln()).collect())
        .collect();
    Ok((logits, gold))
}

fn calibrate_fit(args: CalibrateFitArgs) -> Result<()> {
    let params = load_params(&args.model)?;
    let held = load_data(&args.held)?;
    let (logits, gold) = log_prob_logits(&params, &held)?;
    let fit = fit_temperature(&logits, &gold)?;
    if fit.degenerate {
        eprintln!("warning: degenerate logits; returning T = 1");
    }
    println!(
        "fitted T = {:.6}  nll before = {:.6}  nll after = {:.6}",
        fit.param.temperature, fit.nll_before, fit.nll_after
    );
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&fit)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn calibrate_apply(args: CalibrateApplyArgs) -> Result<()> {
    if args.temperature <= 0.0 {
        bail!("temperature must be > 0");
    }
    let params = load_params(&args.model)?;
    let data = load_data(&args.data)?;
    let (logits, gold) = log_prob_logits(&params, &data)?;
    let nll = scaled_nll(&logits, &gold, args.temperature)?;
    let dists: Vec<TokenDistribution> = logits
        .iter()
        .map(|z| csp_core::calibration::apply_temperature(z, args.temperature))
        .collect::<csp_core::Result<_>>()?;
    println!("scaled nll at T = {} is {:.6}", args.temperature, nll);
    write_report(&dists, &gold, &data, args.n_bins, args.report.as_deref(), None)
}

fn report(args: ReportArgs) -> Result<()> {
    let params = load_params(&args.model)?;
    let data = load_data(&args.data)?;
    let (dists, gold) = model_marginals(&params, &data)?;
    write_report(
        &dists,
        &gold,
        &data,
        args.n_bins,
        args.out.as_deref(),
        args.reliability.as_deref(),
    )
}

fn pr_curve_cmd(args: PrCurveArgs) -> Result<()> {
    let params = load_params(&args.model)?;
    let data = load_data(&args.data)?;
    let (dists, gold) = model_marginals(&params, &data)?;
    let types = TypeMap::from_vocab(&data.vocab);
    let classes = per_class_records(&dists, &gold, &types);
    let records: Vec<_> = match &args.ty {
        Some(name) => {
            let class = (0..types.n_classes())
                .find(|&c| types.class_name(c) == name)
                .with_context(|| format!("unknown entity type `{name}`"))?;
            classes
                .into_iter()
                .filter(|c| c.class == class)
                .flat_map(|c| c.records)
                .collect()
        }
        None => classes.into_iter().flat_map(|c| c.records).collect(),
    };
    let curve = pr_curve(&records, ThresholdSweep::Exact)?;
    write_pr_csv(&curve, &args.out)?;
    println!(
        "auc {:.6} ({} points) -> {}",
        curve.auc,
        curve.points.len(),
        args.out.display()
    );
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let summary = run_experiment(&cfg)?;
    println!(
        "experiment complete: {} replicates -> {}",
        summary.replicates.len(),
        cfg.output_dir.display()
    );
    for rep in &summary.replicates {
        println!(
            "  seed {}: member ece {:.4}, ensemble ece {:.4}, student ece {:.4}",
            rep.seed,
            rep.mean_member.ece,
            rep.ensembles.last().map(|e| e.ece).unwrap_or(f64::NAN),
            rep.student.ece
        );
    }
    Ok(())
}
