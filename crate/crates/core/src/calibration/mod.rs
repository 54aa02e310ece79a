//! Calibration metrics: Brier, stratified Brier, adaptive-binned ECE, top-k
//! ECE, balanced (per-type, top-2N filtered) ECE and Brier, and post-hoc
//! temperature scaling.

mod temperature;

pub use temperature::{
    apply_temperature, fit_temperature, scaled_nll, TemperatureFit, TemperatureParam,
};

use serde::{Deserialize, Serialize};

use crate::data::{LabelVocab, TokenDistribution};
use crate::error::{Error, Result};

/// One scored event: a confidence, its binary outcome, the class it scores,
/// and the flat token position it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub correct: bool,
    pub class_id: usize,
    pub position: usize,
}

/// Statistics of one adaptive bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-count bins over sorted confidences with group boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<BinStats>,
    /// `n_bins + 1` non-decreasing edge confidences.
    pub boundaries: Vec<f64>,
}

/// Bin sizes for `len` items in `n_bins` groups, sizes differing by at most
/// one, larger bins first.
pub fn adaptive_group_sizes(len: usize, n_bins: usize) -> Vec<usize> {
    let base = len / n_bins;
    let rem = len % n_bins;
    (0..n_bins)
        .map(|b| if b < rem { base + 1 } else { base })
        .collect()
}

/// Adaptive binning: records sorted ascending by confidence (stable) and cut
/// into equal-count contiguous groups.
pub fn adaptive_bins(records: &[PredictionRecord], n_bins: usize) -> Result<ReliabilityBins> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be >= 1"));
    }
    if records.len() < n_bins {
        return Err(Error::invalid(format!(
            "{} records cannot fill {} bins",
            records.len(),
            n_bins
        )));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap());

    let sizes = adaptive_group_sizes(sorted.len(), n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut boundaries = Vec::with_capacity(n_bins + 1);
    boundaries.push(sorted[0].confidence);
    let mut start = 0;
    for size in sizes {
        let group = &sorted[start..start + size];
        let mean_confidence =
            group.iter().map(|r| r.confidence).sum::<f64>() / group.len() as f64;
        let accuracy =
            group.iter().filter(|r| r.correct).count() as f64 / group.len() as f64;
        bins.push(BinStats {
            count: group.len(),
            mean_confidence,
            accuracy,
        });
        start += size;
        let edge = if start < sorted.len() {
            sorted[start].confidence
        } else {
            sorted[sorted.len() - 1].confidence
        };
        boundaries.push(edge);
    }
    Ok(ReliabilityBins { bins, boundaries })
}

/// Expected calibration error over adaptive bins:
/// `sum_b (count_b / N) * |mean_confidence_b - accuracy_b|`.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    let binned = adaptive_bins(records, n_bins)?;
    let n = records.len() as f64;
    Ok(binned
        .bins
        .iter()
        .map(|b| (b.count as f64 / n) * (b.mean_confidence - b.accuracy).abs())
        .sum())
}

/// Mean squared error between confidences and binary outcomes.
pub fn brier(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("brier over zero records"));
    }
    Ok(records
        .iter()
        .map(|r| {
            let o = if r.correct { 1.0 } else { 0.0 };
            (r.confidence - o).powi(2)
        })
        .sum::<f64>()
        / records.len() as f64)
}

/// Brier score restricted to positive-outcome and negative-outcome events.
pub fn stratified_brier(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    let pos: Vec<PredictionRecord> = records.iter().filter(|r| r.correct).cloned().collect();
    let neg: Vec<PredictionRecord> = records.iter().filter(|r| !r.correct).cloned().collect();
    if pos.is_empty() {
        return Err(Error::invalid("stratified brier: positive stratum is empty"));
    }
    if neg.is_empty() {
        return Err(Error::invalid("stratified brier: negative stratum is empty"));
    }
    Ok((brier(&pos)?, brier(&neg)?))
}

/// Label indices of `dist` ranked by probability descending, ties toward the
/// lower index.
pub fn ranked_labels(dist: &TokenDistribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.dim()).collect();
    order.sort_by(|&a, &b| {
        dist.prob(b)
            .partial_cmp(&dist.prob(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// One record per token: the top-1 predicted label with its probability.
pub fn top1_records(dists: &[TokenDistribution], gold: &[usize]) -> Vec<PredictionRecord> {
    dists
        .iter()
        .zip(gold)
        .enumerate()
        .map(|(pos, (d, &g))| {
            let pred = d.argmax();
            PredictionRecord {
                confidence: d.prob(pred),
                correct: pred == g,
                class_id: pred,
                position: pos,
            }
        })
        .collect()
}

/// Records for the top `k` predictions at each token (rank-pooled).
pub fn topk_records(
    dists: &[TokenDistribution],
    gold: &[usize],
    k: usize,
) -> Result<Vec<PredictionRecord>> {
    if dists.is_empty() {
        return Err(Error::invalid("no distributions"));
    }
    if k == 0 || k > dists[0].dim() {
        return Err(Error::invalid(format!("k = {k} out of range")));
    }
    let mut out = Vec::with_capacity(dists.len() * k);
    for (pos, (d, &g)) in dists.iter().zip(gold).enumerate() {
        for &label in ranked_labels(d).iter().take(k) {
            out.push(PredictionRecord {
                confidence: d.prob(label),
                correct: label == g,
                class_id: label,
                position: pos,
            });
        }
    }
    Ok(out)
}

/// ECE of the top-k predictions at each token, pooled over all `N * k`
/// records.
pub fn ece_topk(
    dists: &[TokenDistribution],
    gold: &[usize],
    k: usize,
    n_bins: usize,
) -> Result<f64> {
    ece(&topk_records(dists, gold, k)?, n_bins)
}

/// Per-rank variant: ECE computed separately for each rank j in 1..=k, then
/// averaged. Not the default reading; exposed for comparison.
pub fn ece_topk_per_rank(
    dists: &[TokenDistribution],
    gold: &[usize],
    k: usize,
    n_bins: usize,
) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::invalid("no distributions"));
    }
    if k == 0 || k > dists[0].dim() {
        return Err(Error::invalid(format!("k = {k} out of range")));
    }
    let mut total = 0.0;
    for rank in 0..k {
        let records: Vec<PredictionRecord> = dists
            .iter()
            .zip(gold)
            .enumerate()
            .map(|(pos, (d, &g))| {
                let label = ranked_labels(d)[rank];
                PredictionRecord {
                    confidence: d.prob(label),
                    correct: label == g,
                    class_id: label,
                    position: pos,
                }
            })
            .collect();
        total += ece(&records, n_bins)?;
    }
    Ok(total / k as f64)
}

/// Collapses B-/I- labels to entity types; `O` maps to no class. Labels
/// without an IOB prefix are their own type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeMap {
    classes: Vec<String>,
    label_to_class: Vec<Option<usize>>,
}

impl TypeMap {
    pub fn from_vocab(vocab: &LabelVocab) -> TypeMap {
        let mut classes: Vec<String> = Vec::new();
        let mut label_to_class = Vec::with_capacity(vocab.size());
        for label in vocab.labels() {
            if label == "O" {
                label_to_class.push(None);
                continue;
            }
            let ty = label
                .strip_prefix("B-")
                .or_else(|| label.strip_prefix("I-"))
                .unwrap_or(label)
                .to_string();
            let class = match classes.iter().position(|c| *c == ty) {
                Some(i) => i,
                None => {
                    classes.push(ty);
                    classes.len() - 1
                }
            };
            label_to_class.push(Some(class));
        }
        TypeMap {
            classes,
            label_to_class,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn class_of_label(&self, label: usize) -> Option<usize> {
        self.label_to_class[label]
    }

    /// Type-level probability: sum over labels mapping to `class`.
    pub fn class_prob(&self, dist: &TokenDistribution, class: usize) -> f64 {
        (0..dist.dim())
            .filter(|&l| self.label_to_class[l] == Some(class))
            .map(|l| dist.prob(l))
            .sum()
    }
}

/// Per-class event records plus the class's true token count.
#[derive(Debug, Clone)]
pub struct ClassRecords {
    pub class: usize,
    pub records: Vec<PredictionRecord>,
    /// Number of tokens whose gold label maps to this class (N_c).
    pub n_true: usize,
}

/// Builds per-class records: every token contributes one record per class
/// with the model's type-level probability as confidence and outcome
/// `gold type == class`. Any token may compete for any class's pool.
pub fn per_class_records(
    dists: &[TokenDistribution],
    gold: &[usize],
    types: &TypeMap,
) -> Vec<ClassRecords> {
    (0..types.n_classes())
        .map(|class| {
            let mut records = Vec::with_capacity(dists.len());
            let mut n_true = 0;
            for (pos, (d, &g)) in dists.iter().zip(gold).enumerate() {
                let is_class = types.class_of_label(g) == Some(class);
                if is_class {
                    n_true += 1;
                }
                records.push(PredictionRecord {
                    confidence: types.class_prob(d, class),
                    correct: is_class,
                    class_id: class,
                    position: pos,
                });
            }
            ClassRecords {
                class,
                records,
                n_true,
            }
        })
        .collect()
}

/// Keeps the `2 * n_true` most confident records (all of them when fewer are
/// available). Ties keep the earlier record.
pub fn balanced_filter(records: &[PredictionRecord], n_true: usize) -> Vec<PredictionRecord> {
    let mut sorted: Vec<PredictionRecord> = records.to_vec();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    sorted.truncate(2 * n_true);
    sorted
}

fn balanced_metric(
    classes: &[ClassRecords],
    metric: impl Fn(&[PredictionRecord]) -> Result<f64>,
) -> Result<f64> {
    let total_true: usize = classes.iter().map(|c| c.n_true).sum();
    if total_true == 0 {
        return Err(Error::invalid("balanced metric: no true tokens in any class"));
    }
    let mut value = 0.0;
    for c in classes {
        if c.n_true == 0 {
            // Weight would be zero; skipped.
            continue;
        }
        let filtered = balanced_filter(&c.records, c.n_true);
        let weight = c.n_true as f64 / total_true as f64;
        value += weight * metric(&filtered)?;
    }
    Ok(value)
}

/// Weighted sum of each class's adaptively binned ECE over its top-2N pool.
pub fn balanced_ece(classes: &[ClassRecords], n_bins: usize) -> Result<f64> {
    balanced_metric(classes, |records| ece(records, n_bins))
}

/// Weighted sum of each class's Brier score over its top-2N pool.
pub fn balanced_brier(classes: &[ClassRecords]) -> Result<f64> {
    balanced_metric(classes, brier)
}

/// Bundle of task-level calibration metrics plus reliability-bin data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_tokens: usize,
    pub token_accuracy: f64,
    pub brier: f64,
    pub bs_plus: f64,
    pub bs_minus: f64,
    pub ece: f64,
    pub ece_1: f64,
    pub ece_5: f64,
    pub balanced_ece: f64,
    pub balanced_brier: f64,
    pub reliability: ReliabilityBins,
}

/// Evaluates the standard metric suite over token distributions and gold
/// labels. `n_bins` is clamped per class where a filtered pool is smaller
/// than the bin count.
pub fn calibration_report(
    dists: &[TokenDistribution],
    gold: &[usize],
    vocab: &LabelVocab,
    n_bins: usize,
) -> Result<CalibrationReport> {
    if dists.len() != gold.len() || dists.is_empty() {
        return Err(Error::invalid("report needs aligned non-empty inputs"));
    }
    let top1 = top1_records(dists, gold);
    let token_accuracy =
        top1.iter().filter(|r| r.correct).count() as f64 / top1.len() as f64;
    let types = TypeMap::from_vocab(vocab);
    let classes = per_class_records(dists, gold, &types);
    let class_events: Vec<PredictionRecord> = classes
        .iter()
        .flat_map(|c| c.records.iter().cloned())
        .collect();
    let (bs_plus, bs_minus) = stratified_brier(&class_events)?;
    let min_pool = classes
        .iter()
        .filter(|c| c.n_true > 0)
        .map(|c| balanced_filter(&c.records, c.n_true).len())
        .min()
        .unwrap_or(1);
    let balanced_bins = n_bins.min(min_pool).max(1);
    let k5 = 5.min(vocab.size());
    Ok(CalibrationReport {
        n_tokens: dists.len(),
        token_accuracy,
        brier: brier(&top1)?,
        bs_plus,
        bs_minus,
        ece: ece(&top1, n_bins.min(top1.len()))?,
        ece_1: ece_topk(dists, gold, 1, n_bins.min(top1.len()))?,
        ece_5: ece_topk(dists, gold, k5, n_bins.min(top1.len() * k5))?,
        balanced_ece: balanced_ece(&classes, balanced_bins)?,
        balanced_brier: balanced_brier(&classes)?,
        reliability: adaptive_bins(&top1, n_bins.min(top1.len()))?,
    })
}

/// Writes reliability bins as `bin_index,count,mean_conf,accuracy` CSV.
pub fn write_reliability_csv(bins: &ReliabilityBins, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("bin_index,count,mean_conf,accuracy\n");
    for (i, b) in bins.bins.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i, b.count, b.mean_confidence, b.accuracy
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the bin statistics back from a reliability CSV (boundaries are not
/// part of the CSV form).
pub fn read_reliability_csv(path: &std::path::Path) -> Result<Vec<BinStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut bins = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: i + 1,
            message: format!("bad {what}"),
        };
        bins.push(BinStats {
            count: cols[1].parse().map_err(|_| bad("count"))?,
            mean_confidence: cols[2].parse().map_err(|_| bad("mean_conf"))?,
            accuracy: cols[3].parse().map_err(|_| bad("accuracy"))?,
        });
    }
    Ok(bins)
}
