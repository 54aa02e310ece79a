//! Task metrics: exact-span micro F1 over IOB2 sequences and PR curves with
//! AUC from thresholded token probabilities.

mod experiment;

pub use experiment::{
    run_experiment, run_sgdr_comparison, DiversityRecipe, ExperimentConfig, ExperimentSummary,
    ModelMetrics, ReplicateSummary, SgdrReplicate, TaskSpec,
};

use serde::{Deserialize, Serialize};

use crate::calibration::PredictionRecord;
use crate::data::LabelVocab;
use crate::error::{Error, Result};

/// An entity span: half-open token range with a type name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub ty: String,
    pub start: usize,
    pub end: usize,
}

/// Extracts spans from an IOB2 label sequence. An `I-X` without a live `X`
/// span opens one (conlleval-compatible lenient reading).
pub fn extract_spans(labels: &[&str]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, &label) in labels.iter().enumerate() {
        let (prefix, ty) = match label.split_once('-') {
            Some((p, t)) if p == "B" || p == "I" => (p, t),
            _ => ("O", ""),
        };
        let continues = prefix == "I"
            && open
                .as_ref()
                .map(|(open_ty, _)| open_ty == ty)
                .unwrap_or(false);
        if !continues {
            if let Some((open_ty, start)) = open.take() {
                spans.push(Span {
                    ty: open_ty,
                    start,
                    end: i,
                });
            }
            if prefix == "B" || prefix == "I" {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((open_ty, start)) = open {
        spans.push(Span {
            ty: open_ty,
            start,
            end: labels.len(),
        });
    }
    spans
}

/// Renders non-overlapping spans back to IOB2 labels.
pub fn spans_to_iob2(spans: &[Span], len: usize) -> Vec<String> {
    let mut labels = vec!["O".to_string(); len];
    for span in spans {
        for i in span.start..span.end {
            let prefix = if i == span.start { "B" } else { "I" };
            labels[i] = format!("{prefix}-{}", span.ty);
        }
    }
    labels
}

/// Span-level precision/recall/F1 with a degenerate-case flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when no spans were predicted: precision is undefined and reported
    /// as 0.
    pub precision_undefined: bool,
}

/// Micro-averaged exact-span F1 over label-index sequences.
pub fn span_f1(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    vocab: &LabelVocab,
) -> Result<SpanF1> {
    if pred.len() != gold.len() {
        return Err(Error::invalid("prediction/gold sequence count mismatch"));
    }
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_match = 0usize;
    for (p_seq, g_seq) in pred.iter().zip(gold) {
        if p_seq.len() != g_seq.len() {
            return Err(Error::invalid("prediction/gold length mismatch"));
        }
        let to_strs = |seq: &[usize]| -> Vec<&str> { seq.iter().map(|&l| vocab.label(l)).collect() };
        let p_spans = extract_spans(&to_strs(p_seq));
        let g_spans = extract_spans(&to_strs(g_seq));
        n_pred += p_spans.len();
        n_gold += g_spans.len();
        let gold_set: std::collections::HashSet<&Span> = g_spans.iter().collect();
        n_match += p_spans.iter().filter(|s| gold_set.contains(s)).count();
    }
    let precision_undefined = n_pred == 0;
    let precision = if n_pred == 0 {
        0.0
    } else {
        n_match as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        0.0
    } else {
        n_match as f64 / n_gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanF1 {
        precision,
        recall,
        f1,
        precision_undefined,
    })
}

/// One PR point at a confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve with trapezoidal AUC over recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Threshold sweep: every distinct confidence (exact curve) or a fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThresholdSweep {
    Exact,
    Grid { n: usize },
}

/// PR curve over positive-class event records: at threshold t, predict
/// positive where confidence >= t.
pub fn pr_curve(records: &[PredictionRecord], sweep: ThresholdSweep) -> Result<PrCurve> {
    let n_pos = records.iter().filter(|r| r.correct).count();
    if n_pos == 0 {
        return Err(Error::invalid("pr_curve needs at least one positive event"));
    }
    // Ascending (confidence, correct) pairs with suffix true-positive counts
    // make each threshold an O(log N) lookup.
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.correct)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = sorted.len();
    let mut suffix_tp = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix_tp[i] = suffix_tp[i + 1] + usize::from(sorted[i].1);
    }

    let mut thresholds: Vec<f64> = match sweep {
        ThresholdSweep::Exact => {
            let mut t: Vec<f64> = sorted.iter().map(|(c, _)| *c).collect();
            t.dedup();
            t
        }
        ThresholdSweep::Grid { n } => {
            if n < 2 {
                return Err(Error::invalid("grid sweep needs n >= 2"));
            }
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        }
    };
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in &thresholds {
        let first = sorted.partition_point(|&(c, _)| c < threshold);
        let tp = suffix_tp[first];
        let predicted = n - first;
        let precision = if predicted == 0 {
            1.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = tp as f64 / n_pos as f64;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }

    // Trapezoid walked from the highest threshold down (recall then
    // non-decreasing); anchored at recall 0 where an empty prediction set has
    // precision 1 by convention. Points sharing a recall contribute no area.
    let mut walk = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    walk.extend(points.iter().rev().copied());
    let mut auc = 0.0;
    for w in walk.windows(2) {
        auc += (w[1].recall - w[0].recall) * 0.5 * (w[0].precision + w[1].precision);
    }
    Ok(PrCurve { points, auc })
}

/// Writes a PR curve as `threshold,precision,recall` CSV with a trailing
/// `# auc=<value>` comment line.
pub fn write_pr_csv(curve: &PrCurve, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out.push_str(&format!("# auc={}\n", curve.auc));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a PR CSV written by [`write_pr_csv`] back into a curve.
pub fn read_pr_csv(path: &std::path::Path) -> Result<PrCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut auc = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        if let Some(rest) = line.strip_prefix("# auc=") {
            auc = Some(rest.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: "bad auc".into(),
            })?);
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad {what} `{s}`"),
            })
        };
        points.push(PrPoint {
            threshold: parse(cols[0], "threshold")?,
            precision: parse(cols[1], "precision")?,
            recall: parse(cols[2], "recall")?,
        });
    }
    Ok(PrCurve {
        points,
        auc: auc.ok_or_else(|| Error::invalid("missing auc line"))?,
    })
}
