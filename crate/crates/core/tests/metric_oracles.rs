//! Calibration metrics checked against independent per-definition
//! recomputations on fixtures, plus statistical sanity properties.

mod common;

use csp_core::calibration::{
    balanced_brier, balanced_ece, balanced_filter, brier, ece, ece_topk, per_class_records,
    ranked_labels, ClassRecords, PredictionRecord, TypeMap,
};
use csp_core::data::{LabelVocab, TokenDistribution};
use csp_core::ensembling::mixture;
use csp_core::eval::{pr_curve, ThresholdSweep};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> TokenDistribution {
    let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
    TokenDistribution::from_logits(&logits)
}

#[test]
fn ece_matches_recomputation_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let n = rng.random_range(20..200);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0.0..1.0), rng.random_bool(0.5)))
            .collect();
        let n_bins = rng.random_range(1..=10.min(n));
        let ours = ece(&common::to_records(&pairs), n_bins).unwrap();
        let oracle = common::recompute_ece(&pairs, n_bins);
        assert!((ours - oracle).abs() <= 1e-12);
    }
}

#[test]
fn brier_matches_recomputation_and_worked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let pairs: Vec<(f64, bool)> = (0..137)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_bool(0.3)))
        .collect();
    let ours = brier(&common::to_records(&pairs)).unwrap();
    assert!((ours - common::recompute_brier(&pairs)).abs() <= 1e-12);

    let worked = [(0.9, true), (0.2, false), (0.6, false)];
    assert!((brier(&common::to_records(&worked)).unwrap() - 0.41 / 3.0).abs() <= 1e-12);
    let ece_worked = [(0.9, true), (0.8, true), (0.6, false), (0.55, true)];
    assert!((ece(&common::to_records(&ece_worked), 2).unwrap() - 0.1125).abs() <= 1e-12);
}

#[test]
fn ece_topk_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let v = 5;
    let dists: Vec<TokenDistribution> = (0..80).map(|_| random_dist(&mut rng, v)).collect();
    let gold: Vec<usize> = (0..80).map(|_| rng.random_range(0..v)).collect();
    for k in [1, 3, 5] {
        let ours = ece_topk(&dists, &gold, k, 10).unwrap();
        // Direct reconstruction of the pooled record set.
        let mut pairs: Vec<(f64, bool)> = Vec::new();
        for (d, &g) in dists.iter().zip(&gold) {
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| d.prob(b).partial_cmp(&d.prob(a)).unwrap().then(a.cmp(&b)));
            for &label in order.iter().take(k) {
                pairs.push((d.prob(label), label == g));
            }
        }
        let oracle = common::recompute_ece(&pairs, 10);
        assert!((ours - oracle).abs() <= 1e-12, "k={k}: {ours} vs {oracle}");
    }
}

#[test]
fn ranked_labels_orders_by_probability_then_index() {
    let d = TokenDistribution::new(vec![0.25, 0.25, 0.4, 0.1]).unwrap();
    assert_eq!(ranked_labels(&d), vec![2, 0, 1, 3]);
}

#[test]
fn balanced_metrics_match_recomputation_on_a_three_class_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let vocab = LabelVocab::new(vec![
        "O".into(),
        "B-PER".into(),
        "I-PER".into(),
        "B-LOC".into(),
        "I-LOC".into(),
        "B-ORG".into(),
    ])
    .unwrap();
    let types = TypeMap::from_vocab(&vocab);
    assert_eq!(types.n_classes(), 3);

    let n = 400;
    let dists: Vec<TokenDistribution> = (0..n).map(|_| random_dist(&mut rng, 6)).collect();
    let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let classes = per_class_records(&dists, &gold, &types);

    let n_bins = 10;
    let ours_ece = balanced_ece(&classes, n_bins).unwrap();
    let ours_brier = balanced_brier(&classes).unwrap();

    // Independent recomputation straight from the definitions.
    let class_of = |label: usize| -> Option<usize> {
        match vocab.label(label) {
            "O" => None,
            l => {
                let ty = l.trim_start_matches("B-").trim_start_matches("I-");
                Some(match ty {
                    "PER" => 0,
                    "LOC" => 1,
                    "ORG" => 2,
                    _ => unreachable!(),
                })
            }
        }
    };
    let mut oracle_ece = 0.0;
    let mut oracle_brier = 0.0;
    let mut total_true = 0usize;
    let mut per_class: Vec<(usize, Vec<(f64, bool)>)> = Vec::new();
    for class in 0..3 {
        let mut events: Vec<(f64, bool)> = Vec::new();
        let mut n_c = 0usize;
        for (d, &g) in dists.iter().zip(&gold) {
            let conf: f64 = (0..6)
                .filter(|&l| class_of(l) == Some(class))
                .map(|l| d.prob(l))
                .sum();
            let outcome = class_of(g) == Some(class);
            if outcome {
                n_c += 1;
            }
            events.push((conf, outcome));
        }
        // Top 2 N_c by confidence, stable.
        let mut order: Vec<usize> = (0..events.len()).collect();
        order.sort_by(|&a, &b| events[b].0.partial_cmp(&events[a].0).unwrap());
        let kept: Vec<(f64, bool)> = order.iter().take(2 * n_c).map(|&i| events[i]).collect();
        total_true += n_c;
        per_class.push((n_c, kept));
    }
    for (n_c, kept) in &per_class {
        let w = *n_c as f64 / total_true as f64;
        oracle_ece += w * common::recompute_ece(kept, n_bins);
        oracle_brier += w * common::recompute_brier(kept);
    }

    assert!((ours_ece - oracle_ece).abs() <= 1e-12, "{ours_ece} vs {oracle_ece}");
    assert!(
        (ours_brier - oracle_brier).abs() <= 1e-12,
        "{ours_brier} vs {oracle_brier}"
    );
}

#[test]
fn balanced_identical_classes_share_their_value() {
    let records: Vec<PredictionRecord> = (0..20)
        .map(|i| PredictionRecord {
            confidence: (i as f64 * 0.819) % 1.0,
            correct: i % 4 == 0,
            class_id: 0,
            position: i,
        })
        .collect();
    let shared = |class| ClassRecords {
        class,
        records: records.clone(),
        n_true: 5,
    };
    let one = balanced_brier(&[shared(0)]).unwrap();
    let two = balanced_brier(&[shared(0), shared(1)]).unwrap();
    assert!((one - two).abs() <= 1e-15);
    let filtered = balanced_filter(&records, 5);
    assert!((one - brier(&filtered).unwrap()).abs() <= 1e-15);
}

#[test]
fn bernoulli_confidence_draws_drive_ece_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let n = 100_000;
    let pairs: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let conf: f64 = rng.random_range(0.0..1.0);
            (conf, rng.random_bool(conf))
        })
        .collect();
    let value = ece(&common::to_records(&pairs), 10).unwrap();
    assert!(value < 0.01, "ece {value}");
}

#[test]
fn random_scores_give_auc_near_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let n = 100_000;
    let rho = 0.3;
    let records: Vec<PredictionRecord> = (0..n)
        .map(|i| PredictionRecord {
            confidence: rng.random_range(0.0..1.0),
            correct: rng.random_bool(rho),
            class_id: 0,
            position: i,
        })
        .collect();
    let curve = pr_curve(&records, ThresholdSweep::Exact).unwrap();
    assert!((curve.auc - rho).abs() < 0.02, "auc {}", curve.auc);
}

#[test]
fn mixture_entropy_dominates_mean_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for _ in 0..1000 {
        let v = rng.random_range(2..6);
        let k = rng.random_range(2..5);
        let dists: Vec<TokenDistribution> = (0..k).map(|_| random_dist(&mut rng, v)).collect();
        let mixed = mixture(&dists).unwrap();
        let mean_entropy: f64 =
            dists.iter().map(|d| d.entropy()).sum::<f64>() / dists.len() as f64;
        assert!(mixed.entropy() + 1e-12 >= mean_entropy);
    }
}
