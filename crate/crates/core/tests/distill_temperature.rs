//! Distillation reduction and temperature-scaling contracts.

use csp_core::calibration::{apply_temperature, fit_temperature, scaled_nll};
use csp_core::data::generate_hmm;
use csp_core::distill::{memoize_teacher, train_student, DistillConfig};
use csp_core::ensembling::Ensemble;
use csp_core::taggers::{params_to_bytes, ModelType};
use csp_core::training::{train, TrainConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn teacher_store_for(
    data: &csp_core::data::Dataset,
    dir: &std::path::Path,
    v_prime: usize,
) -> std::path::PathBuf {
    let cfg = TrainConfig {
        epochs: 10,
        seed: 99,
        early_stop_patience: None,
        ..TrainConfig::default()
    };
    let member = train(ModelType::Iid, data, data, &cfg).unwrap().params;
    let ens = Ensemble::new(vec![member]).unwrap();
    let path = dir.join("teacher.tstr");
    memoize_teacher(&ens, data, v_prime, &path).unwrap();
    path
}

#[test]
fn beta_zero_student_is_bit_identical_to_baseline_training() {
    let (data, _) = generate_hmm(4, 9, 50, (2, 8), 31).unwrap();
    let (train_data, held) = csp_core::data::split_dataset(&data, 5, 0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&train_data, dir.path(), 4);

    for model_type in [ModelType::Iid, ModelType::Ar] {
        for lambda in [0.0, 0.1] {
            let tcfg = TrainConfig {
                epochs: 15,
                seed: 7,
                lr: 0.2,
                label_smoothing: lambda,
                ..TrainConfig::default()
            };
            let dcfg = DistillConfig {
                beta: 0.0,
                lambda,
                v_prime: 4,
                ..DistillConfig::default()
            };
            let baseline = train(model_type, &train_data, &held, &tcfg).unwrap();
            let student =
                train_student(&train_data, &held, &store, model_type, &dcfg, &tcfg).unwrap();
            assert_eq!(
                params_to_bytes(&baseline.params),
                params_to_bytes(&student.params),
                "{model_type:?} lambda={lambda}: trajectories diverged"
            );
            assert_eq!(baseline.history, student.history);
        }
    }
}

#[test]
fn beta_above_zero_changes_the_trajectory() {
    let (data, _) = generate_hmm(3, 6, 30, (2, 6), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&data, dir.path(), 3);
    let tcfg = TrainConfig {
        epochs: 10,
        seed: 3,
        early_stop_patience: None,
        ..TrainConfig::default()
    };
    let baseline = train(ModelType::Iid, &data, &data, &tcfg).unwrap();
    let dcfg = DistillConfig {
        beta: 0.5,
        lambda: 0.0,
        v_prime: 3,
        ..DistillConfig::default()
    };
    let student = train_student(&data, &data, &store, ModelType::Iid, &dcfg, &tcfg).unwrap();
    assert_ne!(
        params_to_bytes(&baseline.params),
        params_to_bytes(&student.params)
    );
}

#[test]
fn student_never_initializes_from_a_member() {
    // Distinct seeds give distinct random inits; the student's trajectory is
    // a pure function of (seed, objective), not of any teacher parameters.
    let (data, _) = generate_hmm(3, 6, 30, (2, 6), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&data, dir.path(), 3);
    let tcfg = TrainConfig {
        epochs: 1,
        seed: 12345,
        early_stop_patience: None,
        ..TrainConfig::default()
    };
    let dcfg = DistillConfig {
        beta: 1.0,
        lambda: 0.0,
        v_prime: 3,
        ..DistillConfig::default()
    };
    let a = train_student(&data, &data, &store, ModelType::Iid, &dcfg, &tcfg).unwrap();
    let b = train_student(&data, &data, &store, ModelType::Iid, &dcfg, &tcfg).unwrap();
    assert_eq!(params_to_bytes(&a.params), params_to_bytes(&b.params));
}

#[test]
fn trainer_objective_agrees_with_public_student_loss() {
    use csp_core::distill::{stream_teacher, student_loss, TruncatedDistribution};
    use csp_core::data::TokenDistribution;

    let (data, _) = generate_hmm(4, 7, 25, (2, 6), 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&data, dir.path(), 3);
    let records: Vec<TruncatedDistribution> = stream_teacher(&store)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();

    let dcfg = DistillConfig {
        beta: 0.7,
        lambda: 0.05,
        v_prime: 3,
        ..DistillConfig::default()
    };
    // Zero init makes the epoch-0 training loss reconstructible from the
    // public student_loss: every student distribution is uniform.
    let tcfg = TrainConfig {
        epochs: 1,
        init_scale: 0.0,
        early_stop_patience: None,
        ..TrainConfig::default()
    };
    let result = train_student(&data, &data, &store, ModelType::Iid, &dcfg, &tcfg).unwrap();

    let uniform = TokenDistribution::uniform(data.vocab.size());
    let mut offset = 0;
    let mut total = 0.0;
    for seq in &data.sequences {
        let dists = vec![uniform.clone(); seq.len()];
        let seq_records = records[offset..offset + seq.len()].to_vec();
        total += student_loss(seq, &dists, &seq_records, &dcfg).unwrap() * seq.len() as f64;
        offset += seq.len();
    }
    let expected = total / data.total_tokens as f64;
    let got = result.history[0].train_nll;
    assert!(
        (got - expected).abs() < 1e-12,
        "trainer epoch-0 loss {got} vs student_loss reconstruction {expected}"
    );
}

#[test]
fn token_count_mismatch_fails_before_training() {
    let (data, _) = generate_hmm(3, 6, 30, (2, 6), 8).unwrap();
    let (smaller, _) = csp_core::data::split_dataset(&data, 3, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&data, dir.path(), 3);
    let err = train_student(
        &smaller,
        &data,
        &store,
        ModelType::Iid,
        &DistillConfig {
            v_prime: 3,
            ..DistillConfig::default()
        },
        &TrainConfig::default(),
    );
    assert!(err.is_err());
}

#[test]
fn crf_students_are_rejected() {
    let (data, _) = generate_hmm(3, 6, 20, (2, 5), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = teacher_store_for(&data, dir.path(), 3);
    let err = train_student(
        &data,
        &data,
        &store,
        ModelType::Crf,
        &DistillConfig {
            v_prime: 3,
            ..DistillConfig::default()
        },
        &TrainConfig::default(),
    );
    assert!(err.is_err());
}

/// Builds (logits, gold) pairs where gold is sampled from softmax(z) and the
/// observed logits are `scale * z`: the NLL-optimal temperature is `scale`.
fn overconfident_fixture(scale: f64, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logit_sets = Vec::with_capacity(n);
    let mut gold = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = csp_core::data::TokenDistribution::from_logits(&z);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = 4;
        for (y, p) in probs.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                pick = y;
                break;
            }
        }
        gold.push(pick);
        logit_sets.push(z.iter().map(|x| x * scale).collect());
    }
    (logit_sets, gold)
}

#[test]
fn well_calibrated_logits_fit_near_t1() {
    let (logits, gold) = overconfident_fixture(1.0, 20_000, 5);
    let fit = fit_temperature(&logits, &gold).unwrap();
    assert!(
        (fit.param.temperature - 1.0).abs() < 0.05,
        "T = {}",
        fit.param.temperature
    );
}

#[test]
fn three_x_overconfident_logits_recover_t3() {
    let (logits, gold) = overconfident_fixture(3.0, 20_000, 6);
    let fit = fit_temperature(&logits, &gold).unwrap();
    assert!(
        (fit.param.temperature - 3.0).abs() < 0.1,
        "T = {}",
        fit.param.temperature
    );
    assert!(fit.nll_after <= fit.nll_before);
}

#[test]
fn fitted_nll_never_exceeds_t1_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..10 {
        let n = 200;
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let fit = fit_temperature(&logits, &gold).unwrap();
        let at_one = scaled_nll(&logits, &gold, 1.0).unwrap();
        assert!(
            fit.nll_after <= at_one + 1e-12,
            "case {case}: {} vs {at_one}",
            fit.nll_after
        );
    }
}

#[test]
fn scaling_never_changes_the_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let plain = csp_core::data::TokenDistribution::from_logits(&logits);
        for t in [0.05, 0.5, 1.0, 3.0, 17.0] {
            assert_eq!(
                apply_temperature(&logits, t).unwrap().argmax(),
                plain.argmax()
            );
        }
    }
}
