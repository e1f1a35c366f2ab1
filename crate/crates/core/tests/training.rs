mod common;

use common::*;
use proptest::prelude::*;

use graphmt::decoder::AttendMode;
use graphmt::model::Model;
use graphmt::params::ParamStore;
use graphmt::tape::Tape;
use graphmt::training::{
    adam_step, evaluate_loss, lr_schedule, make_batches, nll_loss, train, AdamConfig, Batch, OptimizerState,
    StepLog, TrainConfig,
};
use graphmt::vocab::PAD;
use graphmt::Tensor;

fn log_rows(rows: &[Vec<f64>]) -> Tensor {
    let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    Tensor::from_rows(&logs).unwrap()
}

#[test]
fn nll_of_uniform_distribution_is_log_vocab() {
    for v in [2usize, 8, 50, 1000] {
        let lp = log_rows(&vec![vec![1.0 / v as f64; v]; 3]);
        let loss = nll_loss(&lp, &[0, v - 1, v / 2], &[true; 3]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12, "|V|={v}: {loss}");
    }
}

#[test]
fn nll_of_one_hot_prediction_is_zero() {
    let lp = log_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(nll_loss(&lp, &[0, 2], &[true, true]).unwrap(), 0.0);
}

#[test]
fn nll_ignores_padded_positions() {
    let probs = [vec![0.5, 0.25, 0.25], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]];
    let lp = log_rows(&probs);
    let loss = nll_loss(&lp, &[0, 1, PAD], &[true, true, false]).unwrap();
    let want = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
    assert!((loss - want).abs() < 1e-15);
    assert!(nll_loss(&lp, &[0, 0, 0], &[false; 3]).is_err());
}

#[test]
fn schedule_reference_points() {
    let d = 128usize;
    let s = (d as f64).powf(-0.5);
    assert!((lr_schedule(1, d, 4000) - s * 4000f64.powf(-1.5)).abs() < 1e-18);
    assert!((lr_schedule(4000, d, 4000) - s / 4000f64.sqrt()).abs() < 1e-15);
    assert!((lr_schedule(16000, d, 4000) - s / 16000f64.sqrt()).abs() < 1e-15);
    assert_eq!(lr_schedule(0, d, 4000), lr_schedule(1, d, 4000));
}

#[test]
fn schedule_rises_then_decays() {
    let lr: Vec<f64> = (1..=400).map(|k| lr_schedule(k, 32, 100)).collect();
    assert!(lr[..100].windows(2).all(|w| w[1] > w[0]));
    assert!(lr[99..].windows(2).all(|w| w[1] < w[0]));
    let peak = lr.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(peak, lr[99]);
}

fn bowl(store: &ParamStore, centre: &[f64]) -> (f64, graphmt::tape::Gradients) {
    let id = store.id("p").unwrap();
    let mut tape = Tape::with_params(store);
    let p = tape.param(id);
    let c = tape.constant(Tensor::new(vec![centre.len()], centre.iter().map(|x| -x).collect()).unwrap());
    let d = tape.add(p, c).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq);
    let value = tape.value(loss)[0];
    (value, tape.backward(loss).unwrap())
}

#[test]
fn adam_with_zero_gradient_leaves_parameters() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = store.clone_data();
    let mut state = OptimizerState::new(&store);
    let (_, grads) = bowl(&store, &[1.0, -2.0, 0.5]);
    adam_step(&mut store, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(store.clone_data(), before);
    assert_eq!(state.step, 1);
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![3], vec![0.0, 3.0, -1.0]).unwrap()).unwrap();
    let mut state = OptimizerState::new(&store);
    let (_, grads) = bowl(&store, &[1.0, 1.0, 1.0]);
    adam_step(&mut store, &grads, &mut state, 0.01, &AdamConfig::default()).unwrap();
    let after = store.clone_data();
    for (a, b) in after[0].iter().zip([0.01, 2.99, -0.99]) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn adam_matches_reference_on_quadratic_bowl() {
    let centre = [0.5, -1.5, 2.0, 0.0];
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
    let mut state = OptimizerState::new(&store);
    let cfg = AdamConfig::default();

    let mut p = [0.0f64; 4];
    let (mut m, mut v) = ([0.0f64; 4], [0.0f64; 4]);
    let lr = 0.05;
    let (start, _) = bowl(&store, &centre);
    for t in 1..=10 {
        let (_, grads) = bowl(&store, &centre);
        adam_step(&mut store, &grads, &mut state, lr, &cfg).unwrap();
        for k in 0..4 {
            let g = 2.0 * (p[k] - centre[k]);
            m[k] = 0.9 * m[k] + 0.1 * g;
            v[k] = 0.98 * v[k] + 0.02 * g * g;
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.98f64.powi(t));
            p[k] -= lr * mh / (vh.sqrt() + 1e-9);
        }
    }
    let got = &store.clone_data()[0];
    for (a, b) in got.iter().zip(p) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let (end, _) = bowl(&store, &centre);
    assert!(end < start);
}

trait CloneData {
    fn clone_data(&self) -> Vec<Vec<f64>>;
}

impl CloneData for ParamStore {
    fn clone_data(&self) -> Vec<Vec<f64>> {
        self.iter().map(|(_, _, t)| t.data().to_vec()).collect()
    }
}

#[test]
fn batches_respect_cap_and_cover_every_example() {
    let examples = random_examples(4, 40);
    for cap in [1usize, 12, 30, 10_000] {
        let batches = make_batches(&examples, cap, 9).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.indices.len() == 1 || b.tokens <= cap, "cap {cap}: {} tokens", b.tokens);
        }
        if cap == 1 {
            assert!(batches.iter().all(|b| b.indices.len() == 1));
        }
        if cap == 10_000 {
            assert_eq!(batches.len(), 1);
        }
    }
}

#[test]
fn batch_padding_layout() {
    let mut examples = random_examples(2, 2);
    examples[0].target = vec![1, 5, 6, 2];
    examples[1].target = vec![1, 7, 2];
    let b = Batch::new(vec![0, 1], &examples).unwrap();
    assert_eq!(b.inputs, vec![vec![1, 5, 6], vec![1, 7, PAD]]);
    assert_eq!(b.targets, vec![vec![5, 6, 2], vec![7, 2, PAD]]);
    assert_eq!(b.target_tokens(), 5);
    examples[1].target = vec![1];
    assert!(Batch::new(vec![1], &examples).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batching_is_a_partition(seed in any::<u64>(), n in 1usize..30, cap in 1usize..60) {
        let examples = random_examples(seed, n);
        let batches = make_batches(&examples, cap, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

fn tiny_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_tokens: 40,
        warmup_steps: 10,
        max_steps: steps,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn dropout_config() -> graphmt::model::ModelConfig {
    let mut c = small_config(1, AttendMode::Both);
    c.encoder.dropout = 0.2;
    c.decoder.dropout = 0.2;
    c
}

#[test]
fn training_replays_bit_for_bit() {
    let examples = random_examples(11, 12);
    let run = || {
        let mut model = Model::new(dropout_config(), 5).unwrap();
        let mut opt = OptimizerState::new(&model.store);
        let log = train(&mut model, &mut opt, &examples, &tiny_train_config(15), |_, _, _| Ok(())).unwrap();
        (log, model.store.clone_data(), opt)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    let rows_a: Vec<String> = a.0.iter().map(StepLog::csv_row).collect();
    let rows_b: Vec<String> = b.0.iter().map(StepLog::csv_row).collect();
    assert_eq!(rows_a, rows_b);
}

#[test]
fn logged_rates_follow_the_schedule() {
    let examples = random_examples(12, 6);
    let mut model = Model::new(small_config(1, AttendMode::Textual), 1).unwrap();
    let mut opt = OptimizerState::new(&model.store);
    let mut cfg = tiny_train_config(25);
    cfg.lr_factor = 2.0;
    let log = train(&mut model, &mut opt, &examples, &cfg, |_, _, _| Ok(())).unwrap();
    assert_eq!(log.len(), 25);
    for (k, entry) in log.iter().enumerate() {
        assert_eq!(entry.step, k as u64 + 1);
        assert_eq!(entry.lr, 2.0 * lr_schedule(entry.step, 8, 10));
        assert!(entry.loss.is_finite());
    }
}

#[test]
fn frozen_model_loss_is_repeatable() {
    let examples = random_examples(13, 10);
    let model = Model::new(dropout_config(), 2).unwrap();
    let a = evaluate_loss(&model, &examples, 30).unwrap();
    let b = evaluate_loss(&model, &examples, 30).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_loss(&model, &[], 30).is_err());
}

#[test]
fn training_lowers_the_loss() {
    let examples = random_examples(14, 4);
    let mut model = Model::new(small_config(1, AttendMode::Textual), 3).unwrap();
    let before = evaluate_loss(&model, &examples, 100).unwrap();
    let mut opt = OptimizerState::new(&model.store);
    let mut cfg = tiny_train_config(60);
    cfg.batch_tokens = 100;
    train(&mut model, &mut opt, &examples, &cfg, |_, _, _| Ok(())).unwrap();
    let after = evaluate_loss(&model, &examples, 100).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn step_callback_errors_stop_training() {
    let examples = random_examples(15, 3);
    let mut model = Model::new(small_config(1, AttendMode::Textual), 3).unwrap();
    let mut opt = OptimizerState::new(&model.store);
    let err = train(&mut model, &mut opt, &examples, &tiny_train_config(10), |s, _, _| {
        if s.step == 2 {
            Err(graphmt::Error::Usage("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    assert_eq!(opt.step, 2);
}

#[test]
fn invalid_train_config_is_rejected() {
    let examples = random_examples(16, 2);
    let mut model = Model::new(small_config(1, AttendMode::Textual), 3).unwrap();
    let mut opt = OptimizerState::new(&model.store);
    for cfg in [
        TrainConfig { warmup_steps: 0, ..tiny_train_config(1) },
        TrainConfig { batch_tokens: 0, ..tiny_train_config(1) },
        TrainConfig { lr_factor: -1.0, ..tiny_train_config(1) },
        TrainConfig { clip_norm: Some(0.0), ..tiny_train_config(1) },
    ] {
        let r = train(&mut model, &mut opt, &examples, &cfg, |_, _, _| Ok(()));
        assert!(matches!(r, Err(graphmt::Error::Config(_))));
    }
}
