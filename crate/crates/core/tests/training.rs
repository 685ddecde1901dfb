//! End-to-end training behavior on synthetic data.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rls_core::attack::accuracy;
use rls_core::data::synthetic_blobs;
use rls_core::train::{
    draw_step_masks, objective_gradients, objective_value, rls_training_step, sgd_update, train,
    OptimizerState, TrainConfig, TrainRngs,
};
use rls_core::{Architecture, Dataset, SubModelBank};

fn rngs(seed: u64) -> TrainRngs {
    TrainRngs {
        shuffle: ChaCha8Rng::seed_from_u64(seed),
        mask: ChaCha8Rng::seed_from_u64(seed + 1),
        eval: ChaCha8Rng::seed_from_u64(seed + 2),
    }
}

fn defended_accuracy(bank: &SubModelBank, data: &Dataset) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    accuracy(|x| Ok(bank.predict_defended(x, &mut r, 1)?.classes), data, 64).unwrap()
}

#[test]
fn two_layer_mlp_separates_blobs() {
    let start = Instant::now();
    let train_set = synthetic_blobs(1, 200, 2, 2, 0.1).unwrap();
    let test_set = synthetic_blobs(2, 200, 2, 2, 0.1).unwrap();
    let arch = Architecture::mlp(vec![1, 1, 2], &[16], 2);
    let mut bank = SubModelBank::build(arch, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::plain()
    };
    train(&mut bank, &train_set, &test_set, &cfg, &mut rngs(3)).unwrap();
    let acc = defended_accuracy(&bank, &test_set);
    assert!(acc >= 0.99, "accuracy {acc}");
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn zero_spread_is_learned_perfectly() {
    let data = synthetic_blobs(4, 20, 4, 6, 0.0).unwrap();
    let arch = Architecture::mlp(vec![1, 1, 6], &[16], 4);
    let mut bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    train(&mut bank, &data, &data, &cfg, &mut rngs(6)).unwrap();
    assert_eq!(defended_accuracy(&bank, &data), 1.0);
}

#[test]
fn history_is_bit_identical_for_a_fixed_seed() {
    let data = synthetic_blobs(7, 30, 5, 8, 0.4).unwrap();
    let run = || {
        let arch = Architecture::mlp(vec![1, 1, 8], &[12, 12], 5);
        let mut bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut bank, &data, &data, &cfg, &mut rngs(9)).unwrap();
        (history, bank)
    };
    let (h1, b1) = run();
    let (h2, b2) = run();
    assert_eq!(b1, b2);
    assert_eq!(h1.len(), 3);
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
        assert_eq!(a.logdet_term.to_bits(), b.logdet_term.to_bits());
        assert_eq!(a.val_acc, b.val_acc);
    }
}

#[test]
fn training_lowers_the_objective() {
    let data = synthetic_blobs(10, 60, 10, 16, 0.3).unwrap();
    let arch = Architecture::mlp(vec![1, 1, 16], &[32, 32], 10);
    let mut bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (x, y) = data.range(0, data.len()).unwrap();
    let masks = draw_step_masks(&bank, &cfg, y.len(), &mut ChaCha8Rng::seed_from_u64(12));
    let before = objective_value(&bank, &masks, &x, &y, &cfg).unwrap();
    train(&mut bank, &data, &data, &cfg, &mut rngs(13)).unwrap();
    let after = objective_value(&bank, &masks, &x, &y, &cfg).unwrap();
    assert!(after.total < before.total, "{after:?} vs {before:?}");
    assert!(after.ce < before.ce);
}

#[test]
fn degenerate_config_is_plain_sgd_on_one_sampled_model() {
    let data = synthetic_blobs(14, 4, 3, 4, 0.3).unwrap();
    let (x, y) = data.range(0, data.len()).unwrap();
    let arch = Architecture::mlp(vec![1, 1, 4], &[6], 3);
    let bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let cfg = TrainConfig::plain();

    let mut stepped = bank.clone();
    let mut state = OptimizerState::new(&stepped);
    rls_training_step(
        &mut stepped,
        &x,
        &y,
        &cfg,
        0.01,
        &mut ChaCha8Rng::seed_from_u64(16),
        &mut state,
    )
    .unwrap();

    let mask = bank.sample_mask(&mut ChaCha8Rng::seed_from_u64(16));
    let grad_x = objective_gradients(&bank, &vec![vec![mask]], &x, &y, &cfg)
        .unwrap()
        .1;
    let mut manual = bank.clone();
    for (p, g) in manual.params_mut().into_iter().zip(&grad_x) {
        let mut v = rls_core::Tensor::zeros(p.shape());
        sgd_update(p, g, &mut v, 0.01, cfg.momentum, cfg.weight_decay).unwrap();
    }
    assert_eq!(stepped, manual);
}

#[test]
fn every_parameter_is_updated_each_step() {
    let data = synthetic_blobs(17, 4, 4, 4, 0.3).unwrap();
    let (x, y) = data.range(0, data.len()).unwrap();
    let arch = Architecture::mlp(vec![1, 1, 4], &[6], 4);
    let mut bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let before = bank.clone();
    let mut state = OptimizerState::new(&bank);
    let cfg = TrainConfig::default();
    rls_training_step(
        &mut bank,
        &x,
        &y,
        &cfg,
        0.01,
        &mut ChaCha8Rng::seed_from_u64(19),
        &mut state,
    )
    .unwrap();
    // Weight decay touches every non-zero tensor even when not selected.
    for (a, b) in bank.params().iter().zip(before.params()) {
        if b.data().iter().any(|&v| v != 0.0) {
            assert_ne!(*a, b);
        }
    }
    let count: usize = bank.params().iter().map(|t| t.len()).sum();
    assert_eq!(count, bank.total_param_count());
}
