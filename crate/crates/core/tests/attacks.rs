//! Attack kernels, gradient sources and robust-accuracy evaluation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rls_core::attack::{
    accuracy, eot_gradient, evaluate_robust_accuracy, exhaustive_mask_gradient, fgsm, pgd, run_attack,
    AttackConfig, AttackKind, EotGrad, FixedMaskGrad,
};
use rls_core::data::synthetic_blobs;
use rls_core::{Architecture, Result, SubModelBank, Tape, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn small_bank(m: usize, seed: u64) -> SubModelBank {
    let arch = Architecture::mlp(vec![1, 1, 4], &[6, 5], 3);
    SubModelBank::build(arch, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn fgsm_reference_examples() {
    let x = Tensor::from_vec(vec![0.0, 0.0]);
    let mut g = |_: &Tensor, _: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(vec![0.5, -0.3])) };
    assert_eq!(
        fgsm(&mut g, &x, &[0], 0.1, -1.0, 1.0).unwrap().data(),
        &[0.1, -0.1]
    );
    assert_eq!(fgsm(&mut g, &x, &[0], 0.0, -1.0, 1.0).unwrap(), x);
    let x = Tensor::from_vec(vec![0.95, 0.0]);
    assert_eq!(fgsm(&mut g, &x, &[0], 0.1, -1.0, 1.0).unwrap().data()[0], 1.0);
}

/// Ascent on `(x − c)ᵀA(x − c)`, a convex quadratic whose maximum over the
/// box lies at a corner.
#[test]
fn pgd_reaches_grid_search_maximum_of_quadratic() {
    let a = [[1.0, 0.3], [0.3, 2.0]];
    let x0 = [0.2, -0.1];
    let c = [0.25, -0.05];
    let eps = 0.3;
    let loss = |p: [f64; 2]| {
        let d = [p[0] - c[0], p[1] - c[1]];
        d[0] * (a[0][0] * d[0] + a[0][1] * d[1]) + d[1] * (a[1][0] * d[0] + a[1][1] * d[1])
    };

    let steps = 400;
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for i in 0..=steps {
        for j in 0..=steps {
            let p = [
                x0[0] - eps + 2.0 * eps * i as f64 / steps as f64,
                x0[1] - eps + 2.0 * eps * j as f64 / steps as f64,
            ];
            let v = loss(p);
            if v > best.0 {
                best = (v, p);
            }
        }
    }

    let mut grad = |x: &Tensor, _: &[usize]| -> Result<Tensor> {
        let d = [x.data()[0] - c[0], x.data()[1] - c[1]];
        Ok(Tensor::from_vec(vec![
            2.0 * (a[0][0] * d[0] + a[0][1] * d[1]),
            2.0 * (a[1][0] * d[0] + a[1][1] * d[1]),
        ]))
    };
    let mut cfg = AttackConfig::pgd(eps, eps / 4.0, 10);
    cfg.random_start = false;
    let x = Tensor::from_vec(x0.to_vec());
    let adv = pgd(&mut grad, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(
        (adv.data()[0] - best.1[0]).abs() < 1e-12,
        "{:?} vs {:?}",
        adv,
        best.1
    );
    assert!(
        (adv.data()[1] - best.1[1]).abs() < 1e-12,
        "{:?} vs {:?}",
        adv,
        best.1
    );
}

#[test]
fn pgd_single_step_equals_fgsm_on_a_network() {
    let bank = small_bank(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[8, 1, 1, 4]);
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    for eps in [0.0, 0.05, 0.3, 0.6] {
        let mut g = FixedMaskGrad {
            bank: &bank,
            mask: bank.constant_mask(0).unwrap(),
        };
        let a = fgsm(&mut g, &x, &y, eps, -1.0, 1.0).unwrap();
        let mut cfg = AttackConfig::pgd(eps, eps.max(1e-9), 1);
        cfg.step_size = eps;
        cfg.random_start = false;
        let b = pgd(&mut g, &x, &y, &cfg, &mut rng).unwrap();
        assert_eq!(a, b, "eps {eps}");
    }
}

/// Gradient of the uniform mixture of per-mask losses, built on one tape.
fn mixture_gradient(bank: &SubModelBank, x: &Tensor, y: &[usize]) -> Tensor {
    let masks = bank.all_masks().unwrap();
    let mut tape = Tape::new();
    let vars = bank.bind(&mut tape, false);
    let xv = tape.param(x.clone());
    let mut total = None;
    for m in &masks {
        let logits = bank.forward_bound(&mut tape, &vars, m, xv).unwrap();
        let ce = tape.cross_entropy(logits, y).unwrap();
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce).unwrap(),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / masks.len() as f64);
    tape.backward(mean).unwrap().take(xv)
}

#[test]
fn exhaustive_eot_equals_mixture_gradient() {
    let bank = small_bank(2, 3);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(4), &[5, 1, 1, 4]);
    let y = vec![0, 1, 2, 0, 1];
    let eot = exhaustive_mask_gradient(&bank, &x, &y).unwrap();
    let mix = mixture_gradient(&bank, &x, &y);
    assert!(eot.max_abs_diff(&mix) < 1e-10);
}

#[test]
fn sampled_eot_converges_to_exhaustive() {
    let bank = small_bank(2, 5);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(6), &[2, 1, 1, 4]);
    let y = vec![0, 2];
    let exact = exhaustive_mask_gradient(&bank, &x, &y).unwrap();
    let sampled = eot_gradient(&bank, &x, &y, 4000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let scale = exact.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(sampled.max_abs_diff(&exact) < 0.1 * scale);
}

#[test]
fn eot_with_one_sub_model_is_the_plain_gradient() {
    let bank = small_bank(1, 8);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(9), &[3, 1, 1, 4]);
    let y = vec![0, 1, 2];
    let plain = bank
        .input_gradient(&bank.constant_mask(0).unwrap(), &x, &y)
        .unwrap();
    for n in [1, 3, 10] {
        let g = eot_gradient(&bank, &x, &y, n, &mut ChaCha8Rng::seed_from_u64(n as u64)).unwrap();
        assert_eq!(g, plain);
    }
}

#[test]
fn eot_is_reproducible_and_rejects_zero_samples() {
    let bank = small_bank(2, 10);
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(11), &[3, 1, 1, 4]);
    let y = vec![0, 1, 2];
    let a = eot_gradient(&bank, &x, &y, 5, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let b = eot_gradient(&bank, &x, &y, 5, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    assert_eq!(a, b);
    assert!(eot_gradient(&bank, &x, &y, 0, &mut ChaCha8Rng::seed_from_u64(12)).is_err());
}

#[test]
fn zero_budget_matches_clean_accuracy() {
    let data = synthetic_blobs(0, 20, 3, 4, 0.3).unwrap();
    let bank = small_bank(2, 13);
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let clean = accuracy(|x| Ok(bank.predict_defended(x, &mut r, 1)?.classes), &data, 16).unwrap();
    for kind in [AttackKind::Fgsm, AttackKind::Pgd] {
        let cfg = match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(0.0),
            AttackKind::Pgd => AttackConfig::pgd(0.0, 0.01, 3),
        };
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let mut eot = EotGrad {
            bank: &bank,
            n_samples: 2,
            rng: ChaCha8Rng::seed_from_u64(15),
        };
        let robust = evaluate_robust_accuracy(
            &mut eot,
            |x| Ok(bank.predict_defended(x, &mut r, 1)?.classes),
            &data,
            &cfg,
            16,
            &mut ChaCha8Rng::seed_from_u64(16),
        )
        .unwrap();
        assert_eq!(robust, clean);
    }
}

#[test]
fn robust_accuracy_is_deterministic_and_bounded() {
    let data = synthetic_blobs(1, 10, 3, 4, 0.3).unwrap();
    let bank = small_bank(2, 17);
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(18);
        let mut eot = EotGrad {
            bank: &bank,
            n_samples: 3,
            rng: ChaCha8Rng::seed_from_u64(19),
        };
        evaluate_robust_accuracy(
            &mut eot,
            |x| Ok(bank.predict_defended(x, &mut r, 1)?.classes),
            &data,
            &AttackConfig::pgd(0.2, 0.05, 4),
            7,
            &mut ChaCha8Rng::seed_from_u64(20),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_bits(), b.to_bits());
    assert!((0.0..=1.0).contains(&a));
}

fn arb_config() -> impl Strategy<Value = AttackConfig> {
    (
        prop_oneof![Just(AttackKind::Fgsm), Just(AttackKind::Pgd)],
        0.0f64..1.5,
        0.001f64..0.5,
        1usize..6,
        any::<bool>(),
    )
        .prop_map(|(kind, epsilon, step_size, n_steps, random_start)| AttackConfig {
            kind,
            epsilon,
            step_size,
            n_steps,
            random_start,
            n_mask_samples: 1,
            clip_min: -1.0,
            clip_max: 1.0,
        })
}

proptest! {
    #[test]
    fn attack_outputs_stay_in_ball_and_range(
        cfg in arb_config(),
        x in prop::collection::vec(-1.0f64..=1.0, 1..12),
        seed in any::<u64>(),
    ) {
        let n = x.len();
        let x = Tensor::from_vec(x);
        let mut grng = ChaCha8Rng::seed_from_u64(seed);
        let mut grad = move |_: &Tensor, _: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(
                (0..n).map(|_| [-2.0, -1e-9, 0.0, 1e-9, 3.0][grng.random_range(0..5)]).collect(),
            ))
        };
        let adv = run_attack(&mut grad, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= cfg.epsilon + 1e-12);
            prop_assert!((-1.0..=1.0).contains(a));
        }
    }

    #[test]
    fn one_step_pgd_is_fgsm_bit_exactly(
        eps in 0.0f64..1.5,
        x in prop::collection::vec(-1.0f64..=1.0, 1..12),
        g in prop::collection::vec(-1.0f64..=1.0, 12),
    ) {
        let n = x.len();
        let x = Tensor::from_vec(x);
        let g: Vec<f64> = g[..n].iter().map(|v| if v.abs() < 0.2 { 0.0 } else { *v }).collect();
        let mut grad = |_: &Tensor, _: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(g.clone())) };
        let a = fgsm(&mut grad, &x, &[0], eps, -1.0, 1.0).unwrap();
        let mut cfg = AttackConfig::pgd(eps, 1.0, 1);
        cfg.step_size = eps;
        cfg.random_start = false;
        let b = pgd(&mut grad, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
