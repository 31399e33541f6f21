mod common;

use common::*;
use ecg_robust::attacks::*;
use ecg_robust::autograd::{Graph, Tensor};
use ecg_robust::defenses::{loss_ce, nsr_bound};
use ecg_robust::model::{Classifier, LinearClassifier, MaskedBatch};
use proptest::prelude::*;
use rand::Rng;

fn input_grad<C: Classifier>(net: &C, batch: &MaskedBatch) -> Tensor {
    let g = Graph::new();
    let x = g.leaf(batch.signals.clone());
    let loss = loss_ce(&net.forward(&x, &batch.mask).unwrap(), &batch.labels).unwrap();
    g.grad(&loss, &[x], false).unwrap()[0]
        .as_ref()
        .unwrap()
        .value()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[test]
fn fgsm_is_one_step_pgd() {
    for seed in 0..5 {
        let net = tiny_ecgnet(seed);
        let batch = random_batch(seed + 7, 3, 2, 16, 3);
        let eps = 0.03;
        let cfg = AttackConfig {
            alpha: Some(eps),
            ..AttackConfig::pgd(eps, 1)
        };
        let adv = pgd_attack(&net, &batch, &cfg).unwrap();
        let grad = input_grad(&net, &batch);
        let m = batch.channel_mask();
        let expect: Vec<f64> = (0..grad.numel())
            .map(|i| batch.signals.data()[i] + eps * sign(grad.data()[i]) * m.data()[i])
            .collect();
        assert_eq!(adv.to_vec(), expect);
    }
}

#[test]
fn linear_objective_reaches_the_ball_corner() {
    let mut r = rng(3);
    let d = 10;
    let w = random_tensor(&mut r, &[3, d], -1.0, 1.0);
    let net = LinearClassifier::new(w.clone(), Tensor::zeros(&[3])).unwrap();
    let x = random_tensor(&mut r, &[2, 1, d], -1.0, 1.0);
    let batch = MaskedBatch::new(x.clone(), Tensor::ones(&[2, d]), vec![1, 2]).unwrap();
    let eps = 0.2;
    for (steps, alpha) in [(5, 0.04), (20, 0.05), (3, 0.5)] {
        let cfg = AttackConfig {
            alpha: Some(alpha),
            loss: AttackLoss::NegTrueLogit,
            ..AttackConfig::pgd(eps, steps)
        };
        let adv = pgd_attack(&net, &batch, &cfg).unwrap();
        for n in 0..2 {
            let y = batch.labels[n];
            for i in 0..d {
                let expect = x.data()[n * d + i] + eps * sign(-w.data()[y * d + i]);
                assert_eq!(adv.data()[n * d + i], expect, "steps {steps}");
            }
        }
    }
}

#[test]
fn padding_is_untouched_by_default() {
    let net = tiny_ecgnet(1);
    let batch = random_batch(2, 3, 2, 16, 3);
    let adv = pgd_attack(&net, &batch, &AttackConfig::pgd(0.1, 5)).unwrap();
    let m = batch.channel_mask();
    for i in 0..adv.numel() {
        if m.data()[i] == 0.0 {
            assert_eq!(adv.data()[i], batch.signals.data()[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_iterate_stays_in_the_ball(
        seed in 0u64..1000,
        eps in 0.0f64..0.5,
        steps in 1usize..8,
        random_start: bool,
        perturb_padding: bool,
    ) {
        let net = tiny_ecgnet(seed);
        let batch = random_batch(seed + 1, 2, 2, 16, 3);
        let cfg = AttackConfig { random_start, perturb_padding, seed, ..AttackConfig::pgd(eps, steps) };
        let mut seen = 0;
        pgd_attack_traced(&net, &batch, &cfg, |_, xk| {
            seen += 1;
            let dist = xk.data().iter().zip(batch.signals.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(dist <= eps + 1e-9, "{dist} > {eps}");
        }).unwrap();
        prop_assert_eq!(seen, steps);
    }

    #[test]
    fn white_noise_is_bounded_and_seeded(seed in 0u64..1000, eps in 0.0f64..1.0) {
        let batch = random_batch(seed, 2, 2, 16, 3);
        let a = uniform_noise(&batch, eps, false, seed).unwrap();
        let b = uniform_noise(&batch, eps, false, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let m = batch.channel_mask();
        for i in 0..a.numel() {
            let d = (a.data()[i] - batch.signals.data()[i]).abs();
            prop_assert!(d <= eps);
            if m.data()[i] == 0.0 {
                prop_assert_eq!(d, 0.0);
            }
        }
    }
}

#[test]
fn logit_change_is_exactly_linear_without_activation_flips() {
    let mut checked = 0;
    for seed in 0..40 {
        let net = ReluNet::new(seed, 2, 12, 6, 3);
        let x = random_tensor(&mut rng(seed + 300), &[1, 2, 12], -1.0, 1.0);
        let batch = MaskedBatch::new(x, Tensor::ones(&[1, 12]), vec![seed as usize % 3]).unwrap();
        let (w, zy) = effective_weights(&net, &batch);
        let base = net.pattern(&batch.signals);
        let mut r = rng(seed + 900);
        for _ in 0..25 {
            let eta = random_tensor(&mut r, &[1, 2, 12], -1e-4, 1e-4);
            let moved = batch.signals.zip_map(&eta, |a, b| a + b).unwrap();
            if net.pattern(&moved) != base {
                continue;
            }
            let (_, zy2) = effective_weights(&net, &batch.with_signals(moved).unwrap());
            let linear: f64 = w.iter().zip(eta.data()).map(|(a, b)| a * b).sum();
            assert!((zy2[0] - zy[0] - linear).abs() < 1e-8);
            checked += 1;
        }
    }
    assert!(
        checked >= 900,
        "only {checked} perturbations kept the activation pattern"
    );
}

#[test]
fn holder_bound_has_no_violations() {
    let net = ReluNet::new(17, 2, 12, 8, 3);
    let batch = random_batch(18, 4, 2, 12, 3);
    let g = Graph::new();
    let p = net.bind(&g, false);
    let terms = nsr_bound(&net, &p, &batch, 1.0).unwrap();
    let (w, _) = effective_weights(&net, &batch);
    let d = 2 * 12;
    let mut r = rng(19);
    let mut violations = 0;
    for trial in 0..1000 {
        let n = trial % batch.len();
        let eps = r.gen_range(1e-3..1.0);
        let eta: Vec<f64> = (0..d).map(|_| r.gen_range(-eps..=eps)).collect();
        let wn = &w[n * d..(n + 1) * d];
        let lhs = wn.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>().abs();
        let inf = eta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let l1 = terms.values()[n].0;
        if lhs > l1 * inf {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn nsr_bound_on_a_linear_model() {
    let net = LinearClassifier::new(
        Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(),
        Tensor::zeros(&[1]),
    )
    .unwrap();
    let batch = MaskedBatch::new(
        Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap(),
        Tensor::ones(&[1, 2]),
        vec![0],
    )
    .unwrap();
    let g = Graph::new();
    let p = net.bind(&g, false);
    let v = nsr_bound(&net, &p, &batch, 1.0).unwrap().values();
    assert_eq!(v[0], (3.0, 3.0, 1.0, true));
    let v = nsr_bound(&net, &p, &batch, 2.5).unwrap().values();
    assert_eq!(v[0].2, 2.5);
}
