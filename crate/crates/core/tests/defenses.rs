mod common;

use common::*;
use ecg_robust::attacks::{pgd_attack, AttackConfig};
use ecg_robust::autograd::{Graph, Tensor, Var};
use ecg_robust::data::{fixed_batch, split_and_balance, synth_dataset};
use ecg_robust::defenses::*;
use ecg_robust::model::{Classifier, EcgNet, EcgNetConfig, MaskedBatch};
use ecg_robust::Error;

fn cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 4,
        warmup_epochs: 1,
        lambda: 3.0,
        beta: 0.7,
        ..Default::default()
    }
}

#[test]
fn cross_entropy_gradient() {
    let f = |net: &EcgNet, p: &[Var], b: &MaskedBatch| {
        let logits = net
            .forward_with(&p[0].graph().constant(b.signals.clone()), &b.mask, p)
            .unwrap();
        loss_ce(&logits, &b.labels).unwrap()
    };
    for seed in 0..20 {
        let e = spot_check(seed, &f, 12);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn adversarial_gradient_with_frozen_attack() {
    for seed in 0..20 {
        let net = tiny_ecgnet(seed);
        let batch = random_batch(seed + 1000, 3, 2, 16, 3);
        let x_adv = pgd_attack(&net, &batch, &AttackConfig::pgd(0.05, 3)).unwrap();
        let f = move |net: &EcgNet, p: &[Var], b: &MaskedBatch| {
            let g = p[0].graph();
            let clean = net
                .forward_with(&g.constant(b.signals.clone()), &b.mask, p)
                .unwrap();
            let ce = loss_ce(&clean, &b.labels).unwrap();
            adv_combine(net, p, b, &ce, x_adv.clone()).unwrap()
        };
        let e = spot_check(seed, &f, 12);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn jacobian_loss_gradient() {
    let c = cfg(Method::Jacob);
    let f = |net: &EcgNet, p: &[Var], b: &MaskedBatch| loss_jacobian(net, p, b, &c, 3).unwrap();
    for seed in 0..20 {
        let e = spot_check(seed, &f, 12);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn nsr_loss_gradient() {
    let c = cfg(Method::Nsr);
    let f = |net: &EcgNet, p: &[Var], b: &MaskedBatch| nsr_objective(net, p, b, &c, 3).unwrap();
    for seed in 0..20 {
        let e = spot_check(seed, &f, 12);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

/// Frobenius norm of the input Jacobian by central differences of the logits.
fn fd_jacobian_norm(net: &dyn Classifier, batch: &MaskedBatch) -> f64 {
    let x = batch.signals.to_vec();
    let mut total = 0.0;
    for i in 0..x.len() {
        let at = |h: f64| {
            let mut d = x.clone();
            d[i] += h;
            net.logits(
                &batch
                    .with_signals(Tensor::new(batch.signals.shape(), d).unwrap())
                    .unwrap(),
            )
            .unwrap()
            .to_vec()
        };
        let (p, m) = (at(FD_STEP), at(-FD_STEP));
        total += p
            .iter()
            .zip(&m)
            .map(|(a, b)| ((a - b) / (2.0 * FD_STEP)).powi(2))
            .sum::<f64>();
    }
    total.sqrt()
}

#[test]
fn jacobian_penalty_matches_finite_differences() {
    for seed in 0..5 {
        let net = tiny_ecgnet(seed);
        let batch = random_batch(seed + 50, 2, 2, 16, 3);
        let g = Graph::new();
        let x = g.leaf(batch.signals.clone());
        let z = net.forward(&x, &batch.mask).unwrap();
        let pen = jacobian_penalty(&z, &x).unwrap().item().unwrap();
        let expect = fd_jacobian_norm(&net, &batch) / (2.0 * 3.0);
        assert!(((pen - expect) / expect).abs() < 1e-3, "{pen} vs {expect}");
    }
}

#[test]
fn warmup_losses_reduce_to_cross_entropy() {
    let net = tiny_ecgnet(3);
    let batch = random_batch(4, 3, 2, 16, 3);
    let g = Graph::new();
    let p = net.bind(&g, false);
    let ce = {
        let z = net
            .forward_with(&g.constant(batch.signals.clone()), &batch.mask, &p)
            .unwrap();
        loss_ce(&z, &batch.labels).unwrap().item().unwrap()
    };
    let c = TrainConfig {
        epochs: 10,
        warmup_epochs: 5,
        ..cfg(Method::Adv)
    };
    for t in 1..=5 {
        assert_eq!(
            loss_adv(&net, &p, &batch, &c, t).unwrap().item().unwrap(),
            ce
        );
        assert_eq!(
            loss_jacobian(&net, &p, &batch, &c, t)
                .unwrap()
                .item()
                .unwrap(),
            ce
        );
    }
    let no_lambda = TrainConfig {
        lambda: 0.0,
        ..c.clone()
    };
    assert_eq!(
        loss_jacobian(&net, &p, &batch, &no_lambda, 8)
            .unwrap()
            .item()
            .unwrap(),
        ce
    );
}

#[test]
fn adversarial_loss_on_linear_model_matches_closed_form() {
    use ecg_robust::model::LinearClassifier;
    // z = W x with W rows ±1; 20-step PGD with alpha*K >= eps reaches
    // x + eps sign(dCE/dx) exactly.
    let d = 6;
    let w = Tensor::new(
        &[2, d],
        (0..2 * d).map(|i| if i < d { 1.0 } else { -1.0 }).collect(),
    )
    .unwrap();
    let net = LinearClassifier::new(w, Tensor::zeros(&[2])).unwrap();
    let x = Tensor::new(&[1, 1, d], vec![0.1; d]).unwrap();
    let batch = MaskedBatch::new(x, Tensor::ones(&[1, d]), vec![0]).unwrap();
    let c = TrainConfig {
        method: Method::Adv,
        epochs: 20,
        warmup_epochs: 10,
        epsilon: 0.05,
        ..Default::default()
    };
    let g = Graph::new();
    let p = net.bind(&g, false);
    let eps_t = ramp_epsilon(15, 20, 10, 0.05).unwrap();
    let loss = loss_adv(&net, &p, &batch, &c, 15).unwrap().item().unwrap();
    let ce = |m: f64| (1.0 + (-2.0 * m).exp()).ln();
    let clean_margin = d as f64 * 0.1;
    let adv_margin = d as f64 * (0.1 - eps_t);
    let expect = 0.5 * ce(clean_margin) + 0.5 * ce(adv_margin);
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn nsr_worked_examples() {
    let g = Graph::new();
    let mut z = vec![0.0; 9];
    z[0] = 2.0;
    let logits = g.constant(Tensor::new(&[1, 9], z).unwrap());
    let terms = NsrTerms {
        logits: logits.clone(),
        w_norm: g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap()),
        z_abs: g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap()),
        r2: g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap()),
        correct: vec![true],
    };
    let v = loss_nsr(&logits, Some(&terms), &[0], 1.0, true)
        .unwrap()
        .item()
        .unwrap();
    assert!((v - (1.0 + 2f64.ln())).abs() < 1e-12);
    let v0 = loss_nsr(&logits, None, &[0], 0.0, false)
        .unwrap()
        .item()
        .unwrap();
    assert_eq!(v0, 1.0);
}

fn desk_split(n_per_class: usize) -> (Vec<ecg_robust::data::PreparedRecord>, MaskedBatch) {
    let recs = synth_dataset(n_per_class, 256, 3, 11).unwrap();
    let split = split_and_balance(recs, 3, 12).unwrap();
    let val = fixed_batch(&split.val, 256, 13).unwrap();
    let train = split.balanced_train().into_iter().cloned().collect();
    (train, val)
}

fn small_net() -> EcgNet {
    EcgNet::new(
        EcgNetConfig {
            input_length: 256,
            ..EcgNetConfig::desk(3)
        },
        21,
    )
    .unwrap()
}

#[test]
fn history_is_reproducible_and_warmup_matches_ce() {
    let (records, val) = desk_split(60);
    let refs: Vec<_> = records.iter().collect();
    let base = TrainConfig {
        epochs: 3,
        warmup_epochs: 2,
        batch_size: 8,
        adv_steps: 2,
        seed: 5,
        ..Default::default()
    };
    let run = |m: Method| {
        train(
            small_net(),
            &refs,
            &val,
            256,
            &TrainConfig {
                method: m,
                ..base.clone()
            },
        )
        .unwrap()
    };
    let ce = run(Method::Ce);
    let again = run(Method::Ce);
    assert_eq!(history_csv(&ce.history), history_csv(&again.history));
    assert_eq!(ce.last.checksum(), again.last.checksum());
    for m in [Method::Adv, Method::Jacob] {
        let h = run(m).history;
        assert_eq!(h[..2], ce.history[..2], "{m}");
        assert_ne!(h[2].loss, ce.history[2].loss, "{m}");
    }
}

#[test]
fn ce_training_fits_synthetic_data() {
    let (records, val) = desk_split(80);
    let refs: Vec<_> = records.iter().collect();
    let cfg = TrainConfig {
        epochs: 12,
        warmup_epochs: 2,
        batch_size: 16,
        seed: 1,
        optimizer: AdamConfig {
            learning_rate: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(small_net(), &refs, &val, 256, &cfg).unwrap();
    let all = ecg_robust::data::fixed_batch(&records, 256, 99).unwrap();
    let preds = out.last.predict(&all).unwrap();
    let acc = ecg_robust::eval::accuracy(&preds, &all.labels).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert!(out.best_epoch >= 1 && out.best_epoch <= 12);
}

#[test]
fn non_finite_loss_aborts_with_position() {
    let (records, val) = desk_split(56);
    let refs: Vec<_> = records.iter().collect();
    let mut net = small_net();
    let mut w = net.params()[0].value.to_vec();
    w[0] = f64::NAN;
    net.params_mut()[0].value = Tensor::new(net.params()[0].value.shape(), w).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        ..Default::default()
    };
    match train(net, &refs, &val, 256, &cfg) {
        Err(Error::NonFinite { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 1)),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should abort"),
    }
}
