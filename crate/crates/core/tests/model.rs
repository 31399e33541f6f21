mod common;

use common::*;
use ecg_robust::autograd::{Graph, Tensor};
use ecg_robust::model::{Classifier, EcgNet, EcgNetConfig, MaskedBatch};
use rand::Rng;

/// One record of `valid` samples placed at `offset` in a window of `len`.
fn placed(record: &Tensor, offset: usize, len: usize) -> (Tensor, Tensor) {
    let (c, valid) = (record.shape()[0], record.shape()[1]);
    let mut sig = vec![0.0; c * len];
    for ch in 0..c {
        sig[ch * len + offset..][..valid].copy_from_slice(&record.data()[ch * valid..][..valid]);
    }
    let mut mask = vec![0.0; len];
    mask[offset..offset + valid].fill(1.0);
    (
        Tensor::new(&[1, c, len], sig).unwrap(),
        Tensor::new(&[1, len], mask).unwrap(),
    )
}

fn logits_at(net: &EcgNet, record: &Tensor, offset: usize, len: usize) -> Vec<f64> {
    let (x, m) = placed(record, offset, len);
    net.logits(&MaskedBatch::new(x, m, vec![0]).unwrap())
        .unwrap()
        .to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn aligned_replacement_keeps_logits_desk() {
    let cfg = EcgNetConfig::desk(3);
    for seed in 0..4 {
        let net = EcgNet::new(cfg.clone(), seed).unwrap();
        let mut r = rng(seed + 50);
        let valid = r.gen_range(300..1500);
        let record = random_tensor(&mut r, &[8, valid], -1.0, 1.0);
        let base = logits_at(&net, &record, 0, cfg.input_length);
        let slots = (cfg.input_length - valid) / cfg.total_downsample;
        for k in [1, slots / 2, slots] {
            let other = logits_at(&net, &record, k * cfg.total_downsample, cfg.input_length);
            let d = max_diff(&base, &other);
            assert!(d < 1e-6, "seed {seed} slot {k}: {d:e}");
        }
    }
}

#[test]
fn aligned_replacement_keeps_logits_full_size() {
    let cfg = EcgNetConfig::default();
    let net = EcgNet::new(cfg.clone(), 9).unwrap();
    let mut r = rng(77);
    let record = random_tensor(&mut r, &[8, 5000], -1.0, 1.0);
    let a = logits_at(&net, &record, 0, cfg.input_length);
    let b = logits_at(&net, &record, 20 * cfg.total_downsample, cfg.input_length);
    assert_eq!(a.len(), 9);
    assert!(max_diff(&a, &b) < 1e-6, "{:e}", max_diff(&a, &b));
}

#[test]
fn extra_zero_padding_keeps_logits() {
    let cfg = EcgNetConfig::desk(4);
    let net = EcgNet::new(cfg.clone(), 3).unwrap();
    let mut r = rng(3);
    let record = random_tensor(&mut r, &[8, 1800], -1.0, 1.0);
    let a = logits_at(&net, &record, 128, cfg.input_length);
    for extra in [1, 5] {
        let b = logits_at(
            &net,
            &record,
            128,
            cfg.input_length + extra * cfg.total_downsample,
        );
        assert!(
            max_diff(&a, &b) < 1e-9,
            "extra {extra}: {:e}",
            max_diff(&a, &b)
        );
    }
}

#[test]
fn unaligned_replacement_stays_close() {
    let cfg = EcgNetConfig::desk(3);
    let net = EcgNet::new(cfg.clone(), 21).unwrap();
    // Sub-grid shifts change the stride phase, so use a band-limited record.
    let record = Tensor::new(
        &[8, 1500],
        (0..8 * 1500)
            .map(|i| {
                let (ch, t) = ((i / 1500) as f64, (i % 1500) as f64);
                (t / (40.0 + 5.0 * ch)).sin() * 0.8 + (t / 97.0 + ch).cos() * 0.2
            })
            .collect(),
    )
    .unwrap();
    let base = logits_at(&net, &record, 0, cfg.input_length);
    for offset in [1, 17, 33, 250, 548] {
        let other = logits_at(&net, &record, offset, cfg.input_length);
        assert!(
            max_diff(&base, &other) < 0.05,
            "offset {offset}: {:e}",
            max_diff(&base, &other)
        );
    }
}

#[test]
fn batch_rows_are_independent() {
    let cfg = EcgNetConfig::desk(3);
    let net = EcgNet::new(cfg.clone(), 4).unwrap();
    let mut r = rng(4);
    let rec_a = random_tensor(&mut r, &[8, 900], -1.0, 1.0);
    let rec_b = random_tensor(&mut r, &[8, 2048], -1.0, 1.0);
    let (xa, ma) = placed(&rec_a, 64, 2048);
    let (xb, mb) = placed(&rec_b, 0, 2048);
    let both = MaskedBatch::new(
        Tensor::stack(&[
            xa.reshape(&[8, 2048]).unwrap(),
            xb.reshape(&[8, 2048]).unwrap(),
        ])
        .unwrap(),
        Tensor::stack(&[ma.reshape(&[2048]).unwrap(), mb.reshape(&[2048]).unwrap()]).unwrap(),
        vec![0, 1],
    )
    .unwrap();
    let z = net.logits(&both).unwrap().to_vec();
    let za = logits_at(&net, &rec_a, 64, 2048);
    let zb = logits_at(&net, &rec_b, 0, 2048);
    assert!(max_diff(&z[..3], &za) < 1e-12);
    assert!(max_diff(&z[3..], &zb) < 1e-12);
}

#[test]
fn input_and_parameter_gradients_match_finite_differences() {
    let cfg = EcgNetConfig {
        in_channels: 2,
        input_length: 64,
        num_classes: 3,
        stem_channels: 4,
        num_blocks: 1,
        total_downsample: 16,
        kernel_size: 5,
        gn_groups: 2,
        ..EcgNetConfig::default()
    };
    let net = EcgNet::new(cfg.clone(), 5).unwrap();
    let mut r = rng(5);
    let record = random_tensor(&mut r, &[2, 50], -1.0, 1.0);
    let (x, m) = placed(&record, 3, 64);
    let weights = random_tensor(&mut r, &[1, 3], -1.0, 1.0);
    let objective = |x: &Tensor, params: &[Tensor]| -> f64 {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let pv: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
        let z = net.forward_with(&xv, &m, &pv).unwrap();
        z.mul(&g.constant(weights.clone()))
            .unwrap()
            .sum()
            .item()
            .unwrap()
    };
    let params: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let pv = net.bind(&g, true);
    let z = net.forward_with(&xv, &m, &pv).unwrap();
    let root = z.mul(&g.constant(weights.clone())).unwrap().sum();
    let grads = g.backward(&root, false).unwrap();

    let gx = grads.tensor(&xv);
    let fx = fd_grad(
        &|a: &[Tensor]| objective(&a[0], &params),
        &[x.clone()],
        0,
        FD_STEP,
    );
    let err = rel_err(gx.data(), &fx);
    assert!(err < 1e-4, "input gradient: {err:e}");

    for (i, p) in pv.iter().enumerate() {
        let ad = grads.tensor(p);
        let fd = fd_grad(
            &|a: &[Tensor]| {
                let mut ps = params.clone();
                ps[i] = a[0].clone();
                objective(&x, &ps)
            },
            &[params[i].clone()],
            0,
            FD_STEP,
        );
        let err = rel_err(ad.data(), &fd);
        assert!(err < 1e-4, "{}: {err:e}", net.params()[i].name);
    }
}
