mod common;

use common::*;
use ecg_robust::attacks::AttackConfig;
use ecg_robust::eval::*;
use ecg_robust::model::Classifier;

#[test]
fn metric_examples() {
    assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 1, 0], &[0, 1, 2]).unwrap(), 2.0 / 3.0);
    let f1 = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    assert!((macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(accuracy(&[], &[]).is_err());
    assert!(macro_f1(&[], &[], 9).is_err());
}

#[test]
fn diagonal_confusion_gives_equal_metrics() {
    let labels: Vec<usize> = (0..27).map(|i| i % 9).collect();
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(macro_f1(&labels, &labels, 9).unwrap(), 1.0);
}

#[test]
fn level_zero_row_is_clean_evaluation() {
    let net = tiny_ecgnet(4);
    let batch = random_batch(5, 7, 2, 16, 3);
    let preds = net.predict(&batch).unwrap();
    for kind in [NoiseKind::Pgd, NoiseKind::White] {
        let opts = SweepOptions {
            attack: AttackConfig::pgd(0.0, 3),
            chunk: 4,
            ..SweepOptions::new(kind, "CE", 11)
        };
        let rep = noise_sweep(&net, &batch, &opts).unwrap();
        assert_eq!(
            rep.rows[0].accuracy,
            accuracy(&preds, &batch.labels).unwrap()
        );
        assert_eq!(
            rep.rows[0].macro_f1,
            macro_f1(&preds, &batch.labels, 3).unwrap()
        );
        assert_eq!(rep.model_checksum, net.checksum());
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&rep, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), kind.default_levels().len() + 1);
        assert_eq!(parse_report_csv(&text).unwrap(), rep.rows);
    }
}
