use std::fmt::Write as _;

use ecg_robust::data::{
    fixed_batch, load_dataset, prepare, read_pack, single_label, split_and_balance, synth_records,
    write_pack, DatasetSplit, PackedDataset,
};
use ecg_robust::defenses::{
    history_csv, select_coefficient, train_with, tune_csv, Method, TrainOutcome, TuneRow,
};
use ecg_robust::eval::{
    accuracy, emit_report, macro_f1, noise_sweep_with, perturb, predict_chunked, signal_svg,
    NoiseKind, SweepOptions,
};
use ecg_robust::model::{load_checkpoint, save_checkpoint, Classifier, EcgNet, MaskedBatch};
use ecg_robust::{derive_seed, Error, Result};
use serde_json::json;

use crate::{RunConfig, Stage};

fn seed(cfg: &RunConfig, name: &str) -> u64 {
    derive_seed(cfg.seed, &[name])
}

fn json_text(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn summarize(split: &DatasetSplit) -> serde_json::Value {
    let counts = |recs: Vec<&ecg_robust::data::PreparedRecord>| {
        DatasetSplit::class_counts(&recs, split.n_classes)
    };
    json!({
        "n_classes": split.n_classes,
        "train_unique": split.train.len(),
        "train_balanced": counts(split.balanced_train()),
        "val": counts(split.val.iter().collect()),
        "test": counts(split.test.iter().collect()),
    })
}

fn finish_pack(
    cfg: &RunConfig,
    stage: &Stage,
    split: DatasetSplit,
    extra: serde_json::Value,
) -> Result<()> {
    let mut summary = summarize(&split);
    summary["source"] = extra;
    let pack = PackedDataset {
        target_len: cfg.length,
        split,
    };
    write_pack(&pack, &stage.path("dataset.pack"))?;
    let text = json_text(&summary);
    stage.write("dataset.json", &text)?;
    print!("{text}");
    Ok(())
}

pub fn preprocess(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let dir = cfg
        .signal_dir
        .clone()
        .ok_or_else(|| Error::Usage("preprocess needs --signal-dir".into()))?;
    let reference = cfg
        .reference
        .clone()
        .unwrap_or_else(|| dir.join("REFERENCE.csv"));
    let records = load_dataset(&dir, &reference)?;
    let total = records.len();
    let (single, removed) = single_label(records);
    let prepared = single
        .iter()
        .map(|r| prepare(r, cfg.length))
        .collect::<Result<Vec<_>>>()?;
    let split = split_and_balance(prepared, cfg.n_classes, seed(cfg, "split"))?;
    finish_pack(
        cfg,
        stage,
        split,
        json!({"signal_dir": dir, "records": total, "multi_label_removed": removed}),
    )
}

pub fn synth(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let sc = cfg.synth();
    let records = synth_records(&sc, seed(cfg, "synth"))?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let split = split_and_balance(records, cfg.n_classes, seed(cfg, "split"))?;
    finish_pack(cfg, stage, split, json!({ "synth": sc }))
}

fn load_pack(cfg: &RunConfig) -> Result<PackedDataset> {
    let pack = read_pack(&cfg.pack_path())?;
    pack.split.validate()?;
    Ok(pack)
}

fn split_batch(cfg: &RunConfig, pack: &PackedDataset, test: bool) -> Result<MaskedBatch> {
    let (records, name) = if test {
        (&pack.split.test, "test-offsets")
    } else {
        (&pack.split.val, "val-offsets")
    };
    fixed_batch(records, pack.target_len, seed(cfg, name))
}

/// Trains `cfg.method` on the pack, logging one line per epoch to stderr.
fn fit(cfg: &RunConfig, pack: &PackedDataset) -> Result<TrainOutcome<EcgNet>> {
    let net_cfg = cfg.net(pack.channels(), pack.split.n_classes, pack.target_len);
    let net = EcgNet::new(net_cfg, seed(cfg, "init"))?;
    let val = split_batch(cfg, pack, false)?;
    let tc = cfg.train(seed(cfg, "shuffle"));
    let label = cfg.method.label();
    train_with(
        net,
        &pack.split.balanced_train(),
        &val,
        pack.target_len,
        &tc,
        |r| {
            eprintln!(
                "{label} epoch {:>3} loss {:.5} val_acc {:.4} val_f1 {:.4} eps {}",
                r.epoch, r.loss, r.val_acc, r.val_f1, r.epsilon_t
            );
        },
    )
}

pub fn train(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let pack = load_pack(cfg)?;
    let out = fit(cfg, &pack)?;
    let stem = cfg.method.label().to_lowercase();
    save_checkpoint(&out.last, &stage.path(&format!("{stem}.json")))?;
    save_checkpoint(&out.best, &stage.path(&format!("{stem}.best.json")))?;
    stage.write(&format!("{stem}.history.csv"), history_csv(&out.history))?;
    let last = out.history.last().expect("at least one epoch");
    println!(
        "{} trained: last val_acc {:.4} val_f1 {:.4}; best epoch {}",
        cfg.method, last.val_acc, last.val_f1, out.best_epoch
    );
    Ok(())
}

fn noise_seed(cfg: &RunConfig) -> u64 {
    match cfg.attack {
        NoiseKind::Pgd => seed(cfg, "attack"),
        NoiseKind::White => seed(cfg, "noise"),
    }
}

pub fn attack(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let pack = load_pack(cfg)?;
    let net = load_checkpoint(&cfg.checkpoint_path())?;
    let test = split_batch(cfg, &pack, true)?;
    let template = cfg.attack_template();
    template.validate()?;
    for w in template.warnings() {
        eprintln!("warning: {w}");
    }
    let x = perturb(
        &net,
        &test,
        cfg.attack,
        cfg.level,
        &template,
        noise_seed(cfg),
        cfg.chunk,
    )?;
    let max_change = x
        .data()
        .iter()
        .zip(test.signals.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let noisy = test.with_signals(x)?;
    let k = net.num_classes();
    let clean_pred = predict_chunked(&net, &test, cfg.chunk)?;
    let noisy_pred = predict_chunked(&net, &noisy, cfg.chunk)?;
    let per_record: Vec<_> = pack
        .split
        .test
        .iter()
        .zip(clean_pred.iter().zip(&noisy_pred))
        .map(|(r, (c, n))| json!({"id": r.id, "label": r.label, "clean": c, "noisy": n}))
        .collect();
    let summary = json!({
        "method": cfg.method.label(),
        "kind": cfg.attack,
        "level": cfg.level,
        "max_abs_change": max_change,
        "clean_accuracy": accuracy(&clean_pred, &test.labels)?,
        "clean_macro_f1": macro_f1(&clean_pred, &test.labels, k)?,
        "noisy_accuracy": accuracy(&noisy_pred, &test.labels)?,
        "noisy_macro_f1": macro_f1(&noisy_pred, &test.labels, k)?,
        "model_checksum": net.checksum(),
        "predictions": per_record,
    });
    println!(
        "{} {} at {}: accuracy {} -> {}",
        cfg.method, cfg.attack, cfg.level, summary["clean_accuracy"], summary["noisy_accuracy"]
    );
    stage.write(
        &format!(
            "attack_{}_{}_{}.json",
            cfg.method.label(),
            cfg.attack,
            cfg.level
        ),
        json_text(&summary),
    )
}

pub fn evaluate(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let pack = load_pack(cfg)?;
    let net = load_checkpoint(&cfg.checkpoint_path())?;
    let test = split_batch(cfg, &pack, true)?;
    let opts = SweepOptions {
        levels: cfg.sweep_levels(),
        attack: cfg.attack_template(),
        repeats: cfg.repeats,
        chunk: cfg.chunk,
        ..SweepOptions::new(cfg.attack, cfg.method.label(), noise_seed(cfg))
    };
    for w in opts.attack.warnings() {
        eprintln!("warning: {w}");
    }
    let report = noise_sweep_with(&net, &test, &opts, |r| {
        println!(
            "{} {} {}: acc {:.4} f1 {:.4}",
            cfg.method, cfg.attack, r.noise_level, r.accuracy, r.macro_f1
        );
    })?;
    emit_report(&report, &stage.path(""))?;
    Ok(())
}

pub fn tune(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let grid = match cfg.method {
        Method::Jacob => &cfg.lambdas,
        Method::Nsr => &cfg.betas,
        m => {
            return Err(Error::Usage(format!(
                "tune applies to jacob or nsr, not {m}"
            )))
        }
    };
    if !(cfg.tolerance >= 0.0) {
        return Err(Error::Parameter(format!(
            "tolerance must be ≥ 0, got {}",
            cfg.tolerance
        )));
    }
    let pack = load_pack(cfg)?;
    let val = split_batch(cfg, &pack, false)?;
    let template = cfg.attack_template();
    let mut rows = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut run = cfg.clone();
        match cfg.method {
            Method::Jacob => run.lambda = c,
            _ => run.beta = c,
        }
        let out = fit(&run, &pack)?;
        let last = out.history.last().expect("at least one epoch");
        let x = perturb(
            &out.last,
            &val,
            NoiseKind::Pgd,
            cfg.level,
            &template,
            seed(cfg, "attack"),
            cfg.chunk,
        )?;
        let preds = predict_chunked(&out.last, &val.with_signals(x)?, cfg.chunk)?;
        let row = TuneRow {
            coefficient: c,
            val_acc: last.val_acc,
            val_f1: last.val_f1,
            val_robust_acc: accuracy(&preds, &val.labels)?,
        };
        println!(
            "{} {c}: val_acc {:.4} val_f1 {:.4} pgd@{} {:.4}",
            cfg.method, row.val_acc, row.val_f1, cfg.level, row.val_robust_acc
        );
        rows.push(row);
    }
    let chosen = select_coefficient(&rows, cfg.tolerance)?;
    println!("{} selected coefficient {chosen}", cfg.method);
    let stem = format!("tune_{}", cfg.method.label().to_lowercase());
    stage.write(&format!("{stem}.csv"), tune_csv(&rows))?;
    stage.write(
        &format!("{stem}.json"),
        json_text(&json!({"method": cfg.method, "tolerance": cfg.tolerance, "chosen": chosen, "rows": rows})),
    )
}

pub fn dump_signal(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let pack = load_pack(cfg)?;
    let test = split_batch(cfg, &pack, true)?;
    let idx = match &cfg.record {
        None => 0,
        Some(id) => pack
            .split
            .test
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| Error::Input(format!("record {id:?} is not in the test split")))?,
    };
    let id = pack.split.test[idx].id.clone();
    if cfg.lead >= test.channels() {
        return Err(Error::Parameter(format!(
            "lead {} out of range for {} channels",
            cfg.lead,
            test.channels()
        )));
    }
    let one = test.slice(idx, idx + 1)?;
    let noisy = match cfg.attack {
        NoiseKind::White => ecg_robust::attacks::uniform_noise(
            &one,
            cfg.level,
            cfg.perturb_padding,
            seed(cfg, "noise"),
        )?,
        NoiseKind::Pgd => {
            let net = load_checkpoint(&cfg.checkpoint_path())?;
            perturb(
                &net,
                &one,
                NoiseKind::Pgd,
                cfg.level,
                &cfg.attack_template(),
                seed(cfg, "attack"),
                1,
            )?
        }
    };
    let l = one.length();
    let range = cfg.lead * l..(cfg.lead + 1) * l;
    let mask = one.mask.data();
    let pick = |d: &[f64]| -> Vec<f64> {
        d[range.clone()]
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m > 0.0)
            .map(|(v, _)| *v)
            .collect()
    };
    let (clean, noisy) = (pick(one.signals.data()), pick(noisy.data()));
    let mut csv = String::from("t,clean,noisy\n");
    for (t, (c, n)) in clean.iter().zip(&noisy).enumerate() {
        let _ = writeln!(csv, "{t},{c},{n}");
    }
    let stem = format!("signal_{id}_lead{}_{}_{}", cfg.lead, cfg.attack, cfg.level);
    let title = format!("{id} lead {} {} {}", cfg.lead, cfg.attack, cfg.level);
    stage.write(&format!("{stem}.csv"), csv)?;
    stage.write(&format!("{stem}.svg"), signal_svg(&title, &clean, &noisy))?;
    println!("wrote {}", stage.target(&format!("{stem}.svg")).display());
    Ok(())
}
