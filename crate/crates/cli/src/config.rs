//! Flat run configuration and `--key value` override parsing.

use std::path::{Path, PathBuf};

use ecg_robust::attacks::{AttackConfig, AttackLoss};
use ecg_robust::data::{SynthConfig, SynthLayout};
use ecg_robust::defenses::{AdamConfig, Method, TrainConfig, BETA_GRID, LAMBDA_GRID};
use ecg_robust::eval::NoiseKind;
use ecg_robust::model::EcgNetConfig;
use ecg_robust::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Every option of every subcommand. Keys not used by a subcommand are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all component seeds are derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,

    // Data.
    /// Directory of `<id>.csv` recordings.
    pub signal_dir: Option<PathBuf>,
    /// Label file; defaults to `<signal_dir>/REFERENCE.csv`.
    pub reference: Option<PathBuf>,
    /// Packed dataset; defaults to `<out_dir>/dataset.pack`.
    pub pack: Option<PathBuf>,
    /// Fixed input length.
    pub length: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub synth_noise: f64,
    pub synth_amplitude: f64,
    pub synth_width: usize,
    pub synth_layout: SynthLayout,
    /// Bumps per record in the shape layout.
    pub synth_bumps: usize,

    // Model.
    pub stem_channels: usize,
    pub num_blocks: usize,
    pub total_downsample: usize,
    pub kernel_size: usize,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub mask_features: bool,

    // Training.
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
    pub eps_max: f64,
    pub adv_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    // Attacks and evaluation.
    pub attack: NoiseKind,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub perturb_padding: bool,
    pub attack_loss: AttackLoss,
    /// Sweep grid; defaults to the grid of `attack`.
    pub levels: Option<Vec<f64>>,
    /// White-noise draws per level.
    pub repeats: usize,
    pub chunk: usize,
    /// Model file; defaults to `<out_dir>/<method>.json`.
    pub checkpoint: Option<PathBuf>,
    /// Noise level of `attack`, `dump-signal` and the robust column of `tune`.
    pub level: f64,

    // Tuning.
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub tolerance: f64,

    // Signal dump.
    /// Test record id; defaults to the first test record.
    pub record: Option<String>,
    pub lead: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = EcgNetConfig::default();
        let train = TrainConfig::default();
        let attack = AttackConfig::default();
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            signal_dir: None,
            reference: None,
            pack: None,
            length: net.input_length,
            n_classes: 9,
            n_per_class: synth.n_per_class,
            synth_noise: synth.noise,
            synth_amplitude: synth.amplitude,
            synth_width: synth.width,
            synth_layout: synth.layout,
            synth_bumps: synth.bumps,
            stem_channels: net.stem_channels,
            num_blocks: net.num_blocks,
            total_downsample: net.total_downsample,
            kernel_size: net.kernel_size,
            gn_groups: net.gn_groups,
            gn_eps: net.gn_eps,
            mask_features: net.mask_features,
            method: train.method,
            epochs: train.epochs,
            batch_size: train.batch_size,
            warmup_epochs: train.warmup_epochs,
            epsilon: train.epsilon,
            lambda: train.lambda,
            beta: train.beta,
            eps_max: train.eps_max,
            adv_steps: train.adv_steps,
            learning_rate: train.optimizer.learning_rate,
            adam_beta1: train.optimizer.beta1,
            adam_beta2: train.optimizer.beta2,
            adam_eps: train.optimizer.eps,
            attack: NoiseKind::Pgd,
            steps: attack.steps,
            alpha: attack.alpha,
            random_start: attack.random_start,
            perturb_padding: attack.perturb_padding,
            attack_loss: attack.loss,
            levels: None,
            repeats: 1,
            chunk: 64,
            checkpoint: None,
            level: 0.01,
            betas: BETA_GRID.to_vec(),
            lambdas: LAMBDA_GRID.to_vec(),
            tolerance: 0.05,
            record: None,
            lead: 0,
        }
    }
}

/// Keys whose override values are always taken verbatim as strings.
const STRING_KEYS: [&str; 7] = [
    "out_dir",
    "signal_dir",
    "reference",
    "pack",
    "checkpoint",
    "record",
    "method",
];

impl RunConfig {
    /// Defaults, then the `--config` file, then the remaining `--key value` pairs.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut file = None;
        let mut overrides = Vec::new();
        for (key, value) in parse_pairs(args)? {
            if key == "config" {
                file = Some(PathBuf::from(
                    value
                        .as_str()
                        .ok_or_else(|| usage("--config needs a path"))?,
                ));
            } else {
                overrides.push((key, value));
            }
        }
        let mut merged = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = file {
            for (k, v) in read_config_file(&path)? {
                merged.insert(k, v);
            }
        }
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| usage(format!("bad configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn pack_path(&self) -> PathBuf {
        self.pack
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.pack"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| {
            self.out_dir
                .join(format!("{}.json", self.method.label().to_lowercase()))
        })
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_per_class: self.n_per_class,
            length: self.length,
            n_classes: self.n_classes,
            noise: self.synth_noise,
            amplitude: self.synth_amplitude,
            width: self.synth_width,
            layout: self.synth_layout,
            bumps: self.synth_bumps,
        }
    }

    pub fn net(&self, in_channels: usize, num_classes: usize, input_length: usize) -> EcgNetConfig {
        EcgNetConfig {
            in_channels,
            input_length,
            num_classes,
            stem_channels: self.stem_channels,
            num_blocks: self.num_blocks,
            total_downsample: self.total_downsample,
            kernel_size: self.kernel_size,
            gn_groups: self.gn_groups,
            gn_eps: self.gn_eps,
            mask_features: self.mask_features,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            epsilon: self.epsilon,
            lambda: self.lambda,
            beta: self.beta,
            eps_max: self.eps_max,
            adv_steps: self.adv_steps,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            seed,
        }
    }

    pub fn attack_template(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.level,
            steps: self.steps,
            alpha: self.alpha,
            random_start: self.random_start,
            perturb_padding: self.perturb_padding,
            loss: self.attack_loss,
            seed: 0,
        }
    }

    pub fn sweep_levels(&self) -> Vec<f64> {
        self.levels
            .clone()
            .unwrap_or_else(|| self.attack.default_levels().to_vec())
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!(
            "{}: configuration must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

fn looks_like_flag(s: &str) -> bool {
    s.starts_with("--") && s.len() > 2
}

/// `--key value`, `--key=value` and bare `--flag` (meaning `true`). Hyphens in
/// keys become underscores; values are JSON when they parse as JSON.
pub fn parse_pairs(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if !looks_like_flag(arg) {
            return Err(usage(format!(
                "unexpected argument {arg:?}; options take the form --key value"
            )));
        }
        let body = &arg[2..];
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => match args.get(i + 1) {
                Some(next) if !looks_like_flag(next) => {
                    i += 1;
                    (body.to_string(), Some(next.clone()))
                }
                _ => (body.to_string(), None),
            },
        };
        let key = key.replace('-', "_");
        let value = match raw {
            None => Value::Bool(true),
            Some(v) if STRING_KEYS.contains(&key.as_str()) || key == "config" => Value::String(v),
            Some(v) => serde_json::from_str(&v).unwrap_or(Value::String(v)),
        };
        out.push((key, value));
        i += 1;
    }
    Ok(out)
}
