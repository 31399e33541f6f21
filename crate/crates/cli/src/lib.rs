//! Command-line front end: argument handling, staging of artifacts and exit codes.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ecg_robust::{Error, Result};

pub use config::RunConfig;

const AFTER_HELP: &str =
    "Options are configuration keys: `--key value`, `--key=value`, or a bare `--flag` for true. \
`--config file.json` loads a JSON object of keys first; later flags override it. \
The resolved configuration is written to <out_dir>/config.resolved.json.";

#[derive(Debug, Parser)]
#[command(name = "ecg-robust", version, about = "Noise-robust ECG classification", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a CSV recording directory, split it and write dataset.pack.
    Preprocess(Keys),
    /// Generate the synthetic bump dataset and write dataset.pack.
    Synth(Keys),
    /// Train one model; writes <method>.json, <method>.best.json and <method>.history.csv.
    Train(Keys),
    /// Perturb the test split at one noise level and report the accuracy change.
    Attack(Keys),
    /// Sweep a trained model over a grid of noise levels.
    Evaluate(Keys),
    /// Grid-search the JACOB or NSR coefficient on the validation split.
    Tune(Keys),
    /// Plot one lead of a test record before and after perturbation.
    DumpSignal(Keys),
}

#[derive(Debug, clap::Args)]
struct Keys {
    #[arg(num_args = 0.., allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY VALUE")]
    keys: Vec<String>,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Parameter(_) => 1,
        Error::Data { .. } | Error::Io { .. } | Error::Input(_) => 2,
        Error::NonFinite { .. } => 3,
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Usage(_) => "usage",
        Error::Parameter(_) => "parameter",
        Error::Data { .. } => "data",
        Error::Io { .. } => "io",
        Error::Input(_) => "input",
        Error::NonFinite { .. } => "nonfinite",
    }
}

/// One-line `error kind=<kind> code=<code>: <message>` description.
pub fn error_line(err: &Error) -> String {
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} code={}: {msg}", kind(err), exit_code(err))
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", error_line(&Error::Usage(first)));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let (keys, f): (_, fn(&RunConfig, &Stage) -> Result<()>) = match cmd {
        Command::Preprocess(k) => (k, commands::preprocess),
        Command::Synth(k) => (k, commands::synth),
        Command::Train(k) => (k, commands::train),
        Command::Attack(k) => (k, commands::attack),
        Command::Evaluate(k) => (k, commands::evaluate),
        Command::Tune(k) => (k, commands::tune),
        Command::DumpSignal(k) => (k, commands::dump_signal),
    };
    let cfg = RunConfig::from_args(&keys.keys)?;
    let stage = Stage::new(&cfg.out_dir)?;
    f(&cfg, &stage)?;
    stage.write("config.resolved.json", cfg.to_json())?;
    stage.commit()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scratch directory inside the output directory. Files move into place only
/// on [`Stage::commit`]; dropping an uncommitted stage deletes them.
pub struct Stage {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Stage {
    pub fn new(target: &Path) -> Result<Self> {
        fs::create_dir_all(target).map_err(|e| io_err(target, e))?;
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(target)
            .map_err(|e| io_err(target, e))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
        })
    }

    /// Staged location of `name`.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    /// Final location of `name`.
    pub fn target(&self, name: &str) -> PathBuf {
        self.target.join(name)
    }

    pub fn commit(self) -> Result<()> {
        let entries = fs::read_dir(self.dir.path()).map_err(|e| io_err(self.dir.path(), e))?;
        let mut names: Vec<_> = entries
            .map(|e| {
                e.map(|e| e.file_name())
                    .map_err(|err| io_err(self.dir.path(), err))
            })
            .collect::<Result<_>>()?;
        names.sort();
        for name in names {
            let to = self.target.join(&name);
            fs::rename(self.dir.path().join(&name), &to).map_err(|e| io_err(&to, e))?;
        }
        Ok(())
    }
}
