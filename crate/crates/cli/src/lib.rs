//! Entry points behind the `guidegan` binary.
//!
//! Every command is a plain function so that tests and the acceptance suite
//! can drive it without spawning processes.

pub mod eval;
pub mod grid;
pub mod gradcheck;
pub mod subsample;
pub mod train;
pub mod translate;

use std::path::{Path, PathBuf};

use guidegan_core::TrainingConfig;
use thiserror::Error;

pub use eval::{cmd_eval, EvalOptions};
pub use grid::{run_tables, GridOptions, RowResult, Table, TableReport};
pub use gradcheck::{cmd_gradcheck, GradcheckReport, GradcheckRow};
pub use subsample::{cmd_subsample, SubsampleManifest};
pub use train::{cmd_train, TrainOutcome};
pub use translate::{cmd_translate, Direction, TranslateOutput};

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUT_ENV: &str = "GUIDEGAN_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, flags, dataset shape. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Anything that failed while running. Exit code 2.
    #[error(transparent)]
    Runtime(guidegan_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<guidegan_core::Error> for CliError {
    fn from(e: guidegan_core::Error) -> Self {
        match e {
            guidegan_core::Error::Config(_) | guidegan_core::Error::Invalid(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<guidegan_tensor::TensorError> for CliError {
    fn from(e: guidegan_tensor::TensorError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<guidegan_core::config::ConfigError> for CliError {
    fn from(e: guidegan_core::config::ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(guidegan_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Config source plus command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub data_root: Option<PathBuf>,
    pub max_steps: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainingConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => return Err(CliError::Validation("pass either --config or --preset, not both".into())),
            (Some(path), None) => TrainingConfig::load(path)?,
            (None, Some(name)) => TrainingConfig::preset(name)?,
            (None, None) => return Err(CliError::Validation("one of --config or --preset is required".into())),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.deterministic {
            cfg.deterministic = d;
        }
        if let Some(r) = &self.data_root {
            cfg.data.root = Some(r.clone());
        }
        if let Some(n) = self.max_steps {
            cfg.train.max_steps = Some(n);
        }
        cfg.validate()
            .map_err(|(key, msg)| CliError::Validation(format!("`{key}`: {msg}")))?;
        Ok(cfg)
    }
}

/// `--out`, then the config's `output_dir`, then `$GUIDEGAN_OUT`, then `runs`.
pub fn output_root(flag: Option<&Path>, cfg: Option<&TrainingConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg.and_then(|c| c.output_dir.clone()) {
        return p;
    }
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}
