//! Run configuration, output locations and error classification.

use std::path::{Path, PathBuf};

use dualprompt::encoders::EncoderConfig;
use dualprompt::loss_opt::TrainConfig;
use dualprompt::metrics::EvalKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the directory for outputs whose path flag
/// was omitted.
pub const OUT_DIR_ENV: &str = "DUALPROMPT_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dualprompt::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dualprompt::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidArgument(_)
                | E::DimensionMismatch { .. }
                | E::GridTooSmall { .. }
                | E::IncompatibleMode(_)
                | E::Unsupported(_) => 2,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: EvalKind,
    pub topk: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: EvalKind::PartialLabel,
            topk: vec![3, 5],
        }
    }
}

/// Optional fallbacks for path flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything a run depends on, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub eval: EvalSection,
    #[serde(skip_serializing_if = "is_default_paths")]
    pub paths: PathsSection,
}

fn is_default_paths(p: &PathsSection) -> bool {
    p == &PathsSection::default()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Core(dualprompt::Error::Io {
                path: path.into(),
                source: e,
            })
        })?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Digest over the settings that determine results; paths are excluded.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            train: &'a TrainConfig,
            encoder: &'a EncoderConfig,
            eval: &'a EvalSection,
        }
        dualprompt::config_digest(&Keyed {
            train: &self.train,
            encoder: &self.encoder,
            eval: &self.eval,
        })
    }

    /// The config without path fallbacks, as stored in checkpoints.
    pub fn portable(&self) -> Self {
        Self {
            paths: PathsSection::default(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.train.prompt.dim != self.encoder.token_dim {
            return Err(usage(format!(
                "prompt dim {} differs from encoder token_dim {}",
                self.train.prompt.dim, self.encoder.token_dim
            )));
        }
        Ok(())
    }
}

/// `flag`, else the config fallback, else `name` under the output directory.
pub fn output_path(flag: Option<PathBuf>, fallback: Option<&PathBuf>, name: &str) -> PathBuf {
    flag.or_else(|| fallback.cloned()).unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(name)
    })
}

pub fn required_path(flag: Option<PathBuf>, fallback: Option<&PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.cloned()).ok_or_else(|| {
        usage(format!(
            "missing {what}: pass the flag or set it under \"paths\" in the config"
        ))
    })
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| dualprompt::Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| {
        CliError::Core(dualprompt::Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

/// Parses `"a,b,c"` into values.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| usage(format!("bad {what} entry {t:?}"))))
        .collect()
}
