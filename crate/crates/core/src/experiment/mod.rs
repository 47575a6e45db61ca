//! Declarative experiment configs and reproducible run directories.
//!
//! A run lives in `<root>/<kind>-<hash12>/`, where the hash is taken over
//! the canonical config text. Every output file is listed with its SHA-256
//! in `manifest.json`. Nothing in the manifest depends on wall-clock time,
//! so two executions of one config produce identical manifests.

mod config;
mod envs;
mod figures;
mod runs;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{EnvKind, ExperimentConfig, ExperimentKind, ExtractionKind};
pub use envs::{make_dataset, make_env, stream, AnyEnv};
pub use figures::{
    alpha_grid, awr_gaussian_fit, bandit_sweep, figure1, figure2, figure4, figure4_seed,
    summarize_figure4, AwrFit, BanditSweepRow, Figure1Report, Figure2Report, Figure4Report,
    Figure4Seed, SweepRow, AWR_MAX_WEIGHT, TAU_GRID,
};
pub use runs::{
    evaluate_run, finetune_run, pretrain, AuditReport, EvalSummary, FinetuneSummary, OfflineModels,
};

use crate::critic::CriticError;
use crate::diffusion::DiffusionError;
use crate::envs::EnvError;
use crate::extraction::ExtractionError;
use crate::finetune::FinetuneError;
use crate::losses::LossError;
use crate::oracles::OracleError;
use crate::tensorgrad::TensorError;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config field `{field}`: {constraint}")]
    Field { field: &'static str, constraint: String },
    #[error("config parse: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn field(field: &'static str, constraint: impl Into<String>) -> Self {
        Self::Field {
            field,
            constraint: constraint.into(),
        }
    }

    /// Short machine-readable category for the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Field { .. } | Self::Parse(_) => "config",
            Self::File { .. } => "io",
            Self::Critic(_) => "critic",
            Self::Diffusion(_) => "diffusion",
            Self::Extraction(_) => "extraction",
            Self::Finetune(_) => "finetune",
            Self::Env(_) => "env",
            Self::Loss(_) => "loss",
            Self::Oracle(_) => "oracle",
            Self::Tensor(_) => "tensor",
            Self::Json(_) => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    /// Sorted by path.
    pub files: Vec<ManifestEntry>,
}

/// A run directory being filled. Files are hashed as they are written.
pub struct RunDir {
    path: PathBuf,
    kind: ExperimentKind,
    seed: u64,
    hash: String,
    files: BTreeMap<String, ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a whole input file, keeping its path in the error.
pub(crate) fn read_input(path: &str) -> Result<Vec<u8>, ExperimentError> {
    fs::read(path).map_err(io_err(Path::new(path)))
}

impl RunDir {
    /// Creates `<root>/<kind>-<hash12>/` and stores the config text in it.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let hash = config.hash();
        let path = root.join(format!("{}-{}", config.kind.name(), &hash[..12]));
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        let mut dir = Self {
            path,
            kind: config.kind,
            seed: config.seed,
            hash,
            files: BTreeMap::new(),
        };
        dir.write("config.toml", config.to_toml().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let p = self.path.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
        self.files.insert(
            name.to_string(),
            ManifestEntry {
                path: name.to_string(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(name, &text)
    }

    /// Renders with `f` into memory, then writes.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<(), ExperimentError> {
        let mut buf = Vec::new();
        let p = self.path.join(name);
        f(&mut buf).map_err(io_err(&p))?;
        self.write(name, &buf)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema: MANIFEST_SCHEMA,
            kind: self.kind.name().to_string(),
            seed: self.seed,
            config_hash: self.hash.clone(),
            files: self.files.values().cloned().collect(),
        }
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(self) -> Result<RunOutput, ExperimentError> {
        let manifest = self.manifest();
        let p = self.path.join("manifest.json");
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(RunOutput {
            dir: self.path,
            manifest,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Validates `config` and executes it under `root`.
pub fn run(config: &ExperimentConfig, root: &Path) -> Result<RunOutput, ExperimentError> {
    config.validate()?;
    let mut dir = RunDir::create(root, config)?;
    runs::dispatch(config, &mut dir)?;
    dir.finish()
}
