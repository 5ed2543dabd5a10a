//! Run manifests: everything needed to rerun a command and check that its
//! outputs come out byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pvp_core::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which generated task `data generate` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Upstream,
    Source,
    Target,
}

/// A replayable command. Paths are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Pretrain,
    Tune,
    Eval { modules: PathBuf, all: bool },
    Bench { banks: Option<PathBuf> },
    DataGenerate { split: Split },
    DataImport { csv: PathBuf, channels: usize },
    DataExport { dataset: PathBuf },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Pretrain => "pretrain",
            Invocation::Tune => "tune",
            Invocation::Eval { .. } => "eval",
            Invocation::Bench { .. } => "bench",
            Invocation::DataGenerate { .. } => "data generate",
            Invocation::DataImport { .. } => "data import",
            Invocation::DataExport { .. } => "data export",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub invocation: Invocation,
    pub config: Config,
    pub seeds: BTreeMap<String, Value>,
    pub backbone_digest: Option<String>,
    pub inputs: Vec<FileDigest>,
    /// Relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read `{}`: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("`{}` is not a manifest: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::data(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.manifest_version
            )));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read `{}`: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn seeds(cfg: &Config) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("backbone".to_string(), cfg.backbone.seed.into()),
        ("tasks".to_string(), cfg.tasks.seed.into()),
        ("pretrain".to_string(), cfg.pretrain.seed.into()),
        ("tune".to_string(), cfg.tune.seed.into()),
        ("bench".to_string(), cfg.bench.seeds.clone().into()),
    ])
}

/// Collects the files a command writes, each one atomically.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<FileDigest>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create `{}`: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)?;
        self.files.push(FileDigest {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest, CliError> {
        manifest.outputs = self.files;
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), &bytes)?;
        Ok(manifest)
    }
}
