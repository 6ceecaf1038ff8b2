use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::io::write_atomic;
use crate::train::parse_pairs;

/// Bumped whenever the checkpoint container or metadata layout changes.
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Hex SHA-256 of the exact config bytes written to `config.txt`.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

impl RunStatus {
    fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Complete => "complete",
            RunStatus::Failed => "failed",
        }
    }
}

/// Reproducibility record of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub start_step: u64,
    pub end_step: u64,
    /// Checkpoint this run continues from.
    pub parent: Option<PathBuf>,
    pub gram_teacher: Option<PathBuf>,
    pub status: RunStatus,
    /// `(artifact, version)`, e.g. the crate and checkpoint format versions.
    pub versions: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_text: &str, seed: u64, start_step: u64, parent: Option<PathBuf>, gram_teacher: Option<PathBuf>) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config_hash: config_hash(config_text),
            seed,
            start_step,
            end_step: start_step,
            parent,
            gram_teacher,
            status: RunStatus::Running,
            versions: vec![
                ("gramssl_core".into(), env!("CARGO_PKG_VERSION").into()),
                ("checkpoint_format".into(), CHECKPOINT_FORMAT.to_string()),
            ],
        }
    }

    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let _ = writeln!(s, "subcommand = {}", self.subcommand);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "start_step = {}", self.start_step);
        let _ = writeln!(s, "end_step = {}", self.end_step);
        let _ = writeln!(s, "parent = {}", opt(&self.parent));
        let _ = writeln!(s, "gram_teacher = {}", opt(&self.gram_teacher));
        let _ = writeln!(s, "status = {}", self.status.as_str());
        for (k, v) in &self.versions {
            let _ = writeln!(s, "version.{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| {
            pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("manifest: bad {k}"))) };
        let path = |k: &str| -> Result<Option<PathBuf>> { Ok(Some(get(k)?).filter(|v| v != "none").map(PathBuf::from)) };
        let status = match get("status")?.as_str() {
            "running" => RunStatus::Running,
            "complete" => RunStatus::Complete,
            "failed" => RunStatus::Failed,
            other => return Err(Error::Format(format!("manifest: unknown status `{other}`"))),
        };
        Ok(RunManifest {
            subcommand: get("subcommand")?,
            config_hash: get("config_hash")?,
            seed: num("seed")?,
            start_step: num("start_step")?,
            end_step: num("end_step")?,
            parent: path("parent")?,
            gram_teacher: path("gram_teacher")?,
            status,
            versions: pairs.iter().filter_map(|(k, v)| k.strip_prefix("version.").map(|k| (k.to_string(), v.clone()))).collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}
