//! Output-directory layout and the `<file>.meta.json` sidecars that tie
//! each artifact to the config hash it was produced under.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CORPUS: &str = "corpus.jsonl";
pub const ONTOLOGY: &str = "ontology.json";
pub const SFT_DATA: &str = "sft_data.jsonl";
pub const POLICY_SFT: &str = "policy_sft.json";
pub const SFT_REPORT: &str = "sft_report.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const PAIRS_STATS: &str = "pairs_stats.json";
pub const REWARD_MODEL: &str = "reward_model.json";
pub const RM_REPORT: &str = "rm_report.json";
pub const POLICY_RL: &str = "policy_rl.json";
pub const PPO_LOG: &str = "ppo_log.jsonl";
pub const PPO_STATUS: &str = "ppo_status.json";
pub const EVAL_DIR: &str = "eval";
pub const REWARDS: &str = "eval/rewards.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub stage: String,
    pub config_hash: String,
    /// SHA-256 of the artifact bytes.
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The output directory of one run.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
    pub config_hash: String,
    /// Accept artifacts whose sidecar is missing or disagrees.
    pub force: bool,
}

impl Store {
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes the sidecar for an artifact that was just written.
    pub fn seal(&self, name: &str, stage: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let meta = ArtifactMeta {
            artifact: name.to_string(),
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            sha256: file_sha256(&path)?,
        };
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        let mp = meta_path(&path);
        std::fs::write(&mp, text).map_err(|e| CliError::io(&mp, e))
    }

    pub fn write_bytes(&self, name: &str, stage: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.seal(name, stage)
    }

    pub fn write_json<T: Serialize>(
        &self,
        name: &str,
        stage: &str,
        value: &T,
    ) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.write_bytes(name, stage, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(
        &self,
        name: &str,
        stage: &str,
        rows: &[T],
    ) -> Result<(), CliError> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).expect("row serializes"));
            text.push('\n');
        }
        self.write_bytes(name, stage, text.as_bytes())
    }

    /// Checks that a prerequisite exists and was produced under this config.
    pub fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::Missing(path));
        }
        match self.status(name)? {
            Status::Current => Ok(path),
            _ if self.force => {
                log::warn!("using {} despite its metadata (--force)", path.display());
                Ok(path)
            }
            Status::Unsealed => Err(CliError::Mismatch {
                path,
                reason: "has no metadata sidecar".into(),
            }),
            Status::Modified => Err(CliError::Mismatch {
                path,
                reason: "changed after it was written".into(),
            }),
            Status::Foreign(h) => Err(CliError::Mismatch {
                path,
                reason: format!(
                    "was written under config {h}, current config is {}",
                    self.config_hash
                ),
            }),
            Status::Absent => unreachable!("existence checked above"),
        }
    }

    pub fn status(&self, name: &str) -> Result<Status, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(Status::Absent);
        }
        let mp = meta_path(&path);
        if !mp.exists() {
            return Ok(Status::Unsealed);
        }
        let text = std::fs::read_to_string(&mp).map_err(|e| CliError::io(&mp, e))?;
        let meta: ArtifactMeta = match serde_json::from_str(&text) {
            Ok(m) => m,
            Err(_) => return Ok(Status::Unsealed),
        };
        if meta.config_hash != self.config_hash {
            return Ok(Status::Foreign(meta.config_hash));
        }
        if meta.sha256 != file_sha256(&path)? {
            return Ok(Status::Modified);
        }
        Ok(Status::Current)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Absent,
    Current,
    Unsealed,
    Modified,
    /// Sealed under another config hash.
    Foreign(String),
}
