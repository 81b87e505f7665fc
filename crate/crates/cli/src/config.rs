//! Run configuration: one JSON file with a default for every field.

use std::path::{Path, PathBuf};

use rlqg::backends::{BackendConfig, BackendKind, Fallback};
use rlqg::evalharness::{EvalSetting, ReportFormat};
use rlqg::preference::SelectionConfig;
use rlqg::prompting::TemplateStyle;
use rlqg::rlhf::PpoConfig;
use rlqg::toymodel::{DecodeConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic,
    /// JSON-lines instances read by `ingest`.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// Instance file for `ingest`.
    pub path: Option<PathBuf>,
    /// Role ontology; inferred from the instances when absent.
    pub ontology: Option<PathBuf>,
    /// Size of the synthetic corpus.
    pub n_instances: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            source: CorpusSource::Synthetic,
            path: None,
            ontology: None,
            n_instances: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    /// Question generation. `toy` uses the trained policy.
    pub qg: BackendConfig,
    /// Context recovery.
    pub ip: BackendConfig,
    pub qa: BackendConfig,
    /// Remote embedder; the TF-IDF embedder fitted on the corpus when absent.
    pub embed: Option<BackendConfig>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            qg: BackendConfig {
                kind: BackendKind::Toy,
                ..BackendConfig::default()
            },
            ip: BackendConfig::scripted(Fallback::InverseRules),
            qa: BackendConfig::scripted(Fallback::LexicalQa),
            embed: None,
        }
    }
}

/// How supervised targets are built for each training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Probability of using the context-aware question instead of the template.
    pub dynamic_target_rate: f64,
    /// JSON object `"{event_type}/{role}" → question` with `{T}` for the
    /// trigger. The synthetic world's bank is used when absent.
    pub question_bank: Option<PathBuf>,
    pub template_style: TemplateStyle,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            dynamic_target_rate: 0.3,
            question_bank: None,
            template_style: TemplateStyle::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub setting: EvalSetting,
    pub split: EvalSplit,
    pub template_style: TemplateStyle,
    pub formats: Vec<ReportFormat>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            setting: EvalSetting::Practical,
            split: EvalSplit::Test,
            template_style: TemplateStyle::Standard,
            formats: vec![
                ReportFormat::Markdown,
                ReportFormat::Json,
                ReportFormat::Csv,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every section's `seed` on load.
    pub seed: u64,
    pub out: PathBuf,
    /// Replay-only remote backends.
    pub offline: bool,
    pub jobs: usize,
    pub corpus: CorpusConfig,
    pub backends: BackendsConfig,
    pub decode: DecodeConfig,
    pub selection: SelectionConfig,
    pub targets: TargetConfig,
    pub sft: TrainConfig,
    pub rm: TrainConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("runs/default"),
            offline: false,
            jobs: 1,
            corpus: CorpusConfig::default(),
            backends: BackendsConfig::default(),
            decode: DecodeConfig::default(),
            selection: SelectionConfig::default(),
            targets: TargetConfig::default(),
            sft: TrainConfig {
                lr: 0.2,
                epochs: 60,
                batch_size: 8,
                grad_clip: 5.0,
                seed: 42,
                hidden: 64,
            },
            rm: TrainConfig {
                lr: 0.05,
                epochs: 10,
                batch_size: 8,
                grad_clip: 5.0,
                seed: 42,
                hidden: 64,
            },
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub offline: bool,
    pub jobs: Option<usize>,
}

impl RunConfig {
    /// Parses a possibly partial config. Fields the file leaves out keep
    /// the values of [`RunConfig::default`], section by section.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let err = |e: serde_json::Error| CliError::Config(format!("config: {e}"));
        let file: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        let mut merged = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut merged, file);
        serde_json::from_value(merged).map_err(err)
    }

    /// Reads `path` (defaults when `None`), applies overrides, propagates
    /// the seed and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(j) = overrides.jobs {
            cfg.jobs = j;
        }
        cfg.offline |= overrides.offline;
        cfg.finish()?;
        Ok(cfg)
    }

    /// Propagates shared fields into the sections and validates.
    pub fn finish(&mut self) -> Result<(), CliError> {
        let seed = self.seed;
        self.decode.seed = seed;
        self.sft.seed = seed;
        self.rm.seed = seed;
        self.ppo.seed = seed;
        self.ppo.jobs = self.jobs;
        let offline = self.offline;
        for b in self.backend_configs_mut() {
            b.offline |= offline;
        }
        self.validate()
    }

    fn backend_configs_mut(&mut self) -> Vec<&mut BackendConfig> {
        let b = &mut self.backends;
        let mut v = vec![&mut b.qg, &mut b.ip, &mut b.qa];
        if let Some(e) = b.embed.as_mut() {
            v.push(e);
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        self.decode.validate().map_err(|e| cfg_err(&e))?;
        self.selection.validate().map_err(|e| cfg_err(&e))?;
        self.sft.validate().map_err(|e| cfg_err(&e))?;
        self.rm.validate().map_err(|e| cfg_err(&e))?;
        self.ppo.validate().map_err(|e| cfg_err(&e))?;
        for b in [&self.backends.ip, &self.backends.qa] {
            if b.kind == BackendKind::Toy {
                return Err(CliError::Config(
                    "ip and qa backends must be scripted or remote".into(),
                ));
            }
            b.validate().map_err(|e| cfg_err(&e))?;
        }
        if self.backends.qg.kind != BackendKind::Toy {
            self.backends.qg.validate().map_err(|e| cfg_err(&e))?;
        }
        if let Some(e) = &self.backends.embed {
            if e.kind != BackendKind::Remote {
                return Err(CliError::Config("the embed backend must be remote".into()));
            }
            e.validate().map_err(|x| cfg_err(&x))?;
        }
        let rate = self.targets.dynamic_target_rate;
        if !(0.0..=1.0).contains(&rate) {
            return Err(CliError::Config(
                "dynamic_target_rate must lie in [0, 1]".into(),
            ));
        }
        if self.corpus.n_instances == 0 {
            return Err(CliError::Config(
                "corpus.n_instances must be positive".into(),
            ));
        }
        let paths = [
            ("corpus.path", self.corpus.path.as_ref()),
            ("corpus.ontology", self.corpus.ontology.as_ref()),
            ("targets.question_bank", self.targets.question_bank.as_ref()),
        ];
        for (name, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!(
                        "{name} {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.corpus.source == CorpusSource::Native && self.corpus.path.is_none() {
            return Err(CliError::Config(
                "native corpus source needs corpus.path".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything that affects artifacts
    /// (all fields except `out`, `jobs` and `offline`).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in ["out", "jobs", "offline"] {
            obj.remove(k);
        }
        if let Some(ppo) = obj.get_mut("ppo").and_then(|p| p.as_object_mut()) {
            ppo.remove("jobs");
        }
        if let Some(b) = obj.get_mut("backends").and_then(|b| b.as_object_mut()) {
            for (_, cfg) in b.iter_mut() {
                if let Some(c) = cfg.as_object_mut() {
                    c.remove("offline");
                }
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_seed_propagates() {
        let cfg = RunConfig::load(
            None,
            &Overrides {
                seed: Some(9),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(
            (
                cfg.seed,
                cfg.sft.seed,
                cfg.rm.seed,
                cfg.ppo.seed,
                cfg.decode.seed
            ),
            (9, 9, 9, 9, 9)
        );
        assert_eq!(RunConfig::default().seed, 42);
    }

    #[test]
    fn hash_ignores_placement_but_not_substance() {
        let mut a = RunConfig::default();
        a.finish().unwrap();
        let mut b = RunConfig {
            out: "elsewhere".into(),
            jobs: 8,
            offline: true,
            ..RunConfig::default()
        };
        b.finish().unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.selection.alpha = 0.7;
        c.finish().unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"sft": {"epochs": 3}, "eval": {"setting": "full"}}"#).unwrap();
        assert_eq!(cfg.sft.epochs, 3);
        assert_eq!(cfg.sft.lr, 0.2);
        assert_eq!(cfg.eval.setting, EvalSetting::Full);
        assert!(RunConfig::from_json(r#"{"corpus": {"size": 3}}"#).is_err());
        let round = RunConfig::from_json(&RunConfig::default().to_pretty_json()).unwrap();
        assert_eq!(round, RunConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.targets.dynamic_target_rate = 1.5;
        assert!(cfg.finish().is_err());
        let mut cfg = RunConfig::default();
        cfg.backends.qa.kind = BackendKind::Toy;
        assert!(cfg.finish().is_err());
        let mut cfg = RunConfig::default();
        cfg.corpus.source = CorpusSource::Native;
        assert!(cfg.finish().is_err());
    }
}
