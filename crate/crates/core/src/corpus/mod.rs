//! Event-extraction instances, the role ontology, native JSONL ingestion and
//! the full-evaluation role expansion.

mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic_corpus, synthetic_ontology, SyntheticWorld};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("instance {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
    #[error("event type {0} is not in the ontology")]
    UnknownEventType(String),
    #[error("role {role} is not listed under event type {event_type}")]
    UnknownRole { event_type: String, role: String },
    #[error("ontology: {0}")]
    Ontology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "ace-like")]
    AceLike,
    #[serde(rename = "rams-like")]
    RamsLike,
    #[serde(rename = "synthetic")]
    Synthetic,
}

/// Trigger surface form and its character span `[start, end)` in the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One (context, trigger, role, gold answers) extraction task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInstance {
    pub id: String,
    pub context: String,
    pub trigger: Trigger,
    pub event_type: String,
    pub role: String,
    /// Alternatives; empty means the role has no argument in the context.
    pub gold_answers: Vec<String>,
    pub split: Split,
    pub source: Source,
}

impl EventInstance {
    pub fn is_answerable(&self) -> bool {
        !self.gold_answers.is_empty()
    }

    /// Key identifying the event mention this role question belongs to.
    pub fn mention_key(&self) -> (String, usize, usize, String) {
        (
            self.context.clone(),
            self.trigger.start,
            self.trigger.end,
            self.event_type.clone(),
        )
    }

    /// Checks the span and answer invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.role.is_empty() {
            return Err(invalid("empty role".into()));
        }
        let n_chars = self.context.chars().count();
        let t = &self.trigger;
        if t.start >= t.end || t.end > n_chars {
            return Err(invalid(format!(
                "trigger span [{}, {}) outside context of {} chars",
                t.start, t.end, n_chars
            )));
        }
        let surface: String = self
            .context
            .chars()
            .skip(t.start)
            .take(t.end - t.start)
            .collect();
        if surface != t.text {
            return Err(invalid(format!(
                "trigger span covers {surface:?}, expected {:?}",
                t.text
            )));
        }
        let mut seen = HashSet::new();
        for a in &self.gold_answers {
            if a.trim().is_empty() {
                return Err(invalid("empty gold answer".into()));
            }
            if !seen.insert(a.as_str()) {
                return Err(invalid(format!("duplicate gold answer {a:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interrogative {
    Who,
    Where,
    What,
}

impl Interrogative {
    pub fn word(self) -> &'static str {
        match self {
            Interrogative::Who => "Who",
            Interrogative::Where => "Where",
            Interrogative::What => "What",
        }
    }
}

/// Event type → ordered roles, and role → interrogative.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleOntology {
    pub event_types: BTreeMap<String, Vec<String>>,
    pub interrogatives: BTreeMap<String, Interrogative>,
}

impl RoleOntology {
    /// Builds an ontology, mapping any role without an interrogative to
    /// `what`.
    pub fn new(
        event_types: BTreeMap<String, Vec<String>>,
        mut interrogatives: BTreeMap<String, Interrogative>,
    ) -> Self {
        for roles in event_types.values() {
            for r in roles {
                if !interrogatives.contains_key(r) {
                    log::warn!("role {r} has no interrogative, defaulting to what");
                    interrogatives.insert(r.clone(), Interrogative::What);
                }
            }
        }
        Self {
            event_types,
            interrogatives,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.event_types.is_empty()
    }

    pub fn roles(&self, event_type: &str) -> Option<&[String]> {
        self.event_types.get(event_type).map(Vec::as_slice)
    }

    pub fn interrogative(&self, role: &str) -> Option<Interrogative> {
        self.interrogatives.get(role).copied()
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: RoleOntology =
            serde_json::from_str(&text).map_err(|e| CorpusError::Ontology(e.to_string()))?;
        Ok(Self::new(raw.event_types, raw.interrogatives))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("ontology serializes");
        fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Ontology listing every (event type, role) seen in `instances`, in
    /// first-seen order.
    pub fn infer(instances: &[EventInstance]) -> Self {
        let mut event_types: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for inst in instances {
            let roles = event_types.entry(inst.event_type.clone()).or_default();
            if !roles.contains(&inst.role) {
                roles.push(inst.role.clone());
            }
        }
        Self::new(event_types, BTreeMap::new())
    }

    fn covers(&self, inst: &EventInstance) -> Result<(), CorpusError> {
        let roles = self
            .roles(&inst.event_type)
            .ok_or_else(|| CorpusError::UnknownEventType(inst.event_type.clone()))?;
        if !roles.contains(&inst.role) {
            return Err(CorpusError::UnknownRole {
                event_type: inst.event_type.clone(),
                role: inst.role.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub source: String,
    pub seed: Option<u64>,
}

/// A validated, immutable collection of instances with their ontology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    instances: Vec<EventInstance>,
    ontology: RoleOntology,
    metadata: CorpusMetadata,
}

impl Corpus {
    pub fn new(
        instances: Vec<EventInstance>,
        ontology: RoleOntology,
        metadata: CorpusMetadata,
    ) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for inst in &instances {
            inst.validate()?;
            if !ids.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId(inst.id.clone()));
            }
            ontology.covers(inst)?;
        }
        Ok(Self {
            instances,
            ontology,
            metadata,
        })
    }

    pub fn instances(&self) -> &[EventInstance] {
        &self.instances
    }

    pub fn ontology(&self) -> &RoleOntology {
        &self.ontology
    }

    pub fn metadata(&self) -> &CorpusMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<EventInstance> {
        self.instances
            .iter()
            .filter(|i| i.split == split)
            .cloned()
            .collect()
    }

    /// Replaces the ontology, re-checking coverage.
    pub fn with_ontology(self, ontology: RoleOntology) -> Result<Self, CorpusError> {
        Self::new(self.instances, ontology, self.metadata)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instance serializes");
            writeln!(file, "{line}").map_err(io_err)?;
        }
        Ok(())
    }
}

/// Supported on-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    NativeJsonl,
}

/// Loads a corpus; the ontology is inferred from the records and can be
/// replaced with [`Corpus::with_ontology`].
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let instances = load_instances(path, format)?;
    let ontology = RoleOntology::infer(&instances);
    Corpus::new(instances, ontology, file_metadata(path))
}

/// Loads a corpus against a known ontology.
pub fn load_corpus_with_ontology(
    path: &Path,
    format: CorpusFormat,
    ontology: RoleOntology,
) -> Result<Corpus, CorpusError> {
    Corpus::new(load_instances(path, format)?, ontology, file_metadata(path))
}

fn file_metadata(path: &Path) -> CorpusMetadata {
    CorpusMetadata {
        source: path.display().to_string(),
        seed: None,
    }
}

/// Reads and validates the records of a corpus file.
pub fn load_instances(
    path: &Path,
    format: CorpusFormat,
) -> Result<Vec<EventInstance>, CorpusError> {
    let CorpusFormat::NativeJsonl = format;
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EventInstance = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| CorpusError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(first) = ids.insert(inst.id.clone(), line_no) {
            return Err(CorpusError::Record {
                line: line_no,
                message: format!("duplicate id {} (first seen on line {first})", inst.id),
            });
        }
        instances.push(inst);
    }
    if instances.is_empty() {
        log::warn!("{} contains no records", path.display());
    }
    Ok(instances)
}

/// Expands every event mention to one instance per ontology role of its
/// event type. Roles without an annotated argument become unanswerable
/// instances (empty gold). Original instances are emitted unchanged and in
/// their original order; a mention's new instances follow its last original.
pub fn expand_full_eval(corpus: &Corpus) -> Result<Vec<EventInstance>, CorpusError> {
    let ontology = corpus.ontology();
    let instances = corpus.instances();
    let mut last_index: HashMap<_, usize> = HashMap::new();
    let mut present: HashMap<_, HashSet<&str>> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if ontology.roles(&inst.event_type).is_none() {
            return Err(CorpusError::UnknownEventType(inst.event_type.clone()));
        }
        let key = inst.mention_key();
        last_index.insert(key.clone(), i);
        present.entry(key).or_default().insert(inst.role.as_str());
    }
    let mut used_ids: HashSet<String> = instances.iter().map(|i| i.id.clone()).collect();
    let mut out = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        out.push(inst.clone());
        let key = inst.mention_key();
        if last_index[&key] != i {
            continue;
        }
        let roles_here = &present[&key];
        for role in ontology.roles(&inst.event_type).unwrap_or_default() {
            if roles_here.contains(role.as_str()) {
                continue;
            }
            let mut id = format!("{}::{}", inst.id, role);
            while used_ids.contains(&id) {
                id.push('_');
            }
            used_ids.insert(id.clone());
            out.push(EventInstance {
                id,
                role: role.clone(),
                gold_answers: Vec::new(),
                ..inst.clone()
            });
        }
    }
    Ok(out)
}
