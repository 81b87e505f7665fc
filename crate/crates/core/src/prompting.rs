//! Prompt builders, few-shot transcripts and the `[ANS]` answer protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventInstance, RoleOntology};
use crate::textmetrics::NONE_ANSWER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Qg,
    Inverse,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub kind: PromptKind,
    /// Id of the instance the prompt was built for (empty when ad hoc).
    pub provenance: String,
}

/// `role: {role} trigger: {trigger} context: {context}`
pub fn build_qg_prompt(instance: &EventInstance) -> PromptText {
    PromptText {
        text: qg_prompt_text(&instance.role, &instance.trigger.text, &instance.context),
        kind: PromptKind::Qg,
        provenance: instance.id.clone(),
    }
}

pub fn qg_prompt_text(role: &str, trigger: &str, context: &str) -> String {
    format!("role: {role} trigger: {trigger} context: {context}")
}

/// `trigger: {trigger} question: {question}`
pub fn build_inverse_prompt(trigger: &str, question: &str) -> PromptText {
    PromptText {
        text: format!("trigger: {trigger} question: {question}"),
        kind: PromptKind::Inverse,
        provenance: String::new(),
    }
}

/// `question: {question} context: {context}`
pub fn qa_user_turn(question: &str, context: &str) -> String {
    format!("question: {question} context: {context}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateStyle {
    /// `WH is the {role}?`
    Simple,
    /// `WH is the {role} in the {trigger} event?`
    Standard,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("role {0} is not in the ontology")]
    UnknownRole(String),
    #[error("few-shot bank {path}: {message}")]
    Bank { path: String, message: String },
}

pub fn render_template_question(
    role: &str,
    trigger: &str,
    style: TemplateStyle,
    ontology: &RoleOntology,
) -> Result<String, PromptError> {
    let wh = ontology
        .interrogative(role)
        .ok_or_else(|| PromptError::UnknownRole(role.to_string()))?
        .word();
    Ok(match style {
        TemplateStyle::Simple => format!("{wh} is the {role}?"),
        TemplateStyle::Standard => format!("{wh} is the {role} in the {trigger} event?"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// System prompt plus alternating user/assistant turns ending with a user
/// turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub system: String,
    pub turns: Vec<Turn>,
}

impl ChatTranscript {
    pub fn last_user(&self) -> Option<&str> {
        self.turns
            .last()
            .filter(|t| t.speaker == Speaker::User)
            .map(|t| t.text.as_str())
    }

    pub fn is_valid(&self) -> bool {
        !self.turns.is_empty()
            && self.turns.iter().enumerate().all(|(i, t)| {
                t.speaker
                    == if i % 2 == 0 {
                        Speaker::User
                    } else {
                        Speaker::Assistant
                    }
            })
            && self.turns.last().map(|t| t.speaker) == Some(Speaker::User)
    }

    /// Plain-text layout with `System:`/`User:`/`Assistant:` headers, one
    /// shot per block.
    pub fn render(&self) -> String {
        let mut out = format!("System:\n{}\n", self.system);
        for turn in &self.turns {
            match turn.speaker {
                Speaker::User => out.push_str(&format!("\nUser:\n{}\n", turn.text)),
                Speaker::Assistant => out.push_str(&format!("Assistant:\n{}\n", turn.text)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub user: String,
    pub assistant: String,
}

/// A system prompt and its worked examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotBank {
    pub system: String,
    pub shots: Vec<Shot>,
}

impl FewShotBank {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let bank_err = |message: String| PromptError::Bank {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bank_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| bank_err(e.to_string()))
    }

    /// Bundled question-answering bank (five shots, `[ANS]` protocol).
    pub fn qa() -> Self {
        serde_json::from_str(include_str!("../data/qa_fewshot.json")).expect("bundled bank")
    }

    /// Bundled question-generation bank.
    pub fn qg() -> Self {
        serde_json::from_str(include_str!("../data/qg_fewshot.json")).expect("bundled bank")
    }

    /// Bundled context-recovery bank.
    pub fn inverse() -> Self {
        serde_json::from_str(include_str!("../data/inverse_fewshot.json")).expect("bundled bank")
    }

    /// Same system prompt without examples.
    pub fn zero_shot(&self) -> Self {
        Self {
            system: self.system.clone(),
            shots: Vec::new(),
        }
    }

    pub fn transcript(&self, query: &str) -> ChatTranscript {
        let shots: Vec<(String, String)> = self
            .shots
            .iter()
            .map(|s| (s.user.clone(), s.assistant.clone()))
            .collect();
        assemble_fewshot(&self.system, &shots, query)
    }
}

pub fn assemble_fewshot(system: &str, shots: &[(String, String)], query: &str) -> ChatTranscript {
    let mut turns = Vec::with_capacity(shots.len() * 2 + 1);
    for (user, assistant) in shots {
        turns.push(Turn {
            speaker: Speaker::User,
            text: user.clone(),
        });
        turns.push(Turn {
            speaker: Speaker::Assistant,
            text: assistant.clone(),
        });
    }
    turns.push(Turn {
        speaker: Speaker::User,
        text: query.to_string(),
    });
    ChatTranscript {
        system: system.to_string(),
        turns,
    }
}

const ANS_OPEN: &str = "[ANS]";
const ANS_CLOSE: &str = "[/ANS]";

/// Parsed QA response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    /// Empty means an explicit `None`.
    pub values: Vec<String>,
    pub raw: String,
    /// The response did not follow the `[ANS] ... [/ANS]` protocol.
    pub untagged: bool,
}

impl Answer {
    pub fn none() -> Self {
        Self {
            values: Vec::new(),
            raw: format!("{ANS_OPEN} {NONE_ANSWER} {ANS_CLOSE}"),
            untagged: false,
        }
    }

    pub fn is_none(&self) -> bool {
        self.values.is_empty()
    }

    /// Values joined by single spaces; `None` when empty.
    pub fn render(&self) -> String {
        if self.values.is_empty() {
            NONE_ANSWER.to_string()
        } else {
            self.values.join(" ")
        }
    }
}

fn split_values(body: &str) -> Vec<String> {
    let trimmed = body.trim();
    if trimmed.eq_ignore_ascii_case(NONE_ANSWER) {
        return Vec::new();
    }
    trimmed
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

/// Extracts the first `[ANS] ... [/ANS]` block. Responses without a
/// complete block fall back to the whole text and are flagged `untagged`.
pub fn parse_answer(raw: &str) -> Answer {
    if let Some(open) = raw.find(ANS_OPEN) {
        let rest = &raw[open + ANS_OPEN.len()..];
        if let Some(close) = rest.find(ANS_CLOSE) {
            return Answer {
                values: split_values(&rest[..close]),
                raw: raw.to_string(),
                untagged: false,
            };
        }
    }
    Answer {
        values: split_values(raw),
        raw: raw.to_string(),
        untagged: true,
    }
}

/// Formats values in the `[ANS]` protocol (inverse of [`parse_answer`]).
pub fn wrap_answer(values: &[String]) -> String {
    if values.is_empty() {
        format!("{ANS_OPEN} {NONE_ANSWER} {ANS_CLOSE}")
    } else {
        format!("{ANS_OPEN} {} {ANS_CLOSE}", values.join(", "))
    }
}
