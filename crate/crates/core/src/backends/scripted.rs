//! Deterministic offline responders: a lookup table, a rule-based context
//! recoverer and a lexical-proximity QA engine.

use std::collections::{BTreeMap, HashSet};

use serde::Deserialize;

use crate::prompting::wrap_answer;
use crate::textmetrics::tokenize;

/// What a scripted backend does when the lookup table misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// A miss is an error.
    #[default]
    None,
    /// Parse `trigger: .. question: ..` and rewrite the question declaratively.
    InverseRules,
    /// Parse `question: .. context: ..` and answer by lexical proximity.
    LexicalQa,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScriptedBackend {
    pub table: BTreeMap<String, String>,
    pub fallback: Fallback,
}

#[derive(Deserialize)]
struct InversePair {
    trigger: String,
    question: String,
    context: String,
}

impl ScriptedBackend {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self {
            table,
            fallback: Fallback::None,
        }
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    /// Bundled question→context pairs backed by the rule recoverer.
    pub fn inverse_default() -> Self {
        let table = include_str!("../../data/inverse_pairs.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let p: InversePair = serde_json::from_str(l).expect("bundled pairs");
                (
                    crate::prompting::build_inverse_prompt(&p.trigger, &p.question).text,
                    p.context,
                )
            })
            .collect();
        Self {
            table,
            fallback: Fallback::InverseRules,
        }
    }

    pub fn qa_default() -> Self {
        Self {
            table: BTreeMap::new(),
            fallback: Fallback::LexicalQa,
        }
    }

    /// Response for a final user turn, or `None` on a miss.
    pub fn respond(&self, user_turn: &str) -> Option<String> {
        if let Some(r) = self.table.get(user_turn) {
            return Some(r.clone());
        }
        match self.fallback {
            Fallback::None => None,
            Fallback::InverseRules => {
                let (trigger, question) = split_fields(user_turn, "trigger:", "question:")?;
                Some(recover_by_rules(trigger, question))
            }
            Fallback::LexicalQa => {
                let (question, context) = split_fields(user_turn, "question:", "context:")?;
                Some(wrap_answer(&lexical_answer(question, context)))
            }
        }
    }
}

fn split_fields<'a>(turn: &'a str, first: &str, second: &str) -> Option<(&'a str, &'a str)> {
    let rest = turn.trim_start().strip_prefix(first)?;
    let at = rest.find(second)?;
    Some((rest[..at].trim(), rest[at + second.len()..].trim()))
}

const AUX: &[&str] = &[
    "was", "were", "is", "are", "did", "does", "do", "will", "has", "have", "had", "can", "could",
];

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "An",
        _ => "A",
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Rewrites a WH question into a declarative sentence with an indefinite
/// filler: `Who was hired as X?` → `Someone was hired as X.`
pub fn recover_by_rules(trigger: &str, question: &str) -> String {
    let q = question.trim().trim_end_matches('?').trim();
    let words: Vec<&str> = q.split_whitespace().collect();
    let Some((&head, rest)) = words.split_first() else {
        return String::new();
    };
    let rest: Vec<&str> = rest.to_vec();
    let adverbial = |filler: &str| -> Vec<String> {
        match rest.first().map(|w| w.to_lowercase()) {
            Some(a) if ["did", "does", "do"].contains(&a.as_str()) => rest[1..]
                .iter()
                .map(|w| w.to_string())
                .chain([filler.to_string()])
                .collect(),
            Some(a) if AUX.contains(&a.as_str()) => rest[1..]
                .iter()
                .map(|w| w.to_string())
                .chain([rest[0].to_string(), filler.to_string()])
                .collect(),
            _ => std::iter::once(filler.to_string())
                .chain(rest.iter().map(|w| w.to_string()))
                .collect(),
        }
    };
    let out: Vec<String> = match head.to_lowercase().as_str() {
        "who" => std::iter::once("Someone".to_string())
            .chain(rest.iter().map(|w| w.to_string()))
            .collect(),
        "whose" if !rest.is_empty() => {
            ["The".to_string(), rest[0].to_string(), "of someone".into()]
                .into_iter()
                .chain(rest[1..].iter().map(|w| w.to_string()))
                .collect()
        }
        "what" | "which" => match rest.first() {
            None => vec!["Something".into()],
            Some(w) if AUX.contains(&w.to_lowercase().as_str()) => {
                std::iter::once("Something".to_string())
                    .chain(rest.iter().map(|w| w.to_string()))
                    .collect()
            }
            Some(w) => std::iter::once(article(w).to_string())
                .chain(rest.iter().map(|w| w.to_string()))
                .collect(),
        },
        "where" => adverbial("somewhere"),
        "when" => adverbial("sometime"),
        "how" => adverbial("somehow"),
        _ => words.iter().map(|w| w.to_string()).collect(),
    };
    let mut sentence = out.join(" ");
    let trig = tokenize(trigger);
    let have: HashSet<String> = tokenize(&sentence).into_vec().into_iter().collect();
    if !trig.is_empty() && !trig.as_slice().iter().all(|t| have.contains(t)) {
        sentence.push_str(&format!(" in the {}", trigger.trim()));
    }
    let mut sentence = capitalize(sentence.trim());
    if !sentence.ends_with('.') {
        sentence.push('.');
    }
    sentence
}

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "of",
    "to",
    "in",
    "at",
    "by",
    "for",
    "from",
    "on",
    "with",
    "as",
    "into",
    "was",
    "were",
    "is",
    "are",
    "be",
    "been",
    "being",
    "did",
    "do",
    "does",
    "has",
    "have",
    "had",
    "will",
    "would",
    "can",
    "could",
    "that",
    "this",
    "these",
    "those",
    "and",
    "or",
    "it",
    "its",
    "someone",
    "something",
    "somewhere",
    "sometime",
    "there",
    "their",
    "his",
    "her",
    "they",
    "he",
    "she",
    "during",
    "event",
    "who",
    "whom",
    "whose",
    "what",
    "which",
    "where",
    "when",
    "why",
    "how",
];

/// Capitalized words that never start an entity name.
const NON_NAMES: &[&str] = &[
    "The",
    "A",
    "An",
    "In",
    "On",
    "At",
    "By",
    "For",
    "From",
    "With",
    "As",
    "He",
    "She",
    "It",
    "They",
    "This",
    "That",
    "There",
    "According",
    "Former",
    "Suspect",
    "Cargo",
    "Soldier",
    "Officials",
    "Police",
    "Some",
];

struct Word<'a> {
    text: &'a str,
    lower: String,
    /// Punctuation separates this word from the previous one.
    broken: bool,
}

fn words(context: &str) -> Vec<Word<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    let mut broken = false;
    for (i, c) in context.char_indices().chain([(context.len(), ' ')]) {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            let text = &context[s..i];
            out.push(Word {
                text,
                lower: text.to_lowercase(),
                broken,
            });
            broken = false;
        }
        if !c.is_whitespace() && c != '-' && c != '\'' {
            broken = true;
        }
    }
    out
}

/// Answers tend to follow their cue word, so a cue seen after the candidate
/// counts as this many times farther away.
const BACKWARD_PENALTY: f64 = 2.5;
/// Extra distance for each punctuation mark between two words.
const CLAUSE_GAP: f64 = 3.0;

/// Answers with the capitalized name closest to the question's content
/// words (score `Σ 1/d²` over matched words, earliest name on ties).
/// Distances are in words. Names that the question already mentions are
/// skipped. Returns an empty list when no content word of the question
/// occurs in the context.
pub fn lexical_answer(question: &str, context: &str) -> Vec<String> {
    let q_tokens: HashSet<String> = tokenize(question).into_vec().into_iter().collect();
    let content: Vec<&String> = q_tokens
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    let ws = words(context);
    let mut occurrences: Vec<Vec<usize>> = Vec::new();
    for t in &content {
        let hits: Vec<usize> = ws
            .iter()
            .enumerate()
            .filter(|(_, w)| &&w.lower == t)
            .map(|(i, _)| i)
            .collect();
        if !hits.is_empty() {
            occurrences.push(hits);
        }
    }
    if occurrences.is_empty() {
        return Vec::new();
    }

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let is_name = |w: &Word| {
            w.text.chars().next().is_some_and(|c| c.is_uppercase()) && !NON_NAMES.contains(&w.text)
        };
        if is_name(&ws[i]) {
            let s = i;
            i += 1;
            while i < ws.len() && !ws[i].broken && is_name(&ws[i]) {
                i += 1;
            }
            runs.push((s, i));
        } else {
            i += 1;
        }
    }

    let mut pos = Vec::with_capacity(ws.len());
    let mut offset = 0.0;
    for (i, w) in ws.iter().enumerate() {
        if w.broken {
            offset += CLAUSE_GAP;
        }
        pos.push(i as f64 + offset);
    }

    let mut best: Option<(f64, (usize, usize))> = None;
    for &(s, e) in &runs {
        if ws[s..e].iter().all(|w| q_tokens.contains(&w.lower)) {
            continue;
        }
        let score: f64 = occurrences
            .iter()
            .filter_map(|hits| {
                hits.iter()
                    .filter(|&&h| h < s || h >= e)
                    .map(|&h| {
                        if h < s {
                            pos[s] - pos[h]
                        } else {
                            BACKWARD_PENALTY * (pos[h] - pos[e - 1])
                        }
                    })
                    .min_by(f64::total_cmp)
            })
            .map(|d| 1.0 / (d * d))
            .sum();
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, (s, e)));
        }
    }
    match best {
        Some((score, (s, e))) if score > 0.0 => {
            vec![ws[s..e]
                .iter()
                .map(|w| w.text)
                .collect::<Vec<_>>()
                .join(" ")]
        }
        _ => Vec::new(),
    }
}
