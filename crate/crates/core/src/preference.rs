//! Candidate scoring, pair gating and preference-dataset construction.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{self, Backend, BackendError};
use crate::corpus::EventInstance;
use crate::prompting::{build_qg_prompt, Answer, FewShotBank, PromptKind, PromptText};
use crate::textmetrics::{cor_multi, semsim, EmbedError, Embedder};
use crate::toymodel::{self, DecodeConfig};

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Weight of the context-recovery similarity.
    pub lambda1: f64,
    /// Weight of the answer overlap.
    pub lambda2: f64,
    /// The best candidate must score above this.
    pub alpha: f64,
    /// The best and worst candidates must differ by more than this.
    pub beta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.7,
            alpha: 0.65,
            beta: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        let Self {
            lambda1,
            lambda2,
            alpha,
            beta,
        } = *self;
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(PreferenceError::Config(
                "lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        let top = lambda1 + lambda2;
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=top).contains(&v) {
                return Err(PreferenceError::Config(format!(
                    "{name} = {v} must lie in [0, lambda1 + lambda2 = {top}]"
                )));
            }
        }
        Ok(())
    }

    pub fn combine(&self, semsim: f64, cor: f64) -> f64 {
        self.lambda1 * semsim + self.lambda2 * cor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub question: String,
    pub recovered: String,
    pub answer: Answer,
    pub semsim: f64,
    pub cor: f64,
    pub score: f64,
}

/// Scores a question by how well `recovered` matches the original context and
/// how much `answer` overlaps the gold answers. An empty recovery has
/// similarity 0.
pub fn score_candidate(
    question: &str,
    context: &str,
    recovered: &str,
    golds: &[String],
    answer: &Answer,
    cfg: &SelectionConfig,
    embedder: &dyn Embedder,
) -> Result<ScoredCandidate, EmbedError> {
    let sim = if recovered.trim().is_empty() || context.trim().is_empty() {
        0.0
    } else {
        semsim(context, recovered, embedder)?.value
    };
    let cor = cor_multi(golds, &answer.render());
    Ok(ScoredCandidate {
        question: question.to_string(),
        recovered: recovered.to_string(),
        answer: answer.clone(),
        semsim: sim,
        cor,
        score: cfg.combine(sim, cor),
    })
}

/// Indices of the best and worst candidate and their score gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub chosen: usize,
    pub rejected: usize,
    pub gap: f64,
}

/// First index of the maximum and of the minimum, then both gates (strict).
pub fn select_scores(scores: &[f64], cfg: &SelectionConfig) -> Option<Selection> {
    let first = *scores.first()?;
    let (mut hi, mut lo) = (0, 0);
    let (mut max, mut min) = (first, first);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > max {
            max = s;
            hi = i;
        }
        if s < min {
            min = s;
            lo = i;
        }
    }
    let gap = max - min;
    (max > cfg.alpha && gap > cfg.beta).then_some(Selection {
        chosen: hi,
        rejected: lo,
        gap,
    })
}

pub fn select_pair(scored: &[ScoredCandidate], cfg: &SelectionConfig) -> Option<Selection> {
    let scores: Vec<f64> = scored.iter().map(|c| c.score).collect();
    select_scores(&scores, cfg).filter(|s| scored[s.chosen].question != scored[s.rejected].question)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub semsim: f64,
    pub cor: f64,
    pub s: f64,
}

impl From<&ScoredCandidate> for ScoreParts {
    fn from(c: &ScoredCandidate) -> Self {
        Self {
            semsim: c.semsim,
            cor: c.cor,
            s: c.score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub chosen: ScoreParts,
    pub rejected: ScoreParts,
}

/// One line of the preference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Question-generation prompt text.
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub gap: f64,
    pub instance_id: String,
    pub chosen_index: usize,
    pub rejected_index: usize,
    pub scores: PairScores,
}

impl PreferencePair {
    pub fn prompt_text(&self) -> PromptText {
        PromptText {
            text: self.prompt.clone(),
            kind: PromptKind::Qg,
            provenance: self.instance_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub instances: usize,
    pub candidates: usize,
    pub pairs: usize,
    /// Instances whose candidates did not pass the gates.
    pub gated_out: usize,
    /// Skipped instances by failing stage.
    pub failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub config: SelectionConfig,
    pub stats: BuildStats,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes one pair per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), PreferenceError> {
        let io = |source| PreferenceError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for p in &self.pairs {
            let line = serde_json::to_string(p).expect("pairs serialize");
            writeln!(f, "{line}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn load_jsonl(path: &Path, config: SelectionConfig) -> Result<Self, PreferenceError> {
        let text = fs::read_to_string(path).map_err(|source| PreferenceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: PreferencePair =
                serde_json::from_str(line).map_err(|e| PreferenceError::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if p.chosen == p.rejected {
                return Err(PreferenceError::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "chosen and rejected questions are identical".into(),
                });
            }
            pairs.push(p);
        }
        let stats = BuildStats {
            pairs: pairs.len(),
            ..BuildStats::default()
        };
        Ok(Self {
            pairs,
            config,
            stats,
        })
    }
}

/// Produces candidate questions for a prompt, best first.
pub trait QuestionSource: Sync {
    fn candidates(&self, prompt: &PromptText) -> Result<Vec<String>, BackendError>;
}

/// Candidates from a generation backend: beam search for the toy policy,
/// `num_return` alternatives from a remote model, one answer otherwise.
pub struct BackendQuestions<'a> {
    pub backend: &'a Backend,
    pub decode: DecodeConfig,
    pub shots: FewShotBank,
}

impl QuestionSource for BackendQuestions<'_> {
    fn candidates(&self, prompt: &PromptText) -> Result<Vec<String>, BackendError> {
        match self.backend {
            Backend::Toy(t) => Ok(toymodel::beam_search(&t.params, &prompt.text, &self.decode)
                .hypotheses
                .into_iter()
                .map(|h| h.text)
                .collect()),
            Backend::Remote(r) => {
                r.generate_n(&self.shots.transcript(&prompt.text), self.decode.num_return)
            }
            Backend::Scripted(_) => {
                let res = backends::generate(self.backend, &self.shots.transcript(&prompt.text));
                if res.is_error() {
                    return Err(BackendError::Generation(res.diagnostic.unwrap_or_default()));
                }
                Ok(vec![res.text.trim().to_string()])
            }
        }
    }
}

/// Scores questions about an instance by recovering the context and
/// answering.
pub struct Scorer<'a> {
    /// Context recovery (inverse prompting).
    pub ip: &'a Backend,
    pub qa: &'a Backend,
    pub embedder: &'a dyn Embedder,
    pub selection: SelectionConfig,
    pub inverse_shots: FewShotBank,
    pub qa_shots: FewShotBank,
}

/// A failed scoring step: stage name and message.
pub type StageFailure = (&'static str, String);

impl Scorer<'_> {
    pub fn score(
        &self,
        inst: &EventInstance,
        question: &str,
    ) -> Result<ScoredCandidate, StageFailure> {
        let recovered =
            backends::inverse_recover(self.ip, &inst.trigger.text, question, &self.inverse_shots)
                .map_err(|e| ("inverse", e.to_string()))?;
        let answer = backends::qa_answer(self.qa, question, &inst.context, &self.qa_shots)
            .map_err(|e| ("qa", e.to_string()))?;
        score_candidate(
            question,
            &inst.context,
            &recovered,
            &inst.gold_answers,
            &answer,
            &self.selection,
            self.embedder,
        )
        .map_err(|e| ("embed", e.to_string()))
    }

    pub fn jobs(&self, requested: usize) -> usize {
        requested
            .min(self.ip.max_in_flight())
            .min(self.qa.max_in_flight())
            .max(1)
    }
}

pub struct PairBuilder<'a> {
    pub questions: &'a dyn QuestionSource,
    pub scorer: Scorer<'a>,
    pub jobs: usize,
}

/// Result of processing one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceOutcome {
    /// Candidates in source order (empty questions dropped) and the gated pair.
    Scored {
        candidates: Vec<(usize, ScoredCandidate)>,
        pair: Option<PreferencePair>,
    },
    Failed {
        stage: &'static str,
        message: String,
    },
}

impl PairBuilder<'_> {
    pub fn process(&self, inst: &EventInstance) -> InstanceOutcome {
        let prompt = build_qg_prompt(inst);
        let questions = match self.questions.candidates(&prompt) {
            Ok(q) => q,
            Err(e) => {
                return InstanceOutcome::Failed {
                    stage: "qg",
                    message: e.to_string(),
                }
            }
        };
        let mut scored = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            if q.trim().is_empty() {
                continue;
            }
            match self.scorer.score(inst, q) {
                Ok(c) => scored.push((i, c)),
                Err((stage, message)) => return InstanceOutcome::Failed { stage, message },
            }
        }
        let only: Vec<ScoredCandidate> = scored.iter().map(|(_, c)| c.clone()).collect();
        let pair = select_pair(&only, &self.scorer.selection).map(|sel| {
            let (ci, c) = &scored[sel.chosen];
            let (ri, r) = &scored[sel.rejected];
            PreferencePair {
                prompt: prompt.text.clone(),
                chosen: c.question.clone(),
                rejected: r.question.clone(),
                gap: sel.gap,
                instance_id: inst.id.clone(),
                chosen_index: *ci,
                rejected_index: *ri,
                scores: PairScores {
                    chosen: c.into(),
                    rejected: r.into(),
                },
            }
        });
        InstanceOutcome::Scored {
            candidates: scored,
            pair,
        }
    }
}

/// Runs candidate generation, recovery, answering, scoring and gating over
/// `instances` (normally the training split). Failing instances are skipped
/// and tallied. Pairs come out in instance-id order.
pub fn build_preference_dataset(
    instances: &[EventInstance],
    builder: &PairBuilder<'_>,
) -> Result<PreferenceDataset, PreferenceError> {
    builder.scorer.selection.validate()?;
    let mut sorted: Vec<&EventInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let jobs = builder.scorer.jobs(builder.jobs);
    let outcomes = backends::parallel_map(&sorted, jobs, |inst| builder.process(inst));

    let mut stats = BuildStats {
        instances: sorted.len(),
        ..BuildStats::default()
    };
    let mut pairs = Vec::new();
    for (inst, outcome) in sorted.iter().zip(outcomes) {
        match outcome {
            InstanceOutcome::Scored { candidates, pair } => {
                stats.candidates += candidates.len();
                match pair {
                    Some(p) => pairs.push(p),
                    None => stats.gated_out += 1,
                }
            }
            InstanceOutcome::Failed { stage, message } => {
                log::warn!("instance {} skipped at {stage}: {message}", inst.id);
                *stats.failures.entry(stage.to_string()).or_default() += 1;
            }
        }
    }
    stats.pairs = pairs.len();
    Ok(PreferenceDataset {
        pairs,
        config: builder.scorer.selection,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(scores: &[f64]) -> Option<(usize, usize)> {
        select_scores(scores, &SelectionConfig::default()).map(|s| (s.chosen, s.rejected))
    }

    #[test]
    fn combined_score_arithmetic() {
        let cfg = SelectionConfig::default();
        assert!((cfg.combine(0.8, 1.0) - 0.94).abs() < 1e-12);
        assert_eq!(cfg.combine(0.0, 0.0), 0.0);
        assert!((cfg.combine(1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_cases() {
        let s = select_scores(&[0.94, 0.10], &SelectionConfig::default()).unwrap();
        assert_eq!((s.chosen, s.rejected), (0, 1));
        assert!((s.gap - 0.84).abs() < 1e-12);
        assert_eq!(sel(&[0.60, 0.05]), None);
        assert_eq!(sel(&[0.90, 0.70]), None);
        assert_eq!(sel(&[0.9]), None);
        assert_eq!(sel(&[]), None);
    }

    #[test]
    fn gates_are_strict() {
        let cfg = SelectionConfig {
            alpha: 0.5,
            beta: 0.25,
            ..SelectionConfig::default()
        };
        assert!(select_scores(&[0.5, 0.0], &cfg).is_none());
        assert!(select_scores(&[0.75, 0.5], &cfg).is_none());
        assert!(select_scores(&[0.75, 0.25], &cfg).is_some());
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(sel(&[0.1, 0.9, 0.9, 0.1]), Some((1, 0)));
    }

    #[test]
    fn config_bounds() {
        assert!(SelectionConfig::default().validate().is_ok());
        let bad = SelectionConfig {
            alpha: 1.5,
            ..SelectionConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = SelectionConfig {
            lambda1: -0.1,
            ..SelectionConfig::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn empty_answer_scores_against_unanswerable_rule() {
        let e = crate::textmetrics::fit_default_embedder(&["a b c"]);
        let cfg = SelectionConfig::default();
        let c = score_candidate("q", "a b", "a b", &[], &Answer::none(), &cfg, &e).unwrap();
        assert_eq!(c.cor, 1.0);
        assert!((c.semsim - 1.0).abs() < 1e-12);
        let c = score_candidate("q", "a b", "", &["x".into()], &Answer::none(), &cfg, &e).unwrap();
        assert_eq!((c.semsim, c.cor, c.score), (0.0, 0.0, 0.0));
    }
}
