//! End-task evaluation of question generators through a QA backend, plus
//! comparison tables in markdown, JSON and CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{self, parallel_map, Backend};
use crate::corpus::{EventInstance, RoleOntology};
use crate::prompting::{
    build_qg_prompt, render_template_question, Answer, FewShotBank, TemplateStyle,
};
use crate::textmetrics::{cor_multi, exact_match, semsim, Embedder};
use crate::toymodel::{self, PolicyParams};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reports mix settings {0:?} and {1:?}")]
    MixedSettings(EvalSetting, EvalSetting),
    #[error("nothing to compare")]
    Empty,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad report file {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSetting {
    /// Only roles that have an argument in the context.
    Practical,
    /// Every role of the event type; expand instances first.
    Full,
}

/// Where questions come from.
pub enum Questioner<'a> {
    Template {
        style: TemplateStyle,
        ontology: &'a RoleOntology,
    },
    /// Greedy decoding from a toy policy.
    Policy {
        params: &'a PolicyParams,
        max_len: usize,
    },
    Backend {
        backend: &'a Backend,
        shots: FewShotBank,
    },
}

impl Questioner<'_> {
    pub fn question(&self, inst: &EventInstance) -> Result<String, String> {
        match self {
            Questioner::Template { style, ontology } => {
                render_template_question(&inst.role, &inst.trigger.text, *style, ontology)
                    .map_err(|e| e.to_string())
            }
            Questioner::Policy { params, max_len } => Ok(toymodel::greedy(
                params,
                &build_qg_prompt(inst).text,
                *max_len,
            )),
            Questioner::Backend { backend, shots } => {
                let r = backends::generate(backend, &shots.transcript(&build_qg_prompt(inst).text));
                if r.is_error() {
                    Err(r.diagnostic.unwrap_or_default())
                } else {
                    Ok(r.text.trim().to_string())
                }
            }
        }
    }
}

/// Scores of one evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub question: String,
    pub prediction: String,
    pub answerable: bool,
    pub em: bool,
    pub cor: f64,
    /// Absent for unanswerable instances.
    pub semsim: Option<f64>,
}

/// An instance the QA step could not score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub answerable: bool,
    pub reason: String,
}

pub type InstanceResult = Result<InstanceScore, Skipped>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub instances: usize,
    pub answerable: usize,
    pub unanswerable: usize,
    /// QA failures, excluded from every mean.
    pub skipped: usize,
    /// Scored instances without a similarity value (unanswerable ones).
    pub semsim_skipped: usize,
}

pub const SEMSIM_OPERANDS: &str = "gold answer text vs predicted answer text";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub setting: EvalSetting,
    pub counts: Counts,
    /// Percentages in `[0, 100]`.
    pub em: f64,
    pub cor: f64,
    pub semsim: f64,
    pub embedder: String,
    pub semsim_operands: String,
    pub config_hash: String,
}

/// Asks the question for every instance and scores the answer. An empty
/// generated question counts as a `None` prediction.
pub fn score_instances(
    instances: &[EventInstance],
    questioner: &Questioner<'_>,
    qa: &Backend,
    embedder: &dyn Embedder,
    jobs: usize,
) -> Vec<InstanceResult> {
    let shots = FewShotBank::qa();
    let jobs = jobs.min(qa.max_in_flight()).max(1);
    parallel_map(instances, jobs, |inst| {
        let skip = |reason: String| Skipped {
            id: inst.id.clone(),
            answerable: inst.is_answerable(),
            reason,
        };
        let question = questioner.question(inst).map_err(skip)?;
        let answer = if question.trim().is_empty() {
            Answer::none()
        } else {
            backends::qa_answer(qa, &question, &inst.context, &shots)
                .map_err(|e| skip(e.to_string()))?
        };
        let prediction = answer.render();
        let answerable = inst.is_answerable();
        let semsim = if answerable {
            let gold = inst.gold_answers.join(" ");
            Some(
                semsim(&gold, &prediction, embedder)
                    .map_err(|e| skip(e.to_string()))?
                    .value,
            )
        } else {
            None
        };
        Ok(InstanceScore {
            id: inst.id.clone(),
            em: exact_match(&inst.gold_answers, &prediction),
            cor: cor_multi(&inst.gold_answers, &prediction),
            question,
            prediction,
            answerable,
            semsim,
        })
    })
}

/// Folds per-instance results in id order into percentages.
pub fn aggregate(
    label: &str,
    setting: EvalSetting,
    results: &[InstanceResult],
    embedder_id: &str,
    config_hash: &str,
) -> MetricReport {
    let mut sorted: Vec<&InstanceResult> = results.iter().collect();
    sorted.sort_by(|a, b| result_id(a).cmp(result_id(b)));
    let mut counts = Counts::default();
    let (mut em, mut cor, mut sim, mut n, mut n_sim) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for r in sorted {
        counts.instances += 1;
        let answerable = match r {
            Ok(s) => s.answerable,
            Err(s) => s.answerable,
        };
        if answerable {
            counts.answerable += 1;
        } else {
            counts.unanswerable += 1;
        }
        match r {
            Ok(s) => {
                n += 1;
                em += f64::from(u8::from(s.em));
                cor += s.cor;
                match s.semsim {
                    Some(v) => {
                        sim += v;
                        n_sim += 1;
                    }
                    None => counts.semsim_skipped += 1,
                }
            }
            Err(_) => {
                counts.skipped += 1;
            }
        }
    }
    let pct = |total: f64, d: usize| {
        if d == 0 {
            0.0
        } else {
            100.0 * total / d as f64
        }
    };
    MetricReport {
        label: label.to_string(),
        setting,
        counts,
        em: pct(em, n),
        cor: pct(cor, n),
        semsim: pct(sim, n_sim),
        embedder: embedder_id.to_string(),
        semsim_operands: SEMSIM_OPERANDS.to_string(),
        config_hash: config_hash.to_string(),
    }
}

fn result_id(r: &InstanceResult) -> &str {
    match r {
        Ok(s) => &s.id,
        Err(s) => &s.id,
    }
}

/// Options shared by every evaluated method.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub label: String,
    pub setting: EvalSetting,
    pub config_hash: String,
    pub jobs: usize,
}

/// Evaluates one question source. The practical setting keeps answerable
/// instances only; the full setting expects instances already expanded to
/// every role.
pub fn evaluate(
    instances: &[EventInstance],
    questioner: &Questioner<'_>,
    qa: &Backend,
    embedder: &dyn Embedder,
    opts: &EvalOptions,
) -> MetricReport {
    let selected: Vec<EventInstance> = match opts.setting {
        EvalSetting::Practical => instances
            .iter()
            .filter(|i| i.is_answerable())
            .cloned()
            .collect(),
        EvalSetting::Full => instances.to_vec(),
    };
    let results = score_instances(&selected, questioner, qa, embedder, opts.jobs);
    for s in results.iter().filter_map(|r| r.as_ref().err()) {
        log::warn!("{}: instance {} skipped: {}", opts.label, s.id, s.reason);
    }
    aggregate(
        &opts.label,
        opts.setting,
        &results,
        embedder.id(),
        &opts.config_hash,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub em: f64,
    pub cor: f64,
    pub semsim: f64,
    /// Best-in-column flags for EM, COR and SemSim.
    pub best: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub setting: EvalSetting,
    pub rows: Vec<ComparisonRow>,
    pub notes: Vec<String>,
    pub embedder: String,
    pub config_hashes: Vec<String>,
}

const COLUMNS: [&str; 3] = ["EM", "COR", "SemSim"];

/// One row per report with the best value of each column marked. Equal
/// bests are all marked and noted.
pub fn compare_methods(reports: &[MetricReport]) -> Result<ComparisonTable, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    if let Some(r) = reports.iter().find(|r| r.setting != first.setting) {
        return Err(EvalError::MixedSettings(first.setting, r.setting));
    }
    let values = |r: &MetricReport| [r.em, r.cor, r.semsim];
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            em: r.em,
            cor: r.cor,
            semsim: r.semsim,
            best: [false; 3],
        })
        .collect();
    let mut notes = Vec::new();
    for (c, column) in COLUMNS.iter().enumerate() {
        let best = reports
            .iter()
            .map(|r| values(r)[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..reports.len())
            .filter(|&i| (values(&reports[i])[c] - best).abs() <= 1e-9)
            .collect();
        for &i in &winners {
            rows[i].best[c] = true;
        }
        if winners.len() > 1 {
            let names: Vec<&str> = winners.iter().map(|&i| reports[i].label.as_str()).collect();
            notes.push(format!("tie on {}: {}", column, names.join(", ")));
        }
    }
    let mut hashes: Vec<String> = reports.iter().map(|r| r.config_hash.clone()).collect();
    hashes.dedup();
    Ok(ComparisonTable {
        setting: first.setting,
        rows,
        notes,
        embedder: first.embedder.clone(),
        config_hashes: hashes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

/// What to write.
#[derive(Debug, Clone, Copy)]
pub enum ReportDoc<'a> {
    Report(&'a MetricReport),
    Table(&'a ComparisonTable),
}

impl ReportDoc<'_> {
    fn table(&self) -> ComparisonTable {
        match self {
            ReportDoc::Table(t) => (*t).clone(),
            ReportDoc::Report(r) => compare_methods(std::slice::from_ref(*r)).expect("one report"),
        }
    }
}

fn setting_name(s: EvalSetting) -> &'static str {
    match s {
        EvalSetting::Practical => "practical",
        EvalSetting::Full => "full",
    }
}

/// Renders `doc`; identical inputs give identical bytes.
pub fn render_report(doc: ReportDoc<'_>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = match doc {
                ReportDoc::Report(r) => serde_json::to_string_pretty(r),
                ReportDoc::Table(t) => serde_json::to_string_pretty(t),
            }
            .expect("reports serialize");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let t = doc.table();
            let mut s = String::from("method,em,cor,semsim\n");
            for r in &t.rows {
                let _ = writeln!(
                    s,
                    "{},{:.2},{:.2},{:.2}",
                    csv_field(&r.label),
                    r.em,
                    r.cor,
                    r.semsim
                );
            }
            s
        }
        ReportFormat::Markdown => {
            let t = doc.table();
            let mut s = format!("Setting: {}\n\n", setting_name(t.setting));
            s.push_str("| Method | EM | COR | SemSim |\n|---|---:|---:|---:|\n");
            for r in &t.rows {
                let cell = |v: f64, best: bool| {
                    if best {
                        format!("**{v:.2}**")
                    } else {
                        format!("{v:.2}")
                    }
                };
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.label,
                    cell(r.em, r.best[0]),
                    cell(r.cor, r.best[1]),
                    cell(r.semsim, r.best[2])
                );
            }
            s.push('\n');
            for n in &t.notes {
                let _ = writeln!(s, "- {n}");
            }
            let _ = writeln!(
                s,
                "- SemSim compares {SEMSIM_OPERANDS} under embedder `{}`.",
                t.embedder
            );
            let _ = writeln!(s, "- Config hash: {}", t.config_hashes.join(", "));
            s.push_str(
                "- Toy-scale numbers; not comparable with results from other systems or data.\n",
            );
            s
        }
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

pub fn emit_report(doc: ReportDoc<'_>, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_report(doc, format)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<MetricReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
