//! Pipeline stages. Each reads its inputs from the output directory and
//! writes sealed artifacts back to it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlqg::backends::{
    self, parallel_map, Backend, BackendError, BackendKind, RemoteEmbedder, ToyBackend, ToyMode,
};
use rlqg::corpus::{
    expand_full_eval, generate_synthetic_corpus, load_corpus, load_corpus_with_ontology,
    synthetic_ontology, Corpus, CorpusFormat, EventInstance, RoleOntology, Split, SyntheticWorld,
};
use rlqg::evalharness::{
    aggregate, compare_methods, emit_report, render_report, score_instances, EvalSetting,
    InstanceResult, MetricReport, Questioner, ReportDoc, ReportFormat,
};
use rlqg::preference::{
    build_preference_dataset, BackendQuestions, PairBuilder, PreferenceDataset, QuestionSource,
    Scorer,
};
use rlqg::prompting::{
    build_qg_prompt, qg_prompt_text, render_template_question, FewShotBank, PromptText,
};
use rlqg::rlhf::{ppo_refine, train_reward_model, write_ppo_log, PpoStatus, RewardModelParams};
use rlqg::textmetrics::{fit_default_embedder, Embedder};
use rlqg::toymodel::{self, sft_train, PolicyParams};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{self, Status, Store};
use crate::config::{CorpusSource, EvalSplit, RunConfig};
use crate::{CliError, PolicyChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Sft,
    Augment,
    Pairs,
    TrainRm,
    Ppo,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Sft => "sft",
            Stage::Augment => "augment",
            Stage::Pairs => "pairs",
            Stage::TrainRm => "train-rm",
            Stage::Ppo => "ppo",
            Stage::Eval => "eval",
        }
    }

    pub fn outputs(self, cfg: &RunConfig) -> Vec<String> {
        use artifacts::*;
        let names: Vec<String> = match self {
            Stage::Synth | Stage::Ingest => vec![CORPUS.into(), ONTOLOGY.into()],
            Stage::Sft => vec![SFT_DATA.into(), POLICY_SFT.into(), SFT_REPORT.into()],
            Stage::Augment => vec![CANDIDATES.into()],
            Stage::Pairs => vec![PAIRS.into(), PAIRS_STATS.into()],
            Stage::TrainRm => vec![REWARD_MODEL.into(), RM_REPORT.into()],
            Stage::Ppo => vec![POLICY_RL.into(), PPO_LOG.into(), PPO_STATUS.into()],
            Stage::Eval => {
                let mut v: Vec<String> = cfg
                    .eval
                    .formats
                    .iter()
                    .map(|f| format!("{EVAL_DIR}/report.{}", f.extension()))
                    .collect();
                v.push(REWARDS.into());
                v
            }
        };
        names
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A loaded config bound to its output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub store: Store,
}

impl Context {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
        let store = Store {
            root: cfg.out.clone(),
            config_hash: cfg.hash(),
            force,
        };
        Ok(Self { cfg, store })
    }

    fn corpus(&self) -> Result<Corpus, CliError> {
        let cp = self.store.require(artifacts::CORPUS)?;
        let op = self.store.require(artifacts::ONTOLOGY)?;
        let ontology = RoleOntology::load(&op).map_err(CliError::runtime)?;
        load_corpus_with_ontology(&cp, CorpusFormat::NativeJsonl, ontology)
            .map_err(CliError::runtime)
    }

    fn policy(&self, name: &str) -> Result<PolicyParams, CliError> {
        let path = self.store.require(name)?;
        Ok(PolicyParams::load(&path).map_err(CliError::runtime)?.0)
    }

    fn remote_or_scripted(&self, cfg: &rlqg::backends::BackendConfig) -> Result<Backend, CliError> {
        Backend::from_config(cfg).map_err(|e| CliError::Config(e.to_string()))
    }

    fn embedder(&self, corpus: &Corpus) -> Result<Box<dyn Embedder>, CliError> {
        match &self.cfg.backends.embed {
            Some(b) => Ok(Box::new(
                RemoteEmbedder::connect(b).map_err(CliError::runtime)?,
            )),
            None => {
                let contexts: Vec<&str> = corpus
                    .instances()
                    .iter()
                    .map(|i| i.context.as_str())
                    .collect();
                Ok(Box::new(fit_default_embedder(&contexts)))
            }
        }
    }
}

/// One row of `sft_data.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instance_id: String,
    pub prompt: String,
    pub target: String,
    /// Whether the target is the context-aware question.
    pub dynamic: bool,
}

/// One row of `candidates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub instance_id: String,
    pub prompt: String,
    pub questions: Vec<String>,
}

/// Candidates read back from `candidates.jsonl`, keyed by instance id.
pub struct FileQuestions {
    by_id: HashMap<String, Vec<String>>,
}

impl FileQuestions {
    pub fn new(records: Vec<CandidateRecord>) -> Self {
        Self {
            by_id: records
                .into_iter()
                .map(|r| (r.instance_id, r.questions))
                .collect(),
        }
    }
}

impl QuestionSource for FileQuestions {
    fn candidates(&self, prompt: &PromptText) -> Result<Vec<String>, BackendError> {
        self.by_id.get(&prompt.provenance).cloned().ok_or_else(|| {
            BackendError::Generation(format!("no candidates for instance {}", prompt.provenance))
        })
    }
}

/// Mean combined reward of one method's questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReward {
    pub label: String,
    pub mean_reward: f64,
    pub mean_cor: f64,
    pub scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub split: EvalSplit,
    pub instances: usize,
    pub methods: Vec<MethodReward>,
    pub config_hash: String,
}

pub fn run_stage(ctx: &Context, stage: Stage) -> Result<(), CliError> {
    log::info!("stage {stage}");
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Ingest => ingest(ctx),
        Stage::Sft => sft(ctx),
        Stage::Augment => augment(ctx),
        Stage::Pairs => pairs(ctx),
        Stage::TrainRm => train_rm(ctx),
        Stage::Ppo => ppo(ctx),
        Stage::Eval => eval(ctx),
    }
}

/// Runs every stage in order. Stages whose outputs are all current are
/// skipped; outputs from another config stop the run unless forced.
pub fn e2e(ctx: &Context) -> Result<(), CliError> {
    let first = match ctx.cfg.corpus.source {
        CorpusSource::Synthetic => Stage::Synth,
        CorpusSource::Native => Stage::Ingest,
    };
    let order = [
        first,
        Stage::Sft,
        Stage::Augment,
        Stage::Pairs,
        Stage::TrainRm,
        Stage::Ppo,
        Stage::Eval,
    ];
    let mut stale = false;
    for stage in order {
        let mut current = !stale;
        for name in stage.outputs(&ctx.cfg) {
            match ctx.store.status(&name)? {
                Status::Current => {}
                Status::Absent => current = false,
                other if ctx.store.force => {
                    log::warn!("overwriting {name} ({other:?})");
                    current = false;
                }
                Status::Foreign(h) => {
                    return Err(CliError::Mismatch {
                        path: ctx.store.path(&name),
                        reason: format!(
                            "was written under config {h}, current config is {}",
                            ctx.store.config_hash
                        ),
                    })
                }
                _ => {
                    return Err(CliError::Mismatch {
                        path: ctx.store.path(&name),
                        reason: "has missing or stale metadata".into(),
                    })
                }
            }
        }
        if current {
            log::info!("stage {stage}: up to date");
        } else {
            run_stage(ctx, stage)?;
            stale = true;
        }
    }
    Ok(())
}

fn write_corpus(ctx: &Context, corpus: &Corpus, stage: Stage) -> Result<(), CliError> {
    let path = ctx.store.path(artifacts::CORPUS);
    corpus.save(&path).map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::CORPUS, stage.name())?;
    let path = ctx.store.path(artifacts::ONTOLOGY);
    corpus.ontology().save(&path).map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::ONTOLOGY, stage.name())?;
    log::info!(
        "{} instances written to {}",
        corpus.len(),
        ctx.store.path(artifacts::CORPUS).display()
    );
    Ok(())
}

fn synth(ctx: &Context) -> Result<(), CliError> {
    let ontology = match &ctx.cfg.corpus.ontology {
        Some(p) => RoleOntology::load(p).map_err(CliError::runtime)?,
        None => synthetic_ontology(),
    };
    let corpus = generate_synthetic_corpus(ctx.cfg.seed, ctx.cfg.corpus.n_instances, &ontology)
        .map_err(CliError::runtime)?;
    write_corpus(ctx, &corpus, Stage::Synth)
}

fn ingest(ctx: &Context) -> Result<(), CliError> {
    let path = ctx
        .cfg
        .corpus
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("ingest needs corpus.path".into()))?;
    let corpus = match &ctx.cfg.corpus.ontology {
        Some(p) => {
            let ontology = RoleOntology::load(p).map_err(CliError::runtime)?;
            load_corpus_with_ontology(path, CorpusFormat::NativeJsonl, ontology)
        }
        None => load_corpus(path, CorpusFormat::NativeJsonl),
    }
    .map_err(CliError::runtime)?;
    write_corpus(ctx, &corpus, Stage::Ingest)
}

fn question_bank(ctx: &Context) -> Result<BTreeMap<String, String>, CliError> {
    match &ctx.cfg.targets.question_bank {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(SyntheticWorld.question_bank()),
    }
}

/// Supervised targets for the training split: the context-aware question
/// with probability `dynamic_target_rate` (when the bank has one), else the
/// template question.
pub fn sft_records(
    instances: &[EventInstance],
    ontology: &RoleOntology,
    bank: &BTreeMap<String, String>,
    cfg: &RunConfig,
) -> Result<Vec<SftRecord>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    instances
        .iter()
        .map(|inst| {
            let draw = rng.gen::<f64>();
            let key = format!("{}/{}", inst.event_type, inst.role);
            let dynamic = bank
                .get(&key)
                .filter(|_| draw < cfg.targets.dynamic_target_rate)
                .map(|q| q.replace("{T}", &inst.trigger.text));
            let (target, is_dynamic) = match dynamic {
                Some(q) => (q, true),
                None => (
                    render_template_question(
                        &inst.role,
                        &inst.trigger.text,
                        cfg.targets.template_style,
                        ontology,
                    )
                    .map_err(CliError::runtime)?,
                    false,
                ),
            };
            Ok(SftRecord {
                instance_id: inst.id.clone(),
                prompt: build_qg_prompt(inst).text,
                target,
                dynamic: is_dynamic,
            })
        })
        .collect()
}

fn sft(ctx: &Context) -> Result<(), CliError> {
    let corpus = ctx.corpus()?;
    let train = corpus.split(Split::Train);
    let bank = question_bank(ctx)?;
    let records = sft_records(&train, corpus.ontology(), &bank, &ctx.cfg)?;
    ctx.store
        .write_jsonl(artifacts::SFT_DATA, "sft", &records)?;
    let pairs: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.prompt.clone(), r.target.clone()))
        .collect();
    let (params, report) = sft_train(&pairs, &ctx.cfg.sft).map_err(CliError::runtime)?;
    log::info!(
        "sft: {} pairs, {} parameters, loss {:.4} -> {:.4}",
        pairs.len(),
        params.n_params(),
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    params
        .save(
            &ctx.store.path(artifacts::POLICY_SFT),
            &ctx.store.config_hash,
        )
        .map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::POLICY_SFT, "sft")?;
    ctx.store.write_json(artifacts::SFT_REPORT, "sft", &report)
}

fn qg_backend(
    ctx: &Context,
    policy: Option<PolicyParams>,
    mode: ToyMode,
) -> Result<Backend, CliError> {
    match ctx.cfg.backends.qg.kind {
        BackendKind::Toy => {
            let params = match policy {
                Some(p) => p,
                None => ctx.policy(artifacts::POLICY_SFT)?,
            };
            Ok(Backend::Toy(ToyBackend::new(
                params,
                ctx.cfg.decode.clone(),
                mode,
            )))
        }
        _ => ctx.remote_or_scripted(&ctx.cfg.backends.qg),
    }
}

fn augment(ctx: &Context) -> Result<(), CliError> {
    let corpus = ctx.corpus()?;
    let train = corpus.split(Split::Train);
    let backend = qg_backend(ctx, None, ToyMode::Beam)?;
    let source = BackendQuestions {
        backend: &backend,
        decode: ctx.cfg.decode.clone(),
        shots: FewShotBank::qg(),
    };
    let jobs = ctx.cfg.jobs.min(backend.max_in_flight()).max(1);
    let results = parallel_map(&train, jobs, |inst| {
        let prompt = build_qg_prompt(inst);
        source.candidates(&prompt).map(|questions| CandidateRecord {
            instance_id: inst.id.clone(),
            prompt: prompt.text,
            questions,
        })
    });
    let mut records = Vec::with_capacity(results.len());
    for (inst, r) in train.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => log::warn!("no candidates for {}: {e}", inst.id),
        }
    }
    log::info!(
        "augment: candidates for {}/{} instances",
        records.len(),
        train.len()
    );
    ctx.store
        .write_jsonl(artifacts::CANDIDATES, "augment", &records)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn pairs(ctx: &Context) -> Result<(), CliError> {
    let corpus = ctx.corpus()?;
    let records: Vec<CandidateRecord> = read_jsonl(&ctx.store.require(artifacts::CANDIDATES)?)?;
    let questions = FileQuestions::new(records);
    let ip = ctx.remote_or_scripted(&ctx.cfg.backends.ip)?;
    let qa = ctx.remote_or_scripted(&ctx.cfg.backends.qa)?;
    let embedder = ctx.embedder(&corpus)?;
    let builder = PairBuilder {
        questions: &questions,
        scorer: scorer(ctx, &ip, &qa, embedder.as_ref()),
        jobs: ctx.cfg.jobs,
    };
    let train = corpus.split(Split::Train);
    let dataset = build_preference_dataset(&train, &builder).map_err(CliError::runtime)?;
    log::info!(
        "pairs: {} pairs from {} instances ({} gated out)",
        dataset.len(),
        dataset.stats.instances,
        dataset.stats.gated_out
    );
    dataset
        .save_jsonl(&ctx.store.path(artifacts::PAIRS))
        .map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::PAIRS, "pairs")?;
    ctx.store.write_json(
        artifacts::PAIRS_STATS,
        "pairs",
        &json!({"stats": dataset.stats, "selection": dataset.config, "embedder": embedder.id()}),
    )
}

fn scorer<'a>(
    ctx: &Context,
    ip: &'a Backend,
    qa: &'a Backend,
    embedder: &'a dyn Embedder,
) -> Scorer<'a> {
    Scorer {
        ip,
        qa,
        embedder,
        selection: ctx.cfg.selection,
        inverse_shots: FewShotBank::inverse(),
        qa_shots: FewShotBank::qa(),
    }
}

fn load_pairs(ctx: &Context) -> Result<PreferenceDataset, CliError> {
    let path = ctx.store.require(artifacts::PAIRS)?;
    PreferenceDataset::load_jsonl(&path, ctx.cfg.selection).map_err(CliError::runtime)
}

fn train_rm(ctx: &Context) -> Result<(), CliError> {
    let sft = ctx.policy(artifacts::POLICY_SFT)?;
    let dataset = load_pairs(ctx)?;
    if dataset.is_empty() {
        return Err(CliError::Runtime(
            "the preference dataset is empty; no pair passed the gates".into(),
        ));
    }
    let (rm, report) =
        train_reward_model(&sft, &dataset, &ctx.cfg.rm).map_err(CliError::runtime)?;
    log::info!(
        "train-rm: accuracy {:.3} -> {:.3}",
        report.initial_accuracy,
        report.epoch_accuracy.last().copied().unwrap_or(f64::NAN)
    );
    rm.save(
        &ctx.store.path(artifacts::REWARD_MODEL),
        &ctx.store.config_hash,
    )
    .map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::REWARD_MODEL, "train-rm")?;
    ctx.store
        .write_json(artifacts::RM_REPORT, "train-rm", &report)
}

fn ppo(ctx: &Context) -> Result<(), CliError> {
    let rm_path = ctx.store.require(artifacts::REWARD_MODEL)?;
    let sft = ctx.policy(artifacts::POLICY_SFT)?;
    let (rm, _) = RewardModelParams::load(&rm_path).map_err(CliError::runtime)?;
    let dataset = load_pairs(ctx)?;
    let prompts: Vec<PromptText> = dataset.pairs.iter().map(|p| p.prompt_text()).collect();
    let (rl, report) = ppo_refine(&sft, &rm, &prompts, &ctx.cfg.ppo).map_err(CliError::runtime)?;
    if let PpoStatus::KlCeiling { iter, kl } = &report.status {
        log::warn!("ppo stopped at iteration {iter}: KL {kl:.3} passed the ceiling");
    }
    if let Some(last) = report.log.last() {
        log::info!(
            "ppo: final mean reward {:.4}, KL {:.4}",
            last.mean_reward,
            last.mean_kl
        );
    }
    rl.save(
        &ctx.store.path(artifacts::POLICY_RL),
        &ctx.store.config_hash,
    )
    .map_err(CliError::runtime)?;
    ctx.store.seal(artifacts::POLICY_RL, "ppo")?;
    let log_path = ctx.store.path(artifacts::PPO_LOG);
    write_ppo_log(&report, &log_path).map_err(|e| CliError::io(&log_path, e))?;
    ctx.store.seal(artifacts::PPO_LOG, "ppo")?;
    ctx.store
        .write_json(artifacts::PPO_STATUS, "ppo", &report.status)
}

fn eval_instances(ctx: &Context, corpus: &Corpus) -> Result<Vec<EventInstance>, CliError> {
    let all = match ctx.cfg.eval.setting {
        EvalSetting::Practical => corpus.instances().to_vec(),
        EvalSetting::Full => expand_full_eval(corpus).map_err(CliError::runtime)?,
    };
    let split = match ctx.cfg.eval.split {
        EvalSplit::Train => Some(Split::Train),
        EvalSplit::Dev => Some(Split::Dev),
        EvalSplit::Test => Some(Split::Test),
        EvalSplit::All => None,
    };
    let selected: Vec<EventInstance> = all
        .into_iter()
        .filter(|i| split.is_none_or(|s| i.split == s))
        .filter(|i| ctx.cfg.eval.setting == EvalSetting::Full || i.is_answerable())
        .collect();
    if selected.is_empty() {
        return Err(CliError::Runtime(
            "no instances to evaluate in the chosen split".into(),
        ));
    }
    Ok(selected)
}

fn instance_rows(results: &[InstanceResult]) -> Vec<serde_json::Value> {
    results
        .iter()
        .map(|r| match r {
            Ok(s) => serde_json::to_value(s).expect("score serializes"),
            Err(s) => json!({"id": s.id, "answerable": s.answerable, "skipped": s.reason}),
        })
        .collect()
}

/// Mean S over the answerable instances, with empty or failed questions
/// scoring zero.
fn mean_reward(
    label: &str,
    questions: &[(EventInstance, String)],
    scorer: &Scorer<'_>,
    jobs: usize,
) -> MethodReward {
    let scores = parallel_map(questions, scorer.jobs(jobs), |(inst, q)| {
        if q.trim().is_empty() {
            return None;
        }
        scorer.score(inst, q).ok().map(|c| (c.score, c.cor))
    });
    let n = questions.len().max(1) as f64;
    let (s, c) = scores
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(s, c), (a, b)| (s + a, c + b));
    MethodReward {
        label: label.to_string(),
        mean_reward: s / n,
        mean_cor: c / n,
        scored: scores.iter().flatten().count(),
    }
}

fn eval(ctx: &Context) -> Result<(), CliError> {
    let corpus = ctx.corpus()?;
    let sft = ctx.policy(artifacts::POLICY_SFT)?;
    let rl = ctx.policy(artifacts::POLICY_RL)?;
    let instances = eval_instances(ctx, &corpus)?;
    let qa = ctx.remote_or_scripted(&ctx.cfg.backends.qa)?;
    let ip = ctx.remote_or_scripted(&ctx.cfg.backends.ip)?;
    let embedder = ctx.embedder(&corpus)?;
    let max_len = ctx.cfg.decode.max_len;
    let methods: [(&str, &str, Questioner<'_>); 3] = [
        (
            "Template",
            "template",
            Questioner::Template {
                style: ctx.cfg.eval.template_style,
                ontology: corpus.ontology(),
            },
        ),
        (
            "SFT",
            "sft",
            Questioner::Policy {
                params: &sft,
                max_len,
            },
        ),
        (
            "RLQG",
            "rlqg",
            Questioner::Policy {
                params: &rl,
                max_len,
            },
        ),
    ];
    let scorer = scorer(ctx, &ip, &qa, embedder.as_ref());
    let answerable: Vec<&EventInstance> = instances.iter().filter(|i| i.is_answerable()).collect();
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut rewards = Vec::new();
    for (label, slug, questioner) in &methods {
        let results = score_instances(&instances, questioner, &qa, embedder.as_ref(), ctx.cfg.jobs);
        for s in results.iter().filter_map(|r| r.as_ref().err()) {
            log::warn!("{label}: instance {} skipped: {}", s.id, s.reason);
        }
        let report = aggregate(
            label,
            ctx.cfg.eval.setting,
            &results,
            embedder.id(),
            &ctx.store.config_hash,
        );
        ctx.store.write_jsonl(
            &format!("{}/instances_{slug}.jsonl", artifacts::EVAL_DIR),
            "eval",
            &instance_rows(&results),
        )?;
        let report_name = format!("{}/{slug}.json", artifacts::EVAL_DIR);
        emit_report(
            ReportDoc::Report(&report),
            ReportFormat::Json,
            &ctx.store.path(&report_name),
        )
        .map_err(CliError::runtime)?;
        ctx.store.seal(&report_name, "eval")?;

        let asked: HashMap<&str, &str> = results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .map(|s| (s.id.as_str(), s.question.as_str()))
            .collect();
        let questions: Vec<(EventInstance, String)> = answerable
            .iter()
            .map(|i| {
                (
                    (*i).clone(),
                    asked.get(i.id.as_str()).unwrap_or(&"").to_string(),
                )
            })
            .collect();
        rewards.push(mean_reward(label, &questions, &scorer, ctx.cfg.jobs));
        reports.push(report);
    }
    let table = compare_methods(&reports).map_err(CliError::runtime)?;
    for format in &ctx.cfg.eval.formats {
        let name = format!("{}/report.{}", artifacts::EVAL_DIR, format.extension());
        ctx.store.write_bytes(
            &name,
            "eval",
            render_report(ReportDoc::Table(&table), *format).as_bytes(),
        )?;
    }
    for r in &rewards {
        log::info!(
            "{}: mean reward {:.4}, COR {:.4}",
            r.label,
            r.mean_reward,
            r.mean_cor
        );
    }
    ctx.store.write_json(
        artifacts::REWARDS,
        "eval",
        &RewardSummary {
            split: ctx.cfg.eval.split,
            instances: answerable.len(),
            methods: rewards,
            config_hash: ctx.store.config_hash.clone(),
        },
    )
}

/// Output of `ask`.
#[derive(Debug, Clone, PartialEq)]
pub struct AskResult {
    pub question: String,
    pub recovered: String,
    pub answer: String,
}

pub fn ask(
    ctx: &Context,
    role: &str,
    trigger: &str,
    context: &str,
    policy: PolicyChoice,
) -> Result<AskResult, CliError> {
    let prompt = qg_prompt_text(role, trigger, context);
    let question = match ctx.cfg.backends.qg.kind {
        BackendKind::Toy => {
            let name = match policy {
                PolicyChoice::Sft => artifacts::POLICY_SFT,
                PolicyChoice::Rl => artifacts::POLICY_RL,
            };
            let params = ctx.policy(name)?;
            toymodel::greedy(&params, &prompt, ctx.cfg.decode.max_len)
        }
        _ => {
            let backend = qg_backend(ctx, None, ToyMode::Greedy)?;
            let r = backends::generate(&backend, &FewShotBank::qg().transcript(&prompt));
            if r.is_error() {
                return Err(CliError::Runtime(r.diagnostic.unwrap_or_default()));
            }
            r.text.trim().to_string()
        }
    };
    if question.trim().is_empty() {
        return Err(CliError::Runtime(
            "the policy produced an empty question".into(),
        ));
    }
    let ip = ctx.remote_or_scripted(&ctx.cfg.backends.ip)?;
    let qa = ctx.remote_or_scripted(&ctx.cfg.backends.qa)?;
    let recovered = backends::inverse_recover(&ip, trigger, &question, &FewShotBank::inverse())
        .map_err(CliError::runtime)?;
    let answer = backends::qa_answer(&qa, &question, context, &FewShotBank::qa())
        .map_err(CliError::runtime)?;
    Ok(AskResult {
        question,
        recovered,
        answer: answer.render(),
    })
}
