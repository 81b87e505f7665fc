//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlqg::backends::{
    qa_answer, request_hash, Backend, BackendConfig, CassetteEntry, RemoteBackend,
};
use rlqg::evalharness::ComparisonTable;
use rlqg::preference::{
    select_scores, BuildStats, PairScores, PreferenceDataset, PreferencePair, ScoreParts,
    SelectionConfig,
};
use rlqg::prompting::{parse_answer, FewShotBank, PromptKind, PromptText};
use rlqg::rlhf::{
    kl_estimate, ppo_refine, ppo_surrogate, rm_batch_loss, rm_loss, rm_loss_grad,
    train_reward_model, EncodedPair, KlMode, PpoConfig, RewardModelParams, Rollout,
};
use rlqg::textmetrics::{cor, tokenize};
use rlqg::toymodel::{
    beam_search_ids, finite_difference_check, grad_check, next_token_distribution, sft_train,
    DecodeConfig, PolicyParams, TrainConfig, Vocab, BOS, EOS, PAD,
};
use rlqg_cli::stages::{self, RewardSummary};
use rlqg_cli::{Context, RunConfig};
use serde_json::json;

type Check = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny(words: &str, hidden: usize, seed: u64) -> PolicyParams {
    PolicyParams::init(Vocab::build(&[words]), hidden, seed)
}

// ---------------------------------------------------------------- COR

fn oracle_overlap(a: &[String], b: &[String]) -> usize {
    let mut rest: Vec<&String> = b.iter().collect();
    let mut n = 0;
    for t in a {
        if let Some(pos) = rest.iter().position(|x| *x == t) {
            rest.remove(pos);
            n += 1;
        }
    }
    n
}

fn oracle_cor(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    oracle_overlap(a, b) as f64 / a.len().max(b.len()) as f64
}

fn cor_oracle() -> Check {
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "x1", "y2"];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(0..8);
        (0..n)
            .map(|_| words[rng.gen_range(0..words.len())].to_string())
            .collect()
    };
    for i in 0..1000 {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let got = cor(&a.join(" "), &b.join(" "));
        let want = oracle_cor(&a, &b);
        ensure(got == want, || {
            format!("pair {i}: {a:?} vs {b:?}: {got} != {want}")
        })?;
        let tok = tokenize(&a.join(", "));
        ensure(tok.as_slice() == a.as_slice(), || {
            format!("tokenize changed {a:?}")
        })?;
    }
    Ok(())
}

fn cor_worked_cases() -> Check {
    let cases = [
        ("Marines", "the Marines", 0.5),
        ("Howard Davies", "Callum McCarthy", 0.0),
        ("", "", 1.0),
    ];
    for (g, p, want) in cases {
        let got = cor(g, p);
        ensure(got == want, || {
            format!("cor({g:?}, {p:?}) = {got}, expected {want}")
        })?;
    }
    Ok(())
}

// ------------------------------------------------------- selection gates

fn oracle_select(scores: &[f64], alpha: f64, beta: f64) -> Option<(usize, usize)> {
    if scores.is_empty() {
        return None;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().position(|&s| s == max)?;
    let lo = scores.iter().position(|&s| s == min)?;
    (max > alpha && max - min > beta).then_some((hi, lo))
}

fn selection_suite() -> Check {
    let cfg = SelectionConfig::default();
    ensure((cfg.lambda1, cfg.lambda2) == (0.3, 0.7), || {
        "default weights".into()
    })?;
    let s = cfg.combine(0.8, 1.0);
    ensure((s - 0.94).abs() < 1e-15, || format!("S = {s}"))?;
    let pair = select_scores(&[0.94, 0.10], &cfg).ok_or("{0.94, 0.10} gave no pair")?;
    ensure((pair.chosen, pair.rejected) == (0, 1), || {
        format!("{pair:?}")
    })?;
    ensure((pair.gap - 0.84).abs() < 1e-12, || {
        format!("gap {}", pair.gap)
    })?;
    ensure(select_scores(&[0.60, 0.05], &cfg).is_none(), || {
        "{0.60, 0.05} passed".into()
    })?;
    ensure(select_scores(&[0.90, 0.70], &cfg).is_none(), || {
        "{0.90, 0.70} passed".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let n = rng.gen_range(0..7);
        // coarse grid so ties and exact-threshold values occur
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0..=20u32)) * 0.05)
            .collect();
        let got = select_scores(&scores, &cfg).map(|s| (s.chosen, s.rejected));
        let want = oracle_select(&scores, cfg.alpha, cfg.beta);
        ensure(got == want, || {
            format!("set {i} {scores:?}: {got:?} != {want:?}")
        })?;
    }
    Ok(())
}

// -------------------------------------------------------------- rm_loss

fn rm_loss_values() -> Check {
    let l0 = rm_loss(0.0, 0.0);
    ensure((l0 - std::f64::consts::LN_2).abs() <= 1e-9, || {
        format!("rm_loss(0,0) = {l0}")
    })?;
    let l1 = rm_loss(3f64.ln(), 0.0);
    ensure((l1 - (4.0f64 / 3.0).ln()).abs() <= 1e-9, || {
        format!("margin ln 3: {l1}")
    })?;
    for (a, b) in [(0.7, -0.2), (3.0, 5.5), (-2.0, 1.0)] {
        let forward = rm_loss(a, b);
        let flipped = rm_loss(b, a);
        // softplus(x) - softplus(-x) = x
        ensure(((flipped - forward) - (a - b)).abs() < 1e-12, || {
            format!("flip at ({a}, {b})")
        })?;
        ensure((forward > flipped) == (b > a), || {
            format!("order at ({a}, {b})")
        })?;
    }
    Ok(())
}

// -------------------------------------------------------- gradient checks

fn rm_full_check(rm: &RewardModelParams, pairs: &[EncodedPair]) -> f64 {
    let mut g = rm.zero_grads();
    rm_batch_loss(rm, pairs, Some(&mut g));
    let backbone = finite_difference_check(&rm.backbone.weights, &g.weights, 1e-5, |w| {
        let mut m = rm.clone();
        m.backbone.weights = w.clone();
        rm_batch_loss(&m, pairs, None).0
    });
    let mut worst = backbone;
    let eps = 1e-5;
    for i in 0..=rm.head.w.len() {
        let bump = |d: f64| {
            let mut m = rm.clone();
            if i < m.head.w.len() {
                m.head.w[i] += d;
            } else {
                m.head.b += d;
            }
            rm_batch_loss(&m, pairs, None).0
        };
        let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
        let a = if i < g.head.w.len() {
            g.head.w[i]
        } else {
            g.head.b
        };
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7));
    }
    worst
}

fn surrogate_check(p: &PolicyParams) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rollouts = Vec::new();
    let mut advs = Vec::new();
    for k in 0..4 {
        let prompt = p.vocab.encode(["a b", "c", "b c a", "a"][k]);
        let mut tokens: Vec<usize> = (0..3).map(|_| rng.gen_range(3..p.vocab.len())).collect();
        tokens.push(EOS);
        let lp = toymodel_token_log_probs(p, &prompt, &tokens);
        // ratios either well inside the clip band or well outside it
        let old: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(t, x)| {
                x - if (t + k) % 2 == 0 { 0.04 } else { 0.6 } * if t % 3 == 0 { -1.0 } else { 1.0 }
            })
            .collect();
        let adv: Vec<f64> = (0..tokens.len())
            .map(|t| if (t + k) % 3 == 0 { -0.8 } else { 1.3 })
            .collect();
        rollouts.push(Rollout {
            prompt,
            tokens,
            old_log_probs: old,
            ref_log_probs: lp,
            reward: 0.0,
        });
        advs.push(adv);
    }
    let batch: Vec<(&Rollout, &[f64])> = rollouts
        .iter()
        .zip(advs.iter().map(Vec::as_slice))
        .collect();
    let mut g = p.weights.zeros_like();
    let (_, clip_fraction) = ppo_surrogate(p, &batch, 0.2, Some(&mut g));
    if clip_fraction == 0.0 || clip_fraction == 1.0 {
        return Err(format!(
            "fixture should mix branches, clip fraction {clip_fraction}"
        ));
    }
    Ok(finite_difference_check(&p.weights, &g, 1e-5, |w| {
        let mut q = p.clone();
        q.weights = w.clone();
        ppo_surrogate(&q, &batch, 0.2, None).0
    }))
}

/// Per-token log-probabilities via the public next-token distribution.
fn toymodel_token_log_probs(p: &PolicyParams, prompt: &[usize], tokens: &[usize]) -> Vec<f64> {
    (0..tokens.len())
        .map(|t| next_token_distribution(p, prompt, &tokens[..t])[tokens[t]].ln())
        .collect()
}

fn gradient_checks() -> Check {
    let p = tiny("a b c", 8, 42);
    ensure(p.n_params() <= 5000, || {
        format!("{} parameters", p.n_params())
    })?;
    let batch = vec![
        ("a b".to_string(), "c a".to_string()),
        ("c".to_string(), "b b a".to_string()),
        ("b c a".to_string(), String::new()),
    ];
    let ce = grad_check(&p, &batch, 1e-5);
    ensure(ce < 1e-4, || format!("cross-entropy rel err {ce:e}"))?;

    let mut rm = RewardModelParams::from_policy(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    rm.head
        .w
        .iter_mut()
        .for_each(|w| *w = rng.gen_range(-0.5..0.5));
    rm.head.b = 0.1;
    let v = &p.vocab;
    let pairs = vec![
        EncodedPair {
            prompt: v.encode("a b"),
            chosen: v.encode("c a"),
            rejected: v.encode("b"),
        },
        EncodedPair {
            prompt: v.encode("c"),
            chosen: v.encode("a"),
            rejected: v.encode("a b c"),
        },
    ];
    let rmg = rm_full_check(&rm, &pairs);
    ensure(rmg < 1e-4, || format!("reward loss rel err {rmg:e}"))?;
    for (a, b) in [(0.4, -0.3), (2.0, 2.5)] {
        let h = 1e-6;
        let fd = (rm_loss(a + h, b) - rm_loss(a - h, b)) / (2.0 * h);
        let an = rm_loss_grad(a, b);
        ensure((fd - an).abs() / an.abs() < 1e-4, || {
            format!("scalar rm grad at ({a}, {b})")
        })?;
    }

    let ppo = surrogate_check(&p)?;
    ensure(ppo < 1e-4, || format!("surrogate rel err {ppo:e}"))
}

// ----------------------------------------------------------------- beam

/// Exhaustive walk over every bounded output with its log-probability.
fn exhaustive(p: &PolicyParams, prompt: &[usize], max_len: usize) -> Vec<(Vec<usize>, f64, bool)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let dist = next_token_distribution(p, prompt, &prefix);
        for (v, &pv) in dist.iter().enumerate() {
            if v == BOS || v == PAD {
                continue;
            }
            let mut next = prefix.clone();
            next.push(v);
            let s = lp + pv.ln();
            if v == EOS {
                out.push((next, s, true));
            } else if next.len() == max_len {
                out.push((next, s, false));
            } else {
                stack.push((next, s));
            }
        }
    }
    out
}

fn beam_oracle() -> Check {
    for seed in [1, 7, 42] {
        let p = tiny("a b", 4, seed);
        ensure(p.vocab.n_emittable() <= 5, || "vocabulary too large".into())?;
        let prompt = p.vocab.encode("b a");
        let all = exhaustive(&p, &prompt, 4);
        let total: f64 = all.iter().map(|x| x.1.exp()).sum();
        ensure((total - 1.0).abs() <= 1e-6, || {
            format!("seed {seed}: mass {total}")
        })?;
        let mut done: Vec<(Vec<usize>, f64)> = all
            .iter()
            .filter(|x| x.2)
            .map(|x| (x.0.clone(), x.1))
            .collect();
        done.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let cfg = DecodeConfig {
            max_len: 4,
            num_beams: 8,
            num_return: 3,
            ..DecodeConfig::default()
        };
        let beam = beam_search_ids(&p, &prompt, &cfg);
        ensure(beam.hypotheses.len() == 3, || {
            format!("seed {seed}: {} hypotheses", beam.hypotheses.len())
        })?;
        for (h, (seq, lp)) in beam.hypotheses.iter().zip(&done) {
            ensure(&h.tokens == seq && (h.score - lp).abs() < 1e-9, || {
                format!(
                    "seed {seed}: beam {:?} {} vs oracle {seq:?} {lp}",
                    h.tokens, h.score
                )
            })?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- KL

fn kl_properties() -> Check {
    let f = tiny("a b", 4, 11);
    let prompts = vec![f.vocab.encode("a"), f.vocab.encode("b a b")];
    let mode = KlMode::Exact { limit: 100_000 };
    let self_kl = kl_estimate(&f, &f, &prompts, 4, mode).map_err(|e| e.to_string())?;
    ensure(self_kl.abs() < 1e-12, || format!("KL(f, f) = {self_kl}"))?;

    // output-bias-only models: every step draws from a fixed softmax, so the
    // bounded-length KL has a closed form
    let biased = |bias: [f64; 4]| {
        let mut p = tiny("a b", 3, 0);
        p.weights.fill(0.0);
        for (id, b) in [EOS, 3, 4, 5].iter().zip(bias) {
            p.weights.out_b[*id] = b;
        }
        p
    };
    let softmax = |b: [f64; 4]| {
        let z: f64 = b.iter().map(|x| x.exp()).sum();
        b.map(|x| x.exp() / z)
    };
    let (bp, bq) = ([0.3, -0.2, 0.8, 0.1], [-0.5, 0.4, 0.0, 0.9]);
    let (pp, pq) = (softmax(bp), softmax(bq));
    let step_kl: f64 = pp.iter().zip(&pq).map(|(a, b)| a * (a / b).ln()).sum();
    for max_len in 1..=4 {
        let reach: f64 = (0..max_len).map(|t| (1.0 - pp[0]).powi(t as i32)).sum();
        let closed = step_kl * reach;
        let got = kl_estimate(&biased(bp), &biased(bq), &prompts[..1], max_len, mode)
            .map_err(|e| e.to_string())?;
        ensure((got - closed).abs() <= 1e-9, || {
            format!("L={max_len}: {got} vs closed form {closed}")
        })?;
    }

    for seed in 0..20 {
        let a = tiny("a b", 4, seed);
        let b = tiny("a b", 4, seed + 100);
        let kl = kl_estimate(&a, &b, &prompts, 3, mode).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("seed {seed}: KL {kl} < 0"))?;
    }
    Ok(())
}

// ------------------------------------------------------- reward model

fn pair(prompt: &str, chosen: &str, rejected: &str, i: usize) -> PreferencePair {
    let parts = ScoreParts {
        semsim: 0.0,
        cor: 0.0,
        s: 0.0,
    };
    PreferencePair {
        prompt: prompt.into(),
        chosen: chosen.into(),
        rejected: rejected.into(),
        gap: 1.0,
        instance_id: format!("p{i}"),
        chosen_index: 0,
        rejected_index: 1,
        scores: PairScores {
            chosen: parts,
            rejected: parts,
        },
    }
}

fn separable_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let roles = ["attacker", "victim", "place", "instrument", "target"];
    let triggers = ["attack", "fired", "war", "bombing", "shot"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let role = roles[rng.gen_range(0..roles.len())];
            let trig = triggers[rng.gen_range(0..triggers.len())];
            let prompt = format!("role: {role} trigger: {trig} context: the {trig} happened");
            // chosen questions mention the trigger; rejected ones never do
            let chosen = format!("who is the {role} in the {trig} event ?");
            let rejected = format!("what is {role} ?");
            pair(&prompt, &chosen, &rejected, i)
        })
        .collect()
}

fn reward_model_learning() -> Check {
    let pairs = separable_pairs(200, 42);
    let texts: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.prompt.clone(), p.chosen.clone(), p.rejected.clone()])
        .collect();
    let init = PolicyParams::init(Vocab::build(&texts), 16, 42);
    let dataset = PreferenceDataset {
        pairs,
        config: SelectionConfig::default(),
        stats: BuildStats::default(),
    };
    let cfg = TrainConfig {
        lr: 0.05,
        epochs: 5,
        ..TrainConfig::toy()
    };
    let (rm, report) = train_reward_model(&init, &dataset, &cfg).map_err(|e| e.to_string())?;
    let acc = *report.epoch_accuracy.last().ok_or("no epochs")?;
    ensure(acc >= 0.95, || format!("training accuracy {acc}"))?;
    let held_out = separable_pairs(100, 43);
    let correct = held_out
        .iter()
        .filter(|p| rm.score(&p.prompt, &p.chosen) > rm.score(&p.prompt, &p.rejected))
        .count();
    ensure(correct >= 95, || format!("held-out accuracy {correct}/100"))
}

// ------------------------------------------------------------ PPO trend

fn run_e2e(dir: &Path) -> Result<Context, String> {
    let mut cfg = RunConfig {
        out: dir.to_path_buf(),
        jobs: 4,
        offline: true,
        ..RunConfig::default()
    };
    cfg.finish().map_err(|e| e.to_string())?;
    let ctx = Context::new(cfg, false).map_err(|e| e.to_string())?;
    stages::e2e(&ctx).map_err(|e| e.to_string())?;
    Ok(ctx)
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn ppo_trend() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let ctx = run_e2e(a.path())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(300), || {
        format!("e2e took {elapsed:?}")
    })?;
    ensure(
        ctx.cfg.corpus.n_instances == 300 && ctx.cfg.seed == 42,
        || "not the bundled setup".into(),
    )?;

    let text = std::fs::read_to_string(ctx.store.path(rlqg_cli::artifacts::REWARDS))
        .map_err(|e| e.to_string())?;
    let rewards: RewardSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let by = |label: &str| {
        rewards
            .methods
            .iter()
            .find(|m| m.label == label)
            .map(|m| m.mean_reward)
    };
    let (sft, rl) = (by("SFT").ok_or("no SFT")?, by("RLQG").ok_or("no RLQG")?);
    ensure(rl >= sft + 0.05, || {
        format!("mean reward RLQG {rl:.4} vs SFT {sft:.4}")
    })?;

    let text =
        std::fs::read_to_string(ctx.store.path("eval/report.json")).map_err(|e| e.to_string())?;
    let table: ComparisonTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let cor = |label: &str| table.rows.iter().find(|r| r.label == label).map(|r| r.cor);
    let (t, s, r) = (
        cor("Template").ok_or("no Template")?,
        cor("SFT").ok_or("no SFT")?,
        cor("RLQG").ok_or("no RLQG")?,
    );
    ensure(r >= s && s >= t, || {
        format!("COR ordering RLQG {r:.2}, SFT {s:.2}, Template {t:.2}")
    })?;

    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_e2e(b.path())?;
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "artifact sets differ".into())?;
    for (name, bytes) in &ta {
        ensure(tb[name] == *bytes, || {
            format!("{name} differs between runs")
        })?;
    }
    println!(
        "     e2e {:.1}s; reward SFT {sft:.4} RLQG {rl:.4}; COR Template {t:.2} SFT {s:.2} RLQG {r:.2}; {} artifacts identical",
        elapsed.as_secs_f64(),
        ta.len()
    );
    Ok(())
}

// ----------------------------------------------------- protocol fidelity

const QA_SYSTEM: &str = "You are a precise and concise assistant. Your task is to extract some words based directly on the provided context to answer the given questions. Please wrap your answer with the following tags: [ANS] [/ANS]. If a question has multiple correct answers within the context, list them all, separated by commas. If there is no answer in the context, just reply [ANS] None [/ANS]. Do NOT add any introductory phrases, explanations, or additional information outside of the given context.";

const QA_SHOTS: [(&str, &str); 5] = [
    ("question: Who made the battle in Baghdad? context: US Secretary of Defense Donald Rumsfeld dismissed worries that there were insufficient forces in the Gulf region if the battle for Baghdad goes wrong.", "[ANS] US [/ANS]"),
    ("question: Who was nominated? context: Senator Christopher Dodd of Connecticut made the announcement today that he would not be the 10th candidate for the nomination.", "[ANS] candidate [/ANS]"),
    ("question: Who is person in former event? context: We're talking about possibilities of full scale war with former Congressman Tom Andrews, Democrat of Maine.", "[ANS] Tom Andrews [/ANS]"),
    ("question: Who died that cause Clinton suffered greatly? context: Clinton suffered greatly over the 19 Rangers that died, 18 on the 3rd of October and Matt Reersen (ph) three days later.", "[ANS] Rangers, Matt Reersen [/ANS]"),
    ("question: Where did the election takes place? context: He lost an election to a dead man.", "[ANS] None [/ANS]"),
];

fn protocol_fidelity() -> Check {
    let question = "Who fired in the firefight event?";
    let context = "Marines fired on the crowd during a firefight.";
    let user = format!("question: {question} context: {context}");

    let mut expected = format!("System:\n{QA_SYSTEM}\n");
    for (u, a) in QA_SHOTS {
        expected.push_str(&format!("\nUser:\n{u}\nAssistant:\n{a}\n"));
    }
    expected.push_str(&format!("\nUser:\n{user}\n"));
    let rendered = FewShotBank::qa().transcript(&user).render();
    ensure(rendered == expected, || {
        "rendered transcript layout differs".into()
    })?;

    // the cassette only answers a request whose body matches this one exactly
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cassette = dir.path().join("qa.jsonl");
    let mut cfg = BackendConfig::remote("http://127.0.0.1:9", "qa-model");
    cfg.offline = true;
    cfg.cassette = Some(cassette.clone());
    let mut messages = vec![json!({"role": "system", "content": QA_SYSTEM})];
    for (u, a) in QA_SHOTS {
        messages.push(json!({"role": "user", "content": u}));
        messages.push(json!({"role": "assistant", "content": a}));
    }
    messages.push(json!({"role": "user", "content": user}));
    let body = json!({
        "model": "qa-model",
        "messages": messages,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
    });
    let entry = CassetteEntry {
        request_hash: request_hash(&body),
        transcript: body,
        response: json!({"choices": [{"message": {"role": "assistant", "content": "[ANS] Marines [/ANS]"}, "finish_reason": "stop"}]}),
        timestamp: 0,
    };
    std::fs::write(&cassette, serde_json::to_string(&entry).unwrap() + "\n")
        .map_err(|e| e.to_string())?;
    let backend = Backend::Remote(RemoteBackend::new(&cfg).map_err(|e| e.to_string())?);
    let answer = qa_answer(&backend, question, context, &FewShotBank::qa())
        .map_err(|e| format!("replay failed: {e}"))?;
    ensure(answer.values == ["Marines"], || {
        format!("answer {:?}", answer.values)
    })?;

    let us = parse_answer("[ANS] US [/ANS]");
    ensure(us.values == ["US"] && !us.untagged, || format!("{us:?}"))?;
    let multi = parse_answer("[ANS] Rangers, Matt Reersen [/ANS]");
    ensure(multi.values == ["Rangers", "Matt Reersen"], || {
        format!("{multi:?}")
    })?;
    let none = parse_answer("[ANS] None [/ANS]");
    ensure(
        none.values.is_empty() && none.is_none() && !none.untagged,
        || format!("{none:?}"),
    )
}

// ------------------------------------------------------ large-mu limit

fn large_mu_limit() -> Check {
    let pairs: Vec<(String, String)> = [("x y", "a b"), ("y", "b"), ("x", "a a"), ("y x", "b a")]
        .iter()
        .map(|(p, t)| (p.to_string(), t.to_string()))
        .collect();
    let cfg = TrainConfig {
        hidden: 4,
        epochs: 20,
        lr: 0.1,
        ..TrainConfig::toy()
    };
    let (sft, _) = sft_train(&pairs, &cfg).map_err(|e| e.to_string())?;
    let mut rm = RewardModelParams::from_policy(&sft);
    rm.head
        .w
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w = if i % 2 == 0 { 3.0 } else { -2.0 });
    let prompts: Vec<PromptText> = pairs
        .iter()
        .map(|(p, _)| PromptText {
            text: p.clone(),
            kind: PromptKind::Qg,
            provenance: String::new(),
        })
        .collect();
    let ppo = PpoConfig {
        mu: 1e6,
        iterations: 10,
        prompts_per_iter: 0,
        rollouts_per_prompt: 8,
        lr: 0.05,
        max_len: 3,
        ..PpoConfig::default()
    };
    let (rl, _) = ppo_refine(&sft, &rm, &prompts, &ppo).map_err(|e| e.to_string())?;
    let ids: Vec<Vec<usize>> = pairs.iter().map(|(p, _)| sft.vocab.encode(p)).collect();
    let kl = kl_estimate(&rl, &sft, &ids, 3, KlMode::Exact { limit: 100_000 })
        .map_err(|e| e.to_string())?;
    ensure(kl < 1e-3, || format!("exact KL {kl:e}"))?;

    // sanity: the same run with a small coefficient does move the policy
    let (moved, _) = ppo_refine(&sft, &rm, &prompts, &PpoConfig { mu: 0.1, ..ppo })
        .map_err(|e| e.to_string())?;
    let kl_small = kl_estimate(&moved, &sft, &ids, 3, KlMode::Exact { limit: 100_000 })
        .map_err(|e| e.to_string())?;
    ensure(kl_small > kl, || {
        format!("mu = 0.1 gave KL {kl_small:e}, mu = 1e6 gave {kl:e}")
    })
}

// ------------------------------------------------------------- harness

fn main() {
    let criteria: Vec<Criterion> = vec![
        (
            "COR oracle equivalence (1,000 pairs)",
            Duration::from_secs(1),
            cor_oracle,
        ),
        ("COR worked cases", Duration::from_secs(1), cor_worked_cases),
        (
            "S_q arithmetic, gates and 10,000-set oracle",
            Duration::from_secs(5),
            selection_suite,
        ),
        (
            "rm_loss values and antisymmetry",
            Duration::from_secs(1),
            rm_loss_values,
        ),
        (
            "gradient checks: CE, rm_loss, PPO surrogate",
            Duration::from_secs(30),
            gradient_checks,
        ),
        (
            "beam search vs exhaustive top-3, normalization",
            Duration::from_secs(10),
            beam_oracle,
        ),
        ("KL properties", Duration::from_secs(10), kl_properties),
        (
            "reward-model learning (200 separable pairs)",
            Duration::from_secs(60),
            reward_model_learning,
        ),
        ("PPO trend end to end", Duration::from_secs(600), ppo_trend),
        (
            "QA protocol fidelity",
            Duration::from_secs(5),
            protocol_fidelity,
        ),
        (
            "large-mu PPO limit",
            Duration::from_secs(60),
            large_mu_limit,
        ),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let elapsed = started.elapsed();
        let result = result.and_then(|()| {
            ensure(elapsed <= budget, || {
                format!("took {elapsed:?}, budget {budget:?}")
            })
        });
        match result {
            Ok(()) => println!("PASS {name} ({:.2}s)", elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
