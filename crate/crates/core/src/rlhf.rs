//! Pairwise reward model and clipped policy-gradient refinement of the
//! question generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::parallel_map;
use crate::preference::PreferenceDataset;
use crate::prompting::PromptText;
use crate::toymodel::network::{backward, forward, token_log_probs, weighted_log_prob_grad};
use crate::toymodel::{
    self, clip_gradient, enumerate_outcomes, sample_ids, Checkpoint, DecodeConfig, HeadWeights,
    ModelError, PolicyParams, TrainConfig, Weights, BOS, EOS, REWARD_FORMAT,
};

#[derive(Debug, thiserror::Error)]
pub enum RlhfError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// `−log σ(r⁺ − r⁻)`, computed as `softplus(−margin)` without overflow.
pub fn rm_loss(r_plus: f64, r_minus: f64) -> f64 {
    softplus(r_minus - r_plus)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `σ(x)` without overflow.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `∂ rm_loss / ∂ r⁺`; the derivative with respect to `r⁻` is its negation.
pub fn rm_loss_grad(r_plus: f64, r_minus: f64) -> f64 {
    -sigmoid(r_minus - r_plus)
}

/// Policy backbone plus a linear head on the decoder state reached after
/// reading `<bos>` and the question tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelParams {
    pub backbone: PolicyParams,
    pub head: HeadWeights,
}

/// Gradient accumulator shaped like [`RewardModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGrads {
    pub weights: Weights,
    pub head: HeadWeights,
}

impl RewardGrads {
    fn norm(&self) -> f64 {
        let h: f64 = self.head.w.iter().map(|x| x * x).sum::<f64>() + self.head.b * self.head.b;
        (self.weights.norm().powi(2) + h).sqrt()
    }

    fn scale(&mut self, a: f64) {
        self.weights.scale(a);
        self.head.w.iter_mut().for_each(|x| *x *= a);
        self.head.b *= a;
    }
}

impl RewardModelParams {
    /// Copies the policy backbone and attaches a zero head.
    pub fn from_policy(policy: &PolicyParams) -> Self {
        Self {
            head: HeadWeights {
                w: vec![0.0; policy.hidden],
                b: 0.0,
            },
            backbone: policy.clone(),
        }
    }

    pub fn zero_grads(&self) -> RewardGrads {
        RewardGrads {
            weights: self.backbone.weights.zeros_like(),
            head: HeadWeights {
                w: vec![0.0; self.head.w.len()],
                b: 0.0,
            },
        }
    }

    fn inputs(question: &[usize]) -> Vec<usize> {
        let body = question.strip_suffix(&[EOS]).unwrap_or(question);
        let mut inputs = Vec::with_capacity(body.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(body);
        inputs
    }

    /// Reward of question ids (a trailing `<eos>` is ignored).
    pub fn score_ids(&self, prompt: &[usize], question: &[usize]) -> f64 {
        let trace = forward(&self.backbone, prompt, &Self::inputs(question), false);
        dot(&self.head.w, trace.final_state()) + self.head.b
    }

    pub fn score(&self, prompt: &str, question: &str) -> f64 {
        let v = &self.backbone.vocab;
        self.score_ids(&v.encode(prompt), &v.encode(question))
    }

    /// Adds `g · ∂r/∂θ` into `grads` and returns `r`.
    pub fn accumulate_grad(
        &self,
        prompt: &[usize],
        question: &[usize],
        g: f64,
        grads: &mut RewardGrads,
    ) -> f64 {
        let trace = forward(&self.backbone, prompt, &Self::inputs(question), false);
        let s = trace.final_state();
        let r = dot(&self.head.w, s) + self.head.b;
        grads
            .head
            .w
            .iter_mut()
            .zip(s)
            .for_each(|(gw, sv)| *gw += g * sv);
        grads.head.b += g;
        let ds: Vec<f64> = self.head.w.iter().map(|w| g * w).collect();
        backward(&self.backbone, &trace, None, Some(&ds), &mut grads.weights);
        r
    }

    fn apply(&mut self, lr: f64, g: &RewardGrads) {
        self.backbone.weights.axpy(-lr, &g.weights);
        self.head
            .w
            .iter_mut()
            .zip(&g.head.w)
            .for_each(|(w, d)| *w -= lr * d);
        self.head.b -= lr * g.head.b;
    }

    fn all_finite(&self) -> bool {
        self.backbone.weights.all_finite()
            && self.head.w.iter().all(|x| x.is_finite())
            && self.head.b.is_finite()
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), ModelError> {
        Checkpoint {
            format: REWARD_FORMAT.into(),
            version: 1,
            config_hash: config_hash.into(),
            hidden: self.backbone.hidden,
            vocab: self.backbone.vocab.clone(),
            shapes: self.backbone.shapes(),
            weights: self.backbone.weights.clone(),
            head: Some(self.head.clone()),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let ckpt = Checkpoint::read(path, REWARD_FORMAT)?;
        let head = ckpt
            .head
            .ok_or_else(|| ModelError::Checkpoint("reward checkpoint has no head".into()))?;
        if head.w.len() != ckpt.hidden {
            return Err(ModelError::Shape(format!(
                "head has {} weights, expected {}",
                head.w.len(),
                ckpt.hidden
            )));
        }
        let backbone = PolicyParams {
            vocab: ckpt.vocab,
            hidden: ckpt.hidden,
            weights: ckpt.weights,
        };
        backbone.validate()?;
        Ok((Self { backbone, head }, ckpt.config_hash))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A tokenized preference triple.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

pub fn encode_pairs(rm: &RewardModelParams, dataset: &PreferenceDataset) -> Vec<EncodedPair> {
    let v = &rm.backbone.vocab;
    dataset
        .pairs
        .iter()
        .map(|p| EncodedPair {
            prompt: v.encode(&p.prompt),
            chosen: v.encode(&p.chosen),
            rejected: v.encode(&p.rejected),
        })
        .collect()
}

/// Summed pair loss over `pairs`, adding its gradient when `grads` is given.
/// Also returns how many pairs the model already orders correctly.
pub fn rm_batch_loss(
    rm: &RewardModelParams,
    pairs: &[EncodedPair],
    mut grads: Option<&mut RewardGrads>,
) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for p in pairs {
        let (rp, rn) = match grads.as_deref_mut() {
            None => (
                rm.score_ids(&p.prompt, &p.chosen),
                rm.score_ids(&p.prompt, &p.rejected),
            ),
            Some(g) => {
                let rp = rm.score_ids(&p.prompt, &p.chosen);
                let rn = rm.score_ids(&p.prompt, &p.rejected);
                let d = rm_loss_grad(rp, rn);
                rm.accumulate_grad(&p.prompt, &p.chosen, d, g);
                rm.accumulate_grad(&p.prompt, &p.rejected, -d, g);
                (rp, rn)
            }
        };
        loss += rm_loss(rp, rn);
        correct += usize::from(rp > rn);
    }
    (loss, correct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    /// Mean pair loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of pairs with `r(p, q⁺) > r(p, q⁻)` after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
}

/// Trains a reward model initialized from `init` on the dataset pairs with
/// minibatch SGD on the mean pair loss.
pub fn train_reward_model(
    init: &PolicyParams,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<(RewardModelParams, RewardReport), RlhfError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(RlhfError::Config("preference dataset is empty".into()));
    }
    let mut rm = RewardModelParams::from_policy(init);
    let pairs = encode_pairs(&rm, dataset);
    let n = pairs.len() as f64;
    let (l0, c0) = rm_batch_loss(&rm, &pairs, None);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = RewardReport {
        initial_loss: l0 / n,
        initial_accuracy: c0 as f64 / n,
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let mut g = rm.zero_grads();
            let (loss, _) = rm_batch_loss(&rm, &batch, Some(&mut g));
            g.scale(1.0 / batch.len() as f64);
            let norm = g.norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(RlhfError::NonFinite(format!(
                    "reward loss {loss}, gradient norm {norm} at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                g.scale(cfg.grad_clip / norm);
            }
            rm.apply(cfg.lr, &g);
            report.steps += 1;
        }
        if !rm.all_finite() {
            return Err(RlhfError::NonFinite(format!(
                "reward model weights after epoch {epoch}"
            )));
        }
        let (l, c) = rm_batch_loss(&rm, &pairs, None);
        log::debug!(
            "reward epoch {epoch}: loss {:.4}, accuracy {:.3}",
            l / n,
            c as f64 / n
        );
        report.epoch_losses.push(l / n);
        report.epoch_accuracy.push(c as f64 / n);
    }
    Ok((rm, report))
}

fn check_vocab(a: &PolicyParams, b: &PolicyParams, what: &str) -> Result<(), RlhfError> {
    if a.vocab != b.vocab {
        return Err(RlhfError::Vocab(format!(
            "{what} use different vocabularies"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlMode {
    /// Enumerates the length-bounded output distribution; fails past `limit` outcomes.
    Exact {
        limit: usize,
    },
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

/// Mean over prompts of `E_{q∼policy}[log policy(q|p) − log reference(q|p)]`
/// for outputs of at most `max_len` tokens, sampled at temperature 1.
pub fn kl_estimate(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompts: &[Vec<usize>],
    max_len: usize,
    mode: KlMode,
) -> Result<f64, RlhfError> {
    check_vocab(policy, reference, "policy and reference")?;
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        total += match mode {
            KlMode::Exact { limit } => {
                let outcomes = enumerate_outcomes(policy, prompt, max_len, limit)?;
                outcomes
                    .iter()
                    .map(|(t, lp)| {
                        let lq = toymodel::sequence_log_prob(reference, prompt, t);
                        lp.exp() * (lp - lq)
                    })
                    .sum::<f64>()
            }
            KlMode::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return Err(RlhfError::Config("samples must be positive".into()));
                }
                let cfg = rollout_decode(max_len, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                (0..samples)
                    .map(|_| {
                        let s = sample_ids(policy, prompt, &cfg, &mut rng);
                        toymodel::sequence_log_prob(policy, prompt, &s.tokens)
                            - toymodel::sequence_log_prob(reference, prompt, &s.tokens)
                    })
                    .sum::<f64>()
                    / samples as f64
            }
        };
    }
    Ok(total / prompts.len() as f64)
}

fn rollout_decode(max_len: usize, seed: u64) -> DecodeConfig {
    DecodeConfig {
        max_len,
        temperature: 1.0,
        top_p: 1.0,
        seed,
        greedy: false,
        ..DecodeConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Weight of the per-token KL penalty against the SFT policy.
    pub mu: f64,
    /// Ratio clip range.
    pub clip_eps: f64,
    pub iterations: usize,
    /// Prompts drawn per iteration; `0` uses all of them.
    pub prompts_per_iter: usize,
    /// Sampled questions per prompt.
    pub rollouts_per_prompt: usize,
    /// Optimization passes over each batch of rollouts.
    pub ppo_epochs: usize,
    /// Rollouts per gradient step; `0` uses the whole batch.
    pub minibatch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Mean rollout KL above which refinement stops.
    pub kl_ceiling: f64,
    pub max_len: usize,
    /// Weight of the old value in the running-mean reward baseline.
    pub baseline_decay: f64,
    pub jobs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            clip_eps: 0.2,
            iterations: 30,
            prompts_per_iter: 64,
            rollouts_per_prompt: 4,
            ppo_epochs: 4,
            minibatch: 0,
            lr: 0.05,
            grad_clip: 5.0,
            seed: 42,
            kl_ceiling: 10.0,
            max_len: 24,
            baseline_decay: 0.9,
            jobs: 1,
        }
    }
}

impl PpoConfig {
    /// Settings documented for 7B-class policies: lr 1e-5, one epoch, batch 8.
    pub fn llm_reference() -> Self {
        Self {
            lr: 1e-5,
            ppo_epochs: 1,
            minibatch: 8,
            max_len: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RlhfError> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(RlhfError::Config("mu must be a non-negative number".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(RlhfError::Config("clip_eps must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RlhfError::Config("lr must be positive".into()));
        }
        if self.rollouts_per_prompt == 0 || self.ppo_epochs == 0 || self.max_len == 0 {
            return Err(RlhfError::Config(
                "rollouts_per_prompt, ppo_epochs and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(RlhfError::Config(
                "baseline_decay must lie in [0, 1)".into(),
            ));
        }
        if !(self.kl_ceiling > 0.0) {
            return Err(RlhfError::Config("kl_ceiling must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled question with everything the surrogate needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Per-token log-probabilities under the sampling policy.
    pub old_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn kl(&self) -> f64 {
        self.old_log_probs
            .iter()
            .zip(&self.ref_log_probs)
            .map(|(a, b)| a - b)
            .sum()
    }

    /// Per-token reward-to-go of the shaped reward: a KL penalty on every
    /// token plus the reward-model score on the last, divided by `1 + μ`.
    pub fn returns(&self, mu: f64) -> Vec<f64> {
        let n = self.tokens.len();
        let mut out = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            let mut r = -mu * (self.old_log_probs[t] - self.ref_log_probs[t]);
            if t + 1 == n {
                r += self.reward;
            }
            acc += r;
            out[t] = acc / (1.0 + mu);
        }
        out
    }
}

/// Running mean of sequence returns. The first batch sets it directly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    pub fn update(&mut self, batch_mean: f64, decay: f64) -> f64 {
        let v = match self.value {
            None => batch_mean,
            Some(b) => decay * b + (1.0 - decay) * batch_mean,
        };
        self.value = Some(v);
        v
    }
}

/// Updates the baseline with this batch and returns per-token advantages.
pub fn advantages(
    rollouts: &[Rollout],
    mu: f64,
    baseline: &mut Baseline,
    decay: f64,
) -> Vec<Vec<f64>> {
    let returns: Vec<Vec<f64>> = rollouts.iter().map(|r| r.returns(mu)).collect();
    let firsts: Vec<f64> = returns.iter().filter_map(|g| g.first().copied()).collect();
    let mean = if firsts.is_empty() {
        0.0
    } else {
        firsts.iter().sum::<f64>() / firsts.len() as f64
    };
    let b = baseline.update(mean, decay);
    returns
        .into_iter()
        .map(|g| g.into_iter().map(|x| x - b).collect())
        .collect()
}

/// Clipped surrogate loss `−(1/N) Σ_t min(ρ_t A_t, clip(ρ_t) A_t)` over all
/// tokens of `batch`, its gradient when `grads` is given, and the fraction
/// of tokens where the clipped branch is active.
pub fn ppo_surrogate(
    params: &PolicyParams,
    batch: &[(&Rollout, &[f64])],
    clip_eps: f64,
    grads: Option<&mut Weights>,
) -> (f64, f64) {
    let n_tokens: usize = batch.iter().map(|(r, _)| r.tokens.len()).sum();
    if n_tokens == 0 {
        return (0.0, 0.0);
    }
    let n = n_tokens as f64;
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut coefs = Vec::with_capacity(batch.len());
    for (r, adv) in batch {
        let lps = token_log_probs(params, &r.prompt, &r.tokens);
        let mut coef = Vec::with_capacity(lps.len());
        for ((lp, old), &a) in lps.iter().zip(&r.old_log_probs).zip(adv.iter()) {
            let rho = (lp - old).exp();
            let unclipped = rho * a;
            let bounded = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            if unclipped <= bounded {
                loss -= unclipped / n;
                coef.push(-unclipped / n);
            } else {
                loss -= bounded / n;
                clipped += 1;
                coef.push(0.0);
            }
        }
        coefs.push(coef);
    }
    if let Some(g) = grads {
        for ((r, _), coef) in batch.iter().zip(&coefs) {
            weighted_log_prob_grad(params, &r.prompt, &r.tokens, coef, g);
        }
    }
    (loss, clipped as f64 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLogEntry {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PpoStatus {
    Completed,
    KlCeiling { iter: usize, kl: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub log: Vec<PpoLogEntry>,
    pub status: PpoStatus,
}

fn collect_rollouts(
    policy: &PolicyParams,
    reference: &PolicyParams,
    rm: &RewardModelParams,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    iter: usize,
) -> Vec<Rollout> {
    let jobs: Vec<(usize, &Vec<usize>)> = prompts.iter().enumerate().collect();
    let per_prompt = parallel_map(&jobs, cfg.jobs, |&(i, prompt)| {
        let seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((iter as u64) << 32)
            .wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dc = rollout_decode(cfg.max_len, seed);
        (0..cfg.rollouts_per_prompt)
            .map(|_| {
                let s = sample_ids(policy, prompt, &dc, &mut rng);
                Rollout {
                    prompt: prompt.clone(),
                    old_log_probs: token_log_probs(policy, prompt, &s.tokens),
                    ref_log_probs: token_log_probs(reference, prompt, &s.tokens),
                    reward: rm.score_ids(prompt, &s.tokens),
                    tokens: s.tokens,
                }
            })
            .collect::<Vec<_>>()
    });
    per_prompt.into_iter().flatten().collect()
}

/// Refines `sft` against the reward model. Each iteration samples fresh
/// questions, shapes rewards with the KL penalty, and takes clipped
/// policy-gradient steps. Stops early when the rollout KL passes the ceiling.
pub fn ppo_refine(
    sft: &PolicyParams,
    rm: &RewardModelParams,
    prompts: &[PromptText],
    cfg: &PpoConfig,
) -> Result<(PolicyParams, PpoReport), RlhfError> {
    cfg.validate()?;
    check_vocab(sft, &rm.backbone, "policy and reward model")?;
    if prompts.is_empty() {
        return Err(RlhfError::Config("no prompts to refine on".into()));
    }
    let encoded: Vec<Vec<usize>> = prompts.iter().map(|p| sft.vocab.encode(&p.text)).collect();
    let mut policy = sft.clone();
    let mut baseline = Baseline::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch_prompts: Vec<Vec<usize>> =
            if cfg.prompts_per_iter == 0 || cfg.prompts_per_iter >= encoded.len() {
                encoded.clone()
            } else {
                encoded
                    .choose_multiple(&mut rng, cfg.prompts_per_iter)
                    .cloned()
                    .collect()
            };
        let rollouts = collect_rollouts(&policy, sft, rm, &batch_prompts, cfg, iter);
        let n = rollouts.len() as f64;
        let mean_reward = rollouts.iter().map(|r| r.reward).sum::<f64>() / n;
        let mean_kl = rollouts.iter().map(Rollout::kl).sum::<f64>() / n;
        if !mean_kl.is_finite() || mean_kl > cfg.kl_ceiling {
            log::warn!(
                "ppo stopped at iteration {iter}: KL {mean_kl:.4} exceeds {}",
                cfg.kl_ceiling
            );
            log.push(PpoLogEntry {
                iter,
                mean_reward,
                mean_kl,
                loss: 0.0,
                clip_fraction: 0.0,
            });
            return Ok((
                policy,
                PpoReport {
                    log,
                    status: PpoStatus::KlCeiling { iter, kl: mean_kl },
                },
            ));
        }
        let adv = advantages(&rollouts, cfg.mu, &mut baseline, cfg.baseline_decay);
        let pairs: Vec<(&Rollout, &[f64])> =
            rollouts.iter().zip(adv.iter().map(Vec::as_slice)).collect();
        let mb = if cfg.minibatch == 0 {
            pairs.len()
        } else {
            cfg.minibatch
        };
        let (mut loss_sum, mut clip_sum, mut steps) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.ppo_epochs {
            for chunk in pairs.chunks(mb) {
                let mut g = policy.weights.zeros_like();
                let (loss, clip_frac) = ppo_surrogate(&policy, chunk, cfg.clip_eps, Some(&mut g));
                if !loss.is_finite() || !g.all_finite() {
                    return Err(RlhfError::NonFinite(format!(
                        "surrogate loss {loss} at iteration {iter}"
                    )));
                }
                clip_gradient(&mut g, cfg.grad_clip);
                policy.weights.axpy(-cfg.lr, &g);
                loss_sum += loss;
                clip_sum += clip_frac;
                steps += 1;
            }
        }
        let entry = PpoLogEntry {
            iter,
            mean_reward,
            mean_kl,
            loss: loss_sum / steps as f64,
            clip_fraction: clip_sum / steps as f64,
        };
        log::debug!(
            "ppo iter {iter}: reward {mean_reward:.4}, kl {mean_kl:.4}, loss {:.4}, clipped {:.3}",
            entry.loss,
            entry.clip_fraction
        );
        log.push(entry);
    }
    Ok((
        policy,
        PpoReport {
            log,
            status: PpoStatus::Completed,
        },
    ))
}

/// Writes the per-iteration log as JSON lines.
pub fn write_ppo_log(report: &PpoReport, path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for e in &report.log {
        out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        assert!((rm_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((rm_loss(3f64.ln(), 0.0) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(rm_loss(50.0, 0.0) < 1e-20);
        assert!(rm_loss(0.0, 800.0).is_finite());
        assert!((rm_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn loss_grad_matches_difference() {
        for (a, b) in [(0.3, -1.2), (5.0, 4.0), (-30.0, 2.0)] {
            let h = 1e-6;
            let fd = (rm_loss(a + h, b) - rm_loss(a - h, b)) / (2.0 * h);
            assert!((fd - rm_loss_grad(a, b)).abs() < 1e-8);
        }
    }

    #[test]
    fn returns_accumulate_penalty_and_terminal_reward() {
        let r = Rollout {
            prompt: vec![],
            tokens: vec![4, 5, EOS],
            old_log_probs: vec![-1.0, -2.0, -0.5],
            ref_log_probs: vec![-1.5, -2.0, -0.25],
            reward: 2.0,
        };
        let g = r.returns(0.1);
        let r2 = (2.0 - 0.1 * -0.25) / 1.1;
        let r1 = r2 + 0.0;
        let r0 = r1 + (-0.1 * 0.5) / 1.1;
        assert!((g[2] - r2).abs() < 1e-12);
        assert!((g[1] - r1).abs() < 1e-12);
        assert!((g[0] - r0).abs() < 1e-12);
        assert!((r.kl() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn baseline_starts_at_first_mean() {
        let mut b = Baseline::default();
        assert_eq!(b.update(2.0, 0.9), 2.0);
        assert!((b.update(4.0, 0.9) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn config_bounds() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig {
            clip_eps: 1.0,
            ..PpoConfig::default()
        }
        .validate()
        .is_err());
        assert!(PpoConfig {
            mu: -1.0,
            ..PpoConfig::default()
        }
        .validate()
        .is_err());
        let r = PpoConfig::llm_reference();
        assert_eq!((r.lr, r.ppo_epochs, r.minibatch), (1e-5, 1, 8));
    }
}
