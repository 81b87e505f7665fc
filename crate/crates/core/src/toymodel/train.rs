use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::weighted_log_prob_grad;
use super::params::{PolicyParams, Weights};
use super::vocab::{Vocab, EOS};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Hidden width used when parameters are created from scratch.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

pub const PRESET_NAMES: [&str; 4] = ["toy", "llm-sft", "llm-rl", "llm-rm"];

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 1e-2,
            epochs: 5,
            batch_size: 8,
            grad_clip: 5.0,
            seed: 42,
            hidden: 32,
        }
    }

    /// Reference fine-tuning settings for 7B-class models.
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let base = Self::toy();
        match name {
            "toy" => Ok(base),
            "llm-sft" => Ok(Self {
                lr: 5e-5,
                epochs: 3,
                batch_size: 16,
                ..base
            }),
            "llm-rl" => Ok(Self {
                lr: 1e-5,
                epochs: 1,
                batch_size: 8,
                ..base
            }),
            "llm-rm" => Ok(Self {
                lr: 1e-6,
                epochs: 1,
                batch_size: 8,
                ..base
            }),
            other => Err(ModelError::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config("lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(ModelError::Config(
                "epochs, batch_size and hidden must be positive".into(),
            ));
        }
        if self.hidden > 128 {
            return Err(ModelError::Config("hidden must be at most 128".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(ModelError::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// A tokenized (prompt, target) pair; `target` ends in `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(vocab: &Vocab, prompt: &str, target: &str) -> Self {
        let mut t = vocab.encode(target);
        t.push(EOS);
        Self {
            prompt: vocab.encode(prompt),
            target: t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy over the data before any update.
    pub initial_loss: f64,
    /// Mean per-token cross-entropy accumulated during each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Summed token cross-entropy of a batch and, optionally, its gradient.
pub fn cross_entropy(
    params: &PolicyParams,
    batch: &[Example],
    grads: Option<&mut Weights>,
) -> (f64, usize) {
    let mut loss = 0.0;
    let mut tokens = 0;
    match grads {
        Some(g) => {
            for ex in batch {
                let coef = vec![-1.0; ex.target.len()];
                let lps = weighted_log_prob_grad(params, &ex.prompt, &ex.target, &coef, g);
                loss -= lps.iter().sum::<f64>();
                tokens += lps.len();
            }
        }
        None => {
            for ex in batch {
                loss -= super::decode::sequence_log_prob(params, &ex.prompt, &ex.target);
                tokens += ex.target.len();
            }
        }
    }
    (loss, tokens)
}

pub fn mean_token_loss(params: &PolicyParams, data: &[Example]) -> f64 {
    let (l, n) = cross_entropy(params, data, None);
    l / n.max(1) as f64
}

/// Scales `g` down to norm `clip` when it is larger. Returns the pre-clip norm.
pub fn clip_gradient(g: &mut Weights, clip: f64) -> f64 {
    let norm = g.norm();
    if clip > 0.0 && norm > clip {
        g.scale(clip / norm);
    }
    norm
}

/// Builds a vocabulary from the pairs, initializes from `cfg.seed` and trains.
pub fn sft_train(
    pairs: &[(String, String)],
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainReport), ModelError> {
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|(p, t)| [p.as_str(), t.as_str()])
        .collect();
    let vocab = Vocab::build(&texts);
    let params = PolicyParams::init(vocab, cfg.hidden, cfg.seed);
    sft_continue(params, pairs, cfg)
}

/// Minibatch SGD on summed token cross-entropy, averaged per sequence.
pub fn sft_continue(
    mut params: PolicyParams,
    pairs: &[(String, String)],
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainReport), ModelError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ModelError::Config("no training pairs".into()));
    }
    let data: Vec<Example> = pairs
        .iter()
        .map(|(p, t)| Example::new(&params.vocab, p, t))
        .collect();
    let initial_loss = mean_token_loss(&params, &data);
    if !initial_loss.is_finite() {
        return Err(ModelError::NonFinite("initial loss is not finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut g = params.weights.zeros_like();
            let (loss, n) = cross_entropy(&params, &batch, Some(&mut g));
            if !loss.is_finite() || !g.all_finite() {
                return Err(ModelError::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, step {steps}"
                )));
            }
            g.scale(1.0 / batch.len() as f64);
            clip_gradient(&mut g, cfg.grad_clip);
            params.weights.axpy(-cfg.lr, &g);
            sum += loss;
            count += n;
            steps += 1;
        }
        let mean = sum / count as f64;
        log::debug!("sft epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            epoch_losses,
            steps,
        },
    ))
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every parameter. The denominator is floored at `1e-7` so
/// parameters with vanishing gradients do not dominate.
pub fn finite_difference_check<F>(
    weights: &Weights,
    analytic: &Weights,
    epsilon: f64,
    loss: F,
) -> f64
where
    F: Fn(&Weights) -> f64,
{
    let mut w = weights.clone();
    let mut worst: f64 = 0.0;
    for i in 0..w.n_params() {
        let orig = w.get(i);
        w.set(i, orig + epsilon);
        let up = loss(&w);
        w.set(i, orig - epsilon);
        let down = loss(&w);
        w.set(i, orig);
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.get(i);
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        let err = (a - numeric).abs() / denom;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

/// Finite-difference check of the summed cross-entropy gradient on `batch`.
pub fn grad_check(params: &PolicyParams, batch: &[(String, String)], epsilon: f64) -> f64 {
    let data: Vec<Example> = batch
        .iter()
        .map(|(p, t)| Example::new(&params.vocab, p, t))
        .collect();
    let mut g = params.weights.zeros_like();
    cross_entropy(params, &data, Some(&mut g));
    finite_difference_check(&params.weights, &g, epsilon, |w| {
        let mut p = params.clone();
        p.weights = w.clone();
        cross_entropy(&p, &data, None).0
    })
}
