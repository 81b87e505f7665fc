use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{decoder_step, encode, next_log_probs, token_log_probs};
use super::params::PolicyParams;
use super::vocab::{BOS, EOS};
use super::ModelError;

/// Decoding settings. `max_len` counts generated tokens including `<eos>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub num_beams: usize,
    pub num_return: usize,
    pub seed: u64,
    /// Argmax at every step instead of sampling.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 24,
            temperature: 0.6,
            top_p: 0.9,
            num_beams: 10,
            num_return: 5,
            seed: 42,
            greedy: false,
        }
    }
}

impl DecodeConfig {
    /// Generation settings used with hosted LLMs.
    pub fn llm_reference() -> Self {
        Self {
            max_len: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.num_return == 0 || self.num_return > self.num_beams {
            return bad("need 0 < num_return <= num_beams");
        }
        Ok(())
    }
}

/// Sum of log-probabilities of `output`'s tokens followed by `<eos>`.
pub fn log_prob(params: &PolicyParams, prompt: &str, output: &str) -> f64 {
    let mut ids = params.vocab.encode(output);
    ids.push(EOS);
    sequence_log_prob(params, &params.vocab.encode(prompt), &ids)
}

/// Log-probability of an id sequence exactly as given (no `<eos>` appended).
pub fn sequence_log_prob(params: &PolicyParams, prompt: &[usize], outputs: &[usize]) -> f64 {
    token_log_probs(params, prompt, outputs).iter().sum()
}

/// One draw from the length-bounded policy distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    /// Generated ids; ends in `<eos>` iff `finished`.
    pub tokens: Vec<usize>,
    pub finished: bool,
}

/// Draws one sequence using `rng`. Honors `greedy`, `temperature` and `top_p`.
pub fn sample_ids<R: Rng>(
    params: &PolicyParams,
    prompt: &[usize],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Sampled {
    let mut state = encode(params, prompt).last().to_vec();
    let mut prev = BOS;
    let mut tokens = Vec::new();
    while tokens.len() < cfg.max_len {
        state = decoder_step(params, &state, prev);
        let next = if cfg.greedy {
            argmax(&next_log_probs(params, &state, 1.0))
        } else {
            let lp = next_log_probs(params, &state, cfg.temperature);
            nucleus_draw(&lp, cfg.top_p, rng)
        };
        tokens.push(next);
        if next == EOS {
            return Sampled {
                tokens,
                finished: true,
            };
        }
        prev = next;
    }
    Sampled {
        tokens,
        finished: false,
    }
}

/// Samples a text, seeded by `cfg.seed`.
pub fn sample(params: &PolicyParams, prompt: &str, cfg: &DecodeConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = sample_ids(params, &params.vocab.encode(prompt), cfg, &mut rng);
    params.vocab.decode(&s.tokens)
}

pub fn greedy(params: &PolicyParams, prompt: &str, max_len: usize) -> String {
    let cfg = DecodeConfig {
        max_len,
        greedy: true,
        ..DecodeConfig::default()
    };
    sample(params, prompt, &cfg)
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Keeps the smallest most-probable prefix with mass ≥ `top_p`, renormalizes
/// and draws from it.
fn nucleus_draw<R: Rng>(lp: &[f64], top_p: f64, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
    order.sort_by(|&a, &b| {
        lp[b]
            .partial_cmp(&lp[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        let p = lp[i].exp();
        kept.push((i, p));
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    let mut u = rng.gen::<f64>() * mass;
    for &(i, p) in &kept {
        if u < p {
            return i;
        }
        u -= p;
    }
    kept.last().map(|k| k.0).unwrap_or(EOS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    /// Includes the final `<eos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub hypotheses: Vec<Hypothesis>,
    /// Fewer than `num_return` completed sequences were found.
    pub short: bool,
}

struct Alive {
    tokens: Vec<usize>,
    state: Vec<f64>,
    score: f64,
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Deterministic beam search over completed (`<eos>`-terminated) sequences,
/// scored by untempered log-probability. Ties break on the id sequence.
pub fn beam_search(params: &PolicyParams, prompt: &str, cfg: &DecodeConfig) -> BeamResult {
    beam_search_ids(params, &params.vocab.encode(prompt), cfg)
}

pub fn beam_search_ids(params: &PolicyParams, prompt: &[usize], cfg: &DecodeConfig) -> BeamResult {
    let n = cfg.num_return;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        state: encode(params, prompt).last().to_vec(),
        score: 0.0,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    while !alive.is_empty() {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (k, a) in alive.iter().enumerate() {
            let prev = a.tokens.last().copied().unwrap_or(BOS);
            let s = decoder_step(params, &a.state, prev);
            let lp = next_log_probs(params, &s, 1.0);
            if a.tokens.len() + 1 >= cfg.max_len {
                cands.push((k, EOS, a.score + lp[EOS]));
            } else {
                for v in params.vocab.emittable() {
                    cands.push((k, v, a.score + lp[v]));
                }
            }
            states.push(s);
        }
        let seq = |&(k, v, _): &(usize, usize, f64)| {
            let mut t = alive[k].tokens.clone();
            t.push(v);
            t
        };
        let mut keyed: Vec<(Vec<usize>, (usize, usize, f64))> =
            cands.iter().map(|c| (seq(c), *c)).collect();
        keyed.sort_by(|a, b| rank((a.1 .2, &a.0), (b.1 .2, &b.0)));
        keyed.truncate(cfg.num_beams);
        let mut next = Vec::new();
        for (tokens, (k, v, score)) in keyed {
            if v == EOS {
                finished.push((tokens, score));
            } else {
                next.push(Alive {
                    tokens,
                    state: states[k].clone(),
                    score,
                });
            }
        }
        finished.sort_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)));
        alive = next;
        if finished.len() >= n {
            let nth = finished[n - 1].1;
            let best_alive = alive
                .iter()
                .map(|a| a.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_alive < nth {
                break;
            }
        }
    }
    finished.truncate(n);
    let short = finished.len() < n;
    BeamResult {
        hypotheses: finished
            .into_iter()
            .map(|(tokens, score)| Hypothesis {
                text: params.vocab.decode(&tokens),
                tokens,
                score,
            })
            .collect(),
        short,
    }
}

/// Every outcome of the length-bounded distribution with its log-probability:
/// completed sequences of at most `max_len` tokens (ending in `<eos>`) and
/// unterminated sequences of exactly `max_len` tokens.
pub fn enumerate_outcomes(
    params: &PolicyParams,
    prompt: &[usize],
    max_len: usize,
    limit: usize,
) -> Result<Vec<(Vec<usize>, f64)>, ModelError> {
    let mut out = Vec::new();
    let mut frontier = vec![(
        Vec::<usize>::new(),
        encode(params, prompt).last().to_vec(),
        0.0,
    )];
    while let Some((tokens, state, score)) = frontier.pop() {
        let prev = tokens.last().copied().unwrap_or(BOS);
        let s = decoder_step(params, &state, prev);
        let lp = next_log_probs(params, &s, 1.0);
        for v in params.vocab.emittable() {
            let mut t = tokens.clone();
            t.push(v);
            let sc = score + lp[v];
            if v == EOS || t.len() == max_len {
                out.push((t, sc));
                if out.len() > limit {
                    return Err(ModelError::Config(format!(
                        "more than {limit} outcomes; shrink the vocabulary or max_len"
                    )));
                }
            } else {
                frontier.push((t, s.clone(), sc));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
