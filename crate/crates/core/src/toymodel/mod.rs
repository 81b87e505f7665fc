//! Word-level recurrent encoder-decoder used as the question-generation
//! policy and as the reward-model backbone.

mod decode;
pub(crate) mod network;
mod params;
mod train;
mod vocab;

pub use decode::{
    beam_search, beam_search_ids, enumerate_outcomes, greedy, log_prob, sample, sample_ids,
    sequence_log_prob, BeamResult, DecodeConfig, Hypothesis, Sampled,
};
pub(crate) use params::{Checkpoint, REWARD_FORMAT};
pub use params::{HeadWeights, PolicyParams, Weights};
pub use train::{
    clip_gradient, cross_entropy, finite_difference_check, grad_check, mean_token_loss,
    sft_continue, sft_train, Example, TrainConfig, TrainReport, PRESET_NAMES,
};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Next-token distribution after the `prefix` of generated ids.
pub fn next_token_distribution(
    params: &PolicyParams,
    prompt: &[usize],
    prefix: &[usize],
) -> Vec<f64> {
    let enc = network::encode(params, prompt);
    let mut state = enc.last().to_vec();
    let mut prev = BOS;
    for &y in prefix {
        state = network::decoder_step(params, &state, prev);
        prev = y;
    }
    state = network::decoder_step(params, &state, prev);
    network::next_log_probs(params, &state, 1.0)
        .into_iter()
        .map(f64::exp)
        .collect()
}
