//! Question generation for QA-based event argument extraction, refined with
//! preference-trained rewards and KL-regularized PPO.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod corpus;
pub mod evalharness;
pub mod preference;
pub mod prompting;
pub mod rlhf;
pub mod textmetrics;
pub mod toymodel;
