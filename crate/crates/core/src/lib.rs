//! Desk-scale pipeline that trains a small byte-level language model to
//! rewrite terse image prompts into detailed, modifier-rich ones.
//!
//! The pipeline has three training stages plus a data stage:
//!
//! 1. [`datapipe`] builds a corpus of (low-quality, high-quality) prompt
//!    pairs from raw prompts, with quality classification, three pair
//!    synthesizers, and post-processing filters.
//! 2. [`sft`] supervise-fine-tunes a decoder-only transformer ([`lm`]) to
//!    rewrite low prompts into high ones, producing the reference policy.
//! 3. [`reward`] trains two scalar-head regressors against deterministic
//!    visual-feedback stand-ins ([`oracles`]): a preference score over the
//!    pair and an aesthetic score over the rewrite alone.
//! 4. [`ppo`] optimizes the policy against the composite reward with a
//!    clipped surrogate objective and an adaptive KL penalty toward the
//!    frozen reference.
//!
//! [`evalreport`] holds the evaluation harness (score tables, win rates,
//! ablation trajectories, SVG plots). Everything is deterministic given a
//! seed and runs single-threaded; [`numerics`] is the tensor/autodiff
//! substrate shared by all training stages.

pub mod config;
pub mod datapipe;
pub mod evalreport;
pub mod lm;
pub mod numerics;
pub mod oracles;
pub mod ppo;
pub mod reward;
pub mod seeding;
pub mod sft;

/// Environment variable selecting deterministic single-threaded mode.
///
/// The implementation is single-threaded and bit-deterministic given a seed
/// regardless of this variable; it exists so test harnesses have an explicit
/// switch to assert on and so future parallel kernels have a kill switch.
pub const SINGLE_THREAD_ENV: &str = "PROMPTBOOST_SINGLE_THREAD";

/// True when [`SINGLE_THREAD_ENV`] requests strict single-threaded mode.
pub fn single_thread_mode() -> bool {
    std::env::var(SINGLE_THREAD_ENV).map_or(false, |v| v != "0" && !v.is_empty())
}
