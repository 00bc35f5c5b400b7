//! Core library for recloop: a desk-scale closed-loop training harness that
//! optimizes generative policies against a black-box lexical retriever using
//! ranking-metric rewards.
//!
//! The crate is organized around the loop's stages:
//!
//! - [`corpus`]: documents, tokenization, relevance dictionaries, task states.
//! - [`retrieval`]: inverted index and BM25 top-k search.
//! - [`metrics`]: rule-based rewards (NDCG, recall, format, category) and
//!   their linear composition.
//! - [`policy`]: autoregressive categorical policies — an enumerable tabular
//!   form and a small differentiable neural form with manual backprop.
//! - [`optim`]: GRPO (group-relative advantages, clipped surrogate, KL
//!   penalty) and SFT trainers with an Adam update rule.
//! - [`envs`]: the three task environments mapping actions to rewards.
//! - [`analysis`]: exact J(pi), KL/TV/entropy, and the bound checks relating
//!   SFT and RL performance on enumerable instances.
//! - [`verify`]: self-contained pass/fail suites built from the above.
//!
//! Batch evaluation uses rayon when the `parallel` feature is enabled
//! (default) and falls back to sequential iteration without it; results are
//! identical either way because every work item is independently seeded.

pub mod analysis;
pub mod corpus;
pub mod envs;
pub mod metrics;
pub mod optim;
pub(crate) mod par;
pub mod policy;
pub mod retrieval;
pub mod rng;
pub mod verify;
