//! Preference-based reward learning from cluster rankings over a 2D state map.
//!
//! States sampled from the current policy are embedded (contrastive visual
//! features, plus learned-reward features once a reward model exists),
//! projected with PCA and t-SNE, and shown to a labeler who ranks clusters of
//! similar states. Each ranking expands into every cross-cluster pairwise
//! comparison, a Bradley-Terry reward model is fit on the accumulated
//! comparisons, and PPO improves the policy against the learned reward.
//!
//! A single-comparison baseline (DRLHP) shares the same reward model, policy
//! optimizer and evaluation so the two feedback schemes can be compared on
//! accounted human time.

pub mod cluster_oracle;
pub mod contrastive;
pub mod diffnet;
pub mod embed_viz;
pub mod env;
pub mod error;
pub mod orchestrator;
pub mod ppo;
pub mod preferences;
pub mod render;
pub mod reward_model;
pub mod stats;

pub use error::{Error, Result};

/// Identifier of a sampled state within one run's state table.
pub type StateId = usize;
