//! Distribution-aware reward estimation for test-time reinforcement learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`rollout`]: rollouts, populations and per-answer count/uncertainty statistics.
//! - [`rewards`]: the majority-vote baseline and the distribution-aware estimator.
//! - [`simulator`]: a latent-variable generator of correlated rollout populations.
//! - [`theory`]: Monte Carlo checks of the estimators' information and bias properties.
//! - [`adapt`]: a toy softmax policy adapted with group-normalized policy gradients.

pub mod adapt;
pub mod error;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod simulator;
pub mod theory;

pub use error::{Error, Result};
pub use rewards::{
    estimate_rewards, BonusVariant, RewardConfig, RewardMode, RewardVector, Shaping,
};
pub use rng::SeedStreams;
pub use rollout::{answer_stats, AnswerKey, AnswerStats, Population, Rollout};
pub use simulator::LatentWorld;
