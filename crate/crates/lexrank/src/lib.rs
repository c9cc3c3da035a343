//! Inference of lexicographically-ordered reward functions from pairwise
//! preferences, plus the simulated environments, baseline methods, and the
//! lexicographic Q-learning consumer used by the bundled experiment studies.

pub mod bench;
pub mod control;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod infer;
pub mod prefmodel;
pub mod rewards;

pub use error::{Error, Result};
pub use prefmodel::{LevelParams, LexRewardModel, PreferenceLabel, RewardVector};
pub use rewards::{Alternative, RewardFamily, Trajectory};
