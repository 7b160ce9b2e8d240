//! Group-relative advantages and a desk-scale GRPO trainer.
//!
//! The policy is tabular: one softmax over answer labels per instance, plus
//! an optional softmax over trajectory template families. Rollouts render a
//! synthetic reasoning trace so every reward component, including the length
//! term, is computed on real text.

mod policy;
pub mod synth;
mod trainer;

use serde::{Deserialize, Serialize};

pub use policy::{kl_divergence, log_softmax, softmax, ToyPolicy};
pub use synth::{synthetic_dataset, TemplateFamily};
pub use trainer::{
    grpo_step, toy_rollout, train_toy, Checkpoint, Rollout, StepMetrics, TrainError, TrainReport, TrainSetup,
};

use crate::trajectory::ParsedTrajectory;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("policy has no entry for instance {0:?}")]
    UnknownInstance(String),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coeff: f64,
    /// Step size for the tabular policy. LLM-scale runs use values around 5e-7.
    pub learning_rate: f64,
    pub total_steps: u64,
    pub std_epsilon: f64,
    pub seed: u64,
    /// Instances per step; 0 uses the whole training split every step.
    pub batch_size: usize,
    /// Let the policy learn which template family to use per instance.
    pub template_head: bool,
    /// Fraction of rollouts sent to the structural judge. The first rollout of
    /// every group is always judged; the others, when skipped, take the mean
    /// structural score of the judged rollouts in their group.
    pub struct_judge_rate: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            kl_coeff: 0.04,
            learning_rate: 0.05,
            total_steps: 600,
            std_epsilon: 1e-8,
            seed: 0,
            batch_size: 0,
            template_head: false,
            struct_judge_rate: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be non-negative");
        }
        if !(self.std_epsilon > 0.0) {
            return bad("std_epsilon must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.struct_judge_rate) {
            return bad("struct_judge_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Group-normalized advantages `(r_i - mean) / max(std, eps)` with the
/// population standard deviation. Groups whose rewards are all equal get
/// all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(eps);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// One sampled decision of the toy policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub label_index: usize,
    pub template: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub trajectories: Vec<ParsedTrajectory>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_group() {
        let a = group_advantages(&[3.4, 0.0, 3.4, 3.4, 0.0], 1e-8).unwrap();
        let expected = [0.816496580927726, -1.224744871391589, 0.816496580927726, 0.816496580927726, -1.224744871391589];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-9, "{x} vs {e}");
        }
        assert_eq!(group_advantages(&[1.0; 5], 1e-8).unwrap(), vec![0.0; 5]);
        let two = group_advantages(&[1.0, 0.0], 1e-8).unwrap();
        assert!((two[0] - 1.0).abs() < 1e-12 && (two[1] + 1.0).abs() < 1e-12);
        assert_eq!(group_advantages(&[1.0], 1e-8), Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { std_epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { kl_coeff: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(r in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            let a = group_advantages(&r, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-6 {
                let std = (a.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn advantages_ignore_affine_maps(r in prop::collection::vec(0.0f64..5.0, 2..8), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
            let a = group_advantages(&r, 1e-8).unwrap();
            let mapped: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let b = group_advantages(&mapped, 1e-8).unwrap();
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.1);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
