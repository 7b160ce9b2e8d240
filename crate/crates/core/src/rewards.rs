//! Reward components and their curriculum-weighted synthesis.
//!
//! The total reward for a trajectory at training step `t` is
//!
//! ```text
//! r_total = r_fmt * (w_out(t) * r_out + s * (w_struct(t) * r_struct + w_content(t) * r_content)) * r_len
//! r_len   = r_rep(rho) * r_win(L)
//! ```
//!
//! where `s` is [`CurriculumConfig::process_scale`], `r_rep` decays
//! exponentially once the n-gram repetition ratio passes a threshold and
//! `r_win` is a product of two logistic gates around a preferred length window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{ParsedTrajectory, TrajectoryStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain { name: &'static str, value: f64, domain: &'static str },
    #[error("step {step} is outside 0..={total_steps}")]
    StepOutOfRange { step: u64, total_steps: u64 },
    #[error("component {name} = {value} is outside {range}")]
    ComponentOutOfRange { name: &'static str, value: f64, range: &'static str },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthRewardConfig {
    /// Repetition ratio tolerated without penalty.
    pub tau_rep: f64,
    /// Decay rate of the repetition penalty.
    pub beta: f64,
    /// Lower edge of the preferred length window, in tokens.
    pub l_min: f64,
    /// Upper edge of the preferred length window, in tokens.
    pub l_max: f64,
    /// Width of the logistic gates, in tokens.
    pub k: f64,
}

impl Default for LengthRewardConfig {
    fn default() -> Self {
        Self { tau_rep: 0.1, beta: 8.0, l_min: 400.0, l_max: 2500.0, k: 50.0 }
    }
}

impl LengthRewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.tau_rep) {
            return Err(RewardError::InvalidConfig(format!("tau_rep {} not in [0, 1]", self.tau_rep)));
        }
        if !(self.l_min < self.l_max) {
            return Err(RewardError::InvalidConfig(format!("l_min {} must be below l_max {}", self.l_min, self.l_max)));
        }
        if !(self.k > 0.0) || !(self.beta > 0.0) {
            return Err(RewardError::InvalidConfig("k and beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Outcome weight at step 0.
    pub w_out: f64,
    /// When set, the outcome weight moves linearly from `w_out` to this value
    /// over the run instead of staying constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_out_final: Option<f64>,
    /// Growth of the process weights over the run.
    pub gamma: f64,
    pub total_steps: u64,
    /// Multiplier on the process terms.
    pub process_scale: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { w_out: 2.0, w_out_final: None, gamma: 1.0, total_steps: 600, process_scale: 1.0 }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.total_steps == 0 {
            return Err(RewardError::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumWeights {
    pub w_out: f64,
    pub w_struct: f64,
    pub w_content: f64,
}

/// Selects which terms enter the total reward (for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentMask {
    pub structure: bool,
    pub content: bool,
    pub length: bool,
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl ComponentMask {
    pub const FULL: Self = Self { structure: true, content: true, length: true };
    pub const OUTCOME_ONLY: Self = Self { structure: false, content: false, length: false };
    pub const NO_LENGTH: Self = Self { structure: true, content: true, length: false };
}

/// Where the length term comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthTerm {
    /// Measured repetition ratio and token length of the thinking segment.
    Measured { rho: f64, length_tokens: f64 },
    /// Precomputed factors.
    Given { r_rep: f64, r_win: f64 },
    /// No length shaping: the factor is 1 and nothing is reported.
    Disabled,
}

impl From<&TrajectoryStats> for LengthTerm {
    fn from(stats: &TrajectoryStats) -> Self {
        LengthTerm::Measured { rho: stats.repetition_ratio, length_tokens: stats.length_tokens as f64 }
    }
}

/// Component scores for one trajectory, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub format_ok: bool,
    pub correct: bool,
    pub r_struct: f64,
    pub r_content: f64,
    pub length: LengthTerm,
}

/// Every component and the synthesized total for one trajectory at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_out: f64,
    pub r_struct: f64,
    pub r_content: f64,
    pub r_rep: Option<f64>,
    pub r_win: Option<f64>,
    pub r_len: Option<f64>,
    pub w_out_t: f64,
    pub w_struct_t: f64,
    pub w_content_t: f64,
    pub r_total: f64,
    pub step: u64,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn format_reward(t: &ParsedTrajectory) -> f64 {
    if t.well_formed {
        1.0
    } else {
        0.0
    }
}

/// 1 when a well-formed trajectory's label equals `gold`.
pub fn outcome_reward(t: &ParsedTrajectory, gold: crate::dataset::Label) -> f64 {
    if t.well_formed && t.answer_label == Some(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn repetition_reward(rho: f64, cfg: &LengthRewardConfig) -> Result<f64, RewardError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(RewardError::Domain { name: "rho", value: rho, domain: "[0, 1]" });
    }
    Ok(if rho <= cfg.tau_rep { 1.0 } else { (-cfg.beta * (rho - cfg.tau_rep)).exp() })
}

pub fn window_reward(length_tokens: f64, cfg: &LengthRewardConfig) -> f64 {
    sigmoid((length_tokens - cfg.l_min) / cfg.k) * sigmoid((cfg.l_max - length_tokens) / cfg.k)
}

pub fn length_reward(stats: &TrajectoryStats, cfg: &LengthRewardConfig) -> Result<f64, RewardError> {
    Ok(repetition_reward(stats.repetition_ratio, cfg)? * window_reward(stats.length_tokens as f64, cfg))
}

pub fn curriculum_weights(step: u64, cfg: &CurriculumConfig) -> Result<CurriculumWeights, RewardError> {
    if step > cfg.total_steps {
        return Err(RewardError::StepOutOfRange { step, total_steps: cfg.total_steps });
    }
    let progress = step as f64 / cfg.total_steps as f64;
    let process = 1.0 + cfg.gamma * progress;
    let w_out = match cfg.w_out_final {
        Some(end) => cfg.w_out + (end - cfg.w_out) * progress,
        None => cfg.w_out,
    };
    Ok(CurriculumWeights { w_out, w_struct: process, w_content: process })
}

fn check_unit(name: &'static str, value: f64) -> Result<f64, RewardError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(RewardError::ComponentOutOfRange { name, value, range: "[0, 1]" })
    }
}

pub fn total_reward(
    inputs: &RewardInputs,
    step: u64,
    cur: &CurriculumConfig,
    len_cfg: &LengthRewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    total_reward_masked(inputs, step, cur, len_cfg, ComponentMask::FULL)
}

/// [`total_reward`] with some terms switched off. Masked process terms get
/// weight 0; a masked length term contributes a factor of 1.
pub fn total_reward_masked(
    inputs: &RewardInputs,
    step: u64,
    cur: &CurriculumConfig,
    len_cfg: &LengthRewardConfig,
    mask: ComponentMask,
) -> Result<RewardBreakdown, RewardError> {
    let r_struct = check_unit("r_struct", inputs.r_struct)?;
    let r_content = check_unit("r_content", inputs.r_content)?;
    let weights = curriculum_weights(step, cur)?;
    let r_fmt = if inputs.format_ok { 1.0 } else { 0.0 };
    let r_out = if inputs.correct && inputs.format_ok { 1.0 } else { 0.0 };

    let (r_rep, r_win) = match (inputs.length, mask.length, inputs.format_ok) {
        (_, false, _) | (LengthTerm::Disabled, _, _) | (_, _, false) => (None, None),
        (LengthTerm::Measured { rho, length_tokens }, true, true) => {
            (Some(repetition_reward(rho, len_cfg)?), Some(window_reward(length_tokens, len_cfg)))
        }
        (LengthTerm::Given { r_rep, r_win }, true, true) => {
            (Some(check_unit("r_rep", r_rep)?), Some(check_unit("r_win", r_win)?))
        }
    };
    let r_len = r_rep.zip(r_win).map(|(a, b)| a * b);

    let w_struct_t = if mask.structure { weights.w_struct } else { 0.0 };
    let w_content_t = if mask.content { weights.w_content } else { 0.0 };
    let inner = weights.w_out * r_out + cur.process_scale * (w_struct_t * r_struct + w_content_t * r_content);
    let r_total = r_fmt * inner * r_len.unwrap_or(1.0);

    Ok(RewardBreakdown {
        r_fmt,
        r_out,
        r_struct,
        r_content,
        r_rep,
        r_win,
        r_len,
        w_out_t: weights.w_out,
        w_struct_t,
        w_content_t,
        r_total,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::trajectory::{parse_trajectory, quartile_ranges, TagStyle};
    use proptest::prelude::*;

    fn cfg() -> LengthRewardConfig {
        LengthRewardConfig::default()
    }

    fn stats(rho: f64, len: usize) -> TrajectoryStats {
        TrajectoryStats { length_tokens: len, repetition_ratio: rho, ngram_order: 3, quartile_boundaries: quartile_ranges(len) }
    }

    // Oracle: logistic via the textbook form in extended evaluation order.
    fn sigma_ref(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn format_and_outcome() {
        let ok = parse_trajectory("<think>x</think><answer>D</answer>", TagStyle::Think);
        let broken = parse_trajectory("<think>x</think><answer>D", TagStyle::Think);
        let two = parse_trajectory("<think>x</think><answer>D</answer><answer>D</answer>", TagStyle::Think);
        assert_eq!(format_reward(&ok), 1.0);
        assert_eq!(format_reward(&broken), 0.0);
        assert_eq!(format_reward(&two), 0.0);
        let d = Label::new('D').unwrap();
        assert_eq!(outcome_reward(&ok, d), 1.0);
        assert_eq!(outcome_reward(&ok, Label::new('C').unwrap()), 0.0);
        assert_eq!(outcome_reward(&two, d), 0.0);
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_reward(0.05, &cfg()).unwrap(), 1.0);
        assert_eq!(repetition_reward(0.1, &cfg()).unwrap(), 1.0);
        // exp(-8 * 0.25) = exp(-2) = 0.1353352832366127
        let r = repetition_reward(0.35, &cfg()).unwrap();
        assert!((r - 0.135_335_283_236_612_7).abs() < 1e-12);
        assert!(matches!(repetition_reward(1.2, &cfg()), Err(RewardError::Domain { .. })));
        assert!(repetition_reward(f64::NAN, &cfg()).is_err());
    }

    #[test]
    fn window_examples() {
        // sigma(21)^2 = 0.99999999848348791614 (mpmath, 40 digits)
        let mid = window_reward(1450.0, &cfg());
        assert!((mid - 0.999_999_998_483_487_9).abs() < 1e-15);
        assert!((window_reward(400.0, &cfg()) - 0.5 * sigma_ref(42.0)).abs() < 1e-15);
        // sigma(-8) * sigma(50) = 3.353501304664781e-4
        assert!((window_reward(0.0, &cfg()) - 3.353_501_304_664_781e-4).abs() < 1e-16);
    }

    #[test]
    fn length_examples() {
        assert!((length_reward(&stats(0.05, 1450), &cfg()).unwrap() - 1.0).abs() < 1e-8);
        assert!((length_reward(&stats(0.35, 1450), &cfg()).unwrap() - 0.135_335_283).abs() < 1e-8);
        // exp(-2) * sigma(-8) * sigma(50) = 4.538470489011583e-5 (mpmath)
        let r = length_reward(&stats(0.35, 0), &cfg()).unwrap();
        assert!((r - 4.538_470_489_011_583e-5).abs() < 1e-17, "{r}");
    }

    #[test]
    fn curriculum_examples() {
        let cur = CurriculumConfig { gamma: 1.0, ..Default::default() };
        let w = curriculum_weights(0, &cur).unwrap();
        assert_eq!((w.w_out, w.w_struct, w.w_content), (2.0, 1.0, 1.0));
        let w = curriculum_weights(600, &cur).unwrap();
        assert_eq!((w.w_out, w.w_struct, w.w_content), (2.0, 2.0, 2.0));
        let half = CurriculumConfig { gamma: 0.5, ..Default::default() };
        let w = curriculum_weights(300, &half).unwrap();
        assert_eq!((w.w_struct, w.w_content), (1.25, 1.25));
        assert!(matches!(curriculum_weights(601, &cur), Err(RewardError::StepOutOfRange { step: 601, .. })));
        let sched = CurriculumConfig { w_out_final: Some(1.0), ..Default::default() };
        assert_eq!(curriculum_weights(300, &sched).unwrap().w_out, 1.5);
    }

    fn inputs(r_struct: f64, r_content: f64, length: LengthTerm) -> RewardInputs {
        RewardInputs { format_ok: true, correct: true, r_struct, r_content, length }
    }

    #[test]
    fn total_reward_examples() {
        let cur = CurriculumConfig::default();
        let b = total_reward(&inputs(0.8, 0.6, LengthTerm::Disabled), 0, &cur, &cfg()).unwrap();
        assert!((b.r_total - 3.4).abs() < 1e-15);
        assert_eq!(b.r_len, None);

        let mut gated = inputs(0.8, 0.6, LengthTerm::Measured { rho: 0.0, length_tokens: 1000.0 });
        gated.format_ok = false;
        let b = total_reward(&gated, 10, &cur, &cfg()).unwrap();
        assert_eq!(b.r_total, 0.0);
        assert_eq!(b.r_out, 0.0);

        let mut zero = inputs(0.0, 0.0, LengthTerm::Measured { rho: 0.0, length_tokens: 1000.0 });
        zero.correct = false;
        assert_eq!(total_reward(&zero, 0, &cur, &cfg()).unwrap().r_total, 0.0);
    }

    #[test]
    fn out_of_range_components_error() {
        let cur = CurriculumConfig::default();
        for bad in [inputs(1.2, 0.5, LengthTerm::Disabled), inputs(0.5, -0.1, LengthTerm::Disabled)] {
            assert!(matches!(total_reward(&bad, 0, &cur, &cfg()), Err(RewardError::ComponentOutOfRange { .. })));
        }
        let bad_len = inputs(0.5, 0.5, LengthTerm::Given { r_rep: 1.5, r_win: 0.5 });
        assert!(total_reward(&bad_len, 0, &cur, &cfg()).is_err());
    }

    #[test]
    fn breakdown_length_product_and_mask() {
        let cur = CurriculumConfig::default();
        let x = inputs(0.5, 0.5, LengthTerm::Measured { rho: 0.3, length_tokens: 2600.0 });
        let b = total_reward(&x, 100, &cur, &cfg()).unwrap();
        assert!((b.r_len.unwrap() - b.r_rep.unwrap() * b.r_win.unwrap()).abs() < 1e-12);
        let m = total_reward_masked(&x, 100, &cur, &cfg(), ComponentMask::OUTCOME_ONLY).unwrap();
        assert_eq!(m.r_total, 2.0);
        assert_eq!((m.w_struct_t, m.w_content_t, m.r_len), (0.0, 0.0, None));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LengthRewardConfig { l_min: 3000.0, ..cfg() }.validate().is_err());
        assert!(LengthRewardConfig { k: 0.0, ..cfg() }.validate().is_err());
        assert!(LengthRewardConfig { tau_rep: 1.5, ..cfg() }.validate().is_err());
        assert!(CurriculumConfig { total_steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn repetition_continuity_at_threshold() {
        let eps = 1e-6;
        let gap = (repetition_reward(0.1 - eps, &cfg()).unwrap() - repetition_reward(0.1 + eps, &cfg()).unwrap()).abs();
        assert!(gap <= 1e-4);
    }

    proptest! {
        #[test]
        fn repetition_non_increasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(repetition_reward(hi, &cfg()).unwrap() <= repetition_reward(lo, &cfg()).unwrap());
        }

        #[test]
        fn window_symmetric_and_bounded(l in -5000.0f64..8000.0) {
            let c = cfg();
            let w = window_reward(l, &c);
            prop_assert!(w > 0.0 && w < 1.0);
            prop_assert!((w - window_reward(c.l_min + c.l_max - l, &c)).abs() <= 1e-12);
        }

        #[test]
        fn total_monotone_in_components(
            r_out in any::<bool>(), s in 0.0f64..=1.0, c in 0.0f64..=1.0, rep in 0.0f64..=1.0, win in 0.0f64..=1.0,
            ds in 0.0f64..=1.0, step in 0u64..=600,
        ) {
            let cur = CurriculumConfig::default();
            let base = RewardInputs { format_ok: true, correct: r_out, r_struct: s, r_content: c, length: LengthTerm::Given { r_rep: rep, r_win: win } };
            let t0 = total_reward(&base, step, &cur, &cfg()).unwrap().r_total;
            let bump = |f: &dyn Fn(&mut RewardInputs)| {
                let mut x = base;
                f(&mut x);
                total_reward(&x, step, &cur, &cfg()).unwrap().r_total
            };
            prop_assert!(bump(&|x| x.correct = true) >= t0);
            prop_assert!(bump(&|x| x.r_struct = (s + ds).min(1.0)) >= t0);
            prop_assert!(bump(&|x| x.r_content = (c + ds).min(1.0)) >= t0);
            let wider = LengthTerm::Given { r_rep: rep, r_win: (win + ds).min(1.0) };
            prop_assert!(bump(&|x| x.length = wider) >= t0);
        }

        #[test]
        fn process_scale_keeps_argmax(scores in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 2..8), correct in any::<bool>(), l in 0.01f64..=1.0, c in 0.01f64..100.0) {
            // r_out and r_len shared by the group
            let pick = |scale: f64| {
                let cur = CurriculumConfig { process_scale: scale, ..Default::default() };
                let totals: Vec<f64> = scores.iter().map(|&(s, k)| {
                    let x = RewardInputs { format_ok: true, correct, r_struct: s, r_content: k, length: LengthTerm::Given { r_rep: 1.0, r_win: l } };
                    total_reward(&x, 0, &cur, &cfg()).unwrap().r_total
                }).collect();
                let max = totals.iter().cloned().fold(f64::MIN, f64::max);
                totals.iter().map(|t| (max - t) <= 1e-12 * max.abs().max(1.0)).collect::<Vec<_>>()
            };
            // Compare argmax sets; near-ties may resolve either way under rescaling.
            let (a, b) = (pick(1.0), pick(c));
            prop_assert!(a.iter().zip(&b).any(|(x, y)| *x && *y));
        }

        #[test]
        fn process_weight_affine_in_step(t1 in 0u64..=600, t2 in 0u64..=600, gamma in 0.0f64..4.0) {
            let cur = CurriculumConfig { gamma, ..Default::default() };
            let w1 = curriculum_weights(t1, &cur).unwrap().w_struct;
            let w2 = curriculum_weights(t2, &cur).unwrap().w_struct;
            let expected = gamma * (t2 as f64 - t1 as f64) / 600.0;
            prop_assert!(((w2 - w1) - expected).abs() <= 1e-12);
        }
    }
}
