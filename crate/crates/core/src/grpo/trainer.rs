use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{group_advantages, Action, GrpoConfig, GrpoError, RolloutGroup, TemplateFamily, ToyPolicy};
use crate::dataset::{Instance, Label};
use crate::judge::{JudgeClient, JudgeError, JudgeRequest};
use crate::rewards::{
    total_reward_masked, ComponentMask, CurriculumConfig, LengthRewardConfig, LengthTerm, RewardBreakdown, RewardError,
    RewardInputs,
};
use crate::trajectory::{
    compute_stats, parse_trajectory, render_tagged, ParsedTrajectory, TagStyle, TrajectoryStats, WhitespaceTokenizer,
    DEFAULT_NGRAM_ORDER,
};

/// Everything `train_toy` needs besides data and a judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub grpo: GrpoConfig,
    pub curriculum: CurriculumConfig,
    pub length: LengthRewardConfig,
    pub mask: ComponentMask,
    /// Template families; without the template head only the first is used.
    pub families: Vec<TemplateFamily>,
    pub ngram_order: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            curriculum: CurriculumConfig::default(),
            length: LengthRewardConfig::default(),
            mask: ComponentMask::FULL,
            families: TemplateFamily::defaults(),
            ngram_order: DEFAULT_NGRAM_ORDER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub action: Action,
    pub trajectory: ParsedTrajectory,
    pub stats: TrajectoryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_length: f64,
    pub mean_rho: f64,
    pub mean_struct: f64,
    pub mean_content: f64,
    pub mean_kl: f64,
}

/// Policy state plus the index of the next step to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub policy: ToyPolicy,
}

impl Checkpoint {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let mut c: Checkpoint = serde_json::from_str(text)?;
        c.policy.reindex();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint,
    /// Greedy-label accuracy of the final policy on the training instances.
    pub train_accuracy: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    /// The run stopped at `checkpoint.step`; resuming from the checkpoint
    /// replays that step with the same random streams.
    #[error("judge failure at step {}: {source}", checkpoint.step)]
    Judge { source: JudgeError, checkpoint: Box<Checkpoint>, metrics: Vec<StepMetrics> },
}

/// Independent random stream for one (seed, step, instance, slot) cell.
fn stream(seed: u64, step: u64, instance: u64, slot: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for part in [seed, step, instance, slot] {
        h.update(part.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Samples an answer (and template) from the policy and synthesizes the trace.
pub fn toy_rollout<R: Rng>(
    policy: &ToyPolicy,
    instance: &Instance,
    families: &[TemplateFamily],
    ngram_order: usize,
    rng: &mut R,
) -> Result<Rollout, GrpoError> {
    let idx = policy.position(&instance.id)?;
    if policy.logits[idx].len() != instance.options.len() {
        return Err(GrpoError::InvalidConfig(format!(
            "policy has {} labels for {}, instance has {} options",
            policy.logits[idx].len(),
            instance.id,
            instance.options.len()
        )));
    }
    let action = policy.sample_action(idx, rng);
    let family = families
        .get(action.template.unwrap_or(0))
        .ok_or_else(|| GrpoError::InvalidConfig("no template families configured".into()))?;
    let label = Label::from_index(action.label_index).expect("option count is bounded by the label alphabet");
    let thinking = family.render(instance, label, rng);
    let trajectory = parse_trajectory(&render_tagged(&thinking, label, TagStyle::Think), TagStyle::Think);
    let stats = compute_stats(&trajectory, &WhitespaceTokenizer, ngram_order.max(1))
        .map_err(|e| GrpoError::InvalidConfig(e.to_string()))?;
    Ok(Rollout { action, trajectory, stats })
}

struct ScoredGroup {
    group: RolloutGroup,
    breakdowns: Vec<RewardBreakdown>,
    stats: Vec<TrajectoryStats>,
}

enum ScoreError {
    Judge(JudgeError),
    Other(TrainError),
}

#[allow(clippy::too_many_arguments)]
fn score_group(
    policy: &ToyPolicy,
    instance: &Instance,
    instance_pos: u64,
    step: u64,
    setup: &TrainSetup,
    judge: Option<&JudgeClient>,
) -> Result<ScoredGroup, ScoreError> {
    let cfg = &setup.grpo;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    let mut judged = Vec::with_capacity(cfg.group_size);
    for slot in 0..cfg.group_size as u64 {
        let mut rng = stream(cfg.seed, step, instance_pos, slot);
        let selected = slot == 0 || rng.random::<f64>() < cfg.struct_judge_rate;
        let r = toy_rollout(policy, instance, &setup.families, setup.ngram_order, &mut rng)
            .map_err(|e| ScoreError::Other(e.into()))?;
        rollouts.push(r);
        judged.push(selected);
    }

    let mut r_struct = vec![0.0; rollouts.len()];
    let mut r_content = vec![0.0; rollouts.len()];
    if setup.mask.structure || setup.mask.content {
        let judge = judge.ok_or_else(|| ScoreError::Other(TrainError::Config("process rewards need a judge".into())))?;
        for (k, r) in rollouts.iter().enumerate() {
            let Some(thinking) = r.trajectory.thinking.as_deref() else { continue };
            let req = JudgeRequest { instance, thinking, reference: None };
            if setup.mask.structure && judged[k] {
                r_struct[k] = judge.structural_score(&req).map_err(ScoreError::Judge)?.score;
            }
            if setup.mask.content {
                r_content[k] = judge.content_score(&req).map_err(ScoreError::Judge)?.score;
            }
        }
        if setup.mask.structure {
            let scores: Vec<f64> = (0..rollouts.len()).filter(|&k| judged[k]).map(|k| r_struct[k]).collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            for k in (0..rollouts.len()).filter(|&k| !judged[k]) {
                r_struct[k] = mean;
            }
        }
    }

    let mut breakdowns = Vec::with_capacity(rollouts.len());
    for (k, r) in rollouts.iter().enumerate() {
        let inputs = RewardInputs {
            format_ok: r.trajectory.well_formed,
            correct: r.trajectory.answer_label == Some(instance.answer),
            r_struct: r_struct[k],
            r_content: r_content[k],
            length: LengthTerm::from(&r.stats),
        };
        let b = total_reward_masked(&inputs, step, &setup.curriculum, &setup.length, setup.mask)
            .map_err(|e| ScoreError::Other(e.into()))?;
        breakdowns.push(b);
    }
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.r_total).collect();
    let advantages = group_advantages(&rewards, cfg.std_epsilon).map_err(|e| ScoreError::Other(e.into()))?;
    let stats = rollouts.iter().map(|r| r.stats.clone()).collect();
    let (actions, trajectories) = rollouts.into_iter().map(|r| (r.action, r.trajectory)).unzip();
    Ok(ScoredGroup {
        group: RolloutGroup { instance_id: instance.id.clone(), trajectories, actions, rewards, advantages },
        breakdowns,
        stats,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Applies one policy update from scored groups and reports the step's
/// reward, KL and length statistics. Lengths and repetition come from the
/// thinking text of each trajectory.
pub fn grpo_step(
    policy: &mut ToyPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    step: u64,
) -> Result<StepMetrics, GrpoError> {
    policy.update(groups, cfg)?;
    let trajectories = || groups.iter().flat_map(|g| g.trajectories.iter());
    let token_stats = || {
        trajectories().filter_map(|t| compute_stats(t, &WhitespaceTokenizer, DEFAULT_NGRAM_ORDER).ok())
    };
    Ok(StepMetrics {
        step,
        mean_reward: mean(groups.iter().flat_map(|g| g.rewards.iter().copied())),
        accuracy: 0.0,
        mean_length: mean(token_stats().map(|s| s.length_tokens as f64)),
        mean_rho: mean(token_stats().map(|s| s.repetition_ratio)),
        mean_struct: 0.0,
        mean_content: 0.0,
        mean_kl: policy.mean_kl(),
    })
}

fn select_batch(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch_size == 0 || batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = stream(seed, step, u64::MAX, 0);
    let mut picked = rand::seq::index::sample(&mut rng, n, batch_size).into_vec();
    picked.sort_unstable();
    picked
}

/// Runs GRPO on the tabular policy from `resume` (or a uniform policy) up to
/// `setup.grpo.total_steps`. `on_step` sees each step's metrics and the
/// checkpoint taken after it.
pub fn train_toy(
    train: &[Instance],
    setup: &TrainSetup,
    judge: Option<&JudgeClient>,
    resume: Option<Checkpoint>,
    on_step: &mut dyn FnMut(&StepMetrics, &Checkpoint),
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = &setup.grpo;
    cfg.validate()?;
    setup.curriculum.validate()?;
    setup.length.validate()?;
    if setup.families.is_empty() {
        return Err(TrainError::Config("at least one template family is required".into()));
    }
    if cfg.total_steps > setup.curriculum.total_steps + 1 {
        return Err(TrainError::Config(format!(
            "grpo.total_steps {} runs past curriculum.total_steps {}",
            cfg.total_steps, setup.curriculum.total_steps
        )));
    }
    if (setup.mask.structure || setup.mask.content) && judge.is_none() {
        return Err(TrainError::Config("process rewards are enabled but no judge was given".into()));
    }
    let families = if cfg.template_head { setup.families.len() } else { 0 };
    let mut checkpoint = resume.unwrap_or_else(|| Checkpoint { step: 0, policy: ToyPolicy::uniform(train, families) });
    for inst in train {
        checkpoint.policy.position(&inst.id)?;
    }

    let mut metrics = Vec::new();
    while checkpoint.step < cfg.total_steps {
        let step = checkpoint.step;
        let batch = select_batch(train.len(), cfg.batch_size, cfg.seed, step);
        let policy = &checkpoint.policy;
        let scored: Vec<Result<ScoredGroup, ScoreError>> = batch
            .par_iter()
            .map(|&i| score_group(policy, &train[i], i as u64, step, setup, judge))
            .collect();
        let mut groups = Vec::with_capacity(scored.len());
        let mut breakdowns = Vec::new();
        let mut stats = Vec::new();
        for s in scored {
            match s {
                Ok(s) => {
                    groups.push(s.group);
                    breakdowns.extend(s.breakdowns);
                    stats.extend(s.stats);
                }
                Err(ScoreError::Judge(source)) => {
                    return Err(TrainError::Judge { source, checkpoint: Box::new(checkpoint), metrics })
                }
                Err(ScoreError::Other(e)) => return Err(e),
            }
        }

        let mut policy = checkpoint.policy.clone();
        policy.update(&groups, cfg)?;
        let m = StepMetrics {
            step,
            mean_reward: mean(breakdowns.iter().map(|b| b.r_total)),
            accuracy: mean(breakdowns.iter().map(|b| b.r_out)),
            mean_length: mean(stats.iter().map(|s| s.length_tokens as f64)),
            mean_rho: mean(stats.iter().map(|s| s.repetition_ratio)),
            mean_struct: mean(breakdowns.iter().map(|b| b.r_struct)),
            mean_content: mean(breakdowns.iter().map(|b| b.r_content)),
            mean_kl: policy.mean_kl(),
        };
        checkpoint = Checkpoint { step: step + 1, policy };
        on_step(&m, &checkpoint);
        metrics.push(m);
    }
    let train_accuracy = checkpoint.policy.greedy_accuracy(train)?;
    Ok(TrainReport { metrics, checkpoint, train_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::synthetic_dataset;
    use crate::judge::{JudgeSettings, MockJudge};

    fn outcome_only(steps: u64) -> TrainSetup {
        TrainSetup {
            grpo: GrpoConfig { total_steps: steps, seed: 1, ..Default::default() },
            mask: ComponentMask::OUTCOME_ONLY,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_initial_policy() {
        let data = synthetic_dataset(5, 4, 0);
        let report = train_toy(&data, &outcome_only(0), None, None, &mut |_, _| {}).unwrap();
        assert!(report.metrics.is_empty());
        assert_eq!(report.checkpoint.policy, ToyPolicy::uniform(&data, 0));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let data = synthetic_dataset(1, 4, 0);
        let policy = ToyPolicy::uniform(&data, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[policy.sample_action(0, &mut rng).label_index] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn saturated_policy_always_picks_its_label() {
        let data = synthetic_dataset(1, 4, 0);
        let mut policy = ToyPolicy::uniform(&data, 0);
        policy.logits[0][2] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r = toy_rollout(&policy, &data[0], &TemplateFamily::defaults(), 3, &mut rng).unwrap();
            assert_eq!(r.trajectory.answer_label, Label::from_index(2));
            assert!(r.trajectory.well_formed);
        }
        let other = synthetic_dataset(2, 4, 5);
        assert!(matches!(
            toy_rollout(&policy, &other[1], &TemplateFamily::defaults(), 3, &mut rng),
            Err(GrpoError::UnknownInstance(_))
        ));
    }

    #[test]
    fn outcome_training_learns_and_is_reproducible() {
        let data = synthetic_dataset(20, 4, 3);
        let run = || {
            let mut lines = Vec::new();
            let report = train_toy(&data, &outcome_only(150), None, None, &mut |m, _| {
                lines.push(serde_json::to_string(m).unwrap())
            })
            .unwrap();
            (report, lines)
        };
        let (a, la) = run();
        let (_, lb) = run();
        assert_eq!(la, lb);
        assert!(a.train_accuracy >= 0.95, "{}", a.train_accuracy);
    }

    #[test]
    fn judge_failure_returns_resumable_checkpoint() {
        use crate::judge::{BackendError, ChatRequest, JudgeBackend};
        use std::sync::atomic::{AtomicU32, Ordering};
        struct FailsAfter(AtomicU32);
        impl JudgeBackend for FailsAfter {
            fn id(&self) -> String {
                "fails-after".into()
            }
            fn complete(&self, r: &ChatRequest) -> Result<String, BackendError> {
                if self.0.fetch_sub(1, Ordering::SeqCst) == 0 {
                    self.0.store(0, Ordering::SeqCst);
                    return Err(BackendError::Fatal("gone".into()));
                }
                MockJudge::new(0).complete(r)
            }
        }
        let data = synthetic_dataset(3, 4, 0);
        let setup = TrainSetup {
            grpo: GrpoConfig { total_steps: 10, seed: 2, ..Default::default() },
            ..Default::default()
        };
        let settings = JudgeSettings { max_attempts: 1, ..JudgeSettings::default() };
        let failing = JudgeClient::new(FailsAfter(AtomicU32::new(70)), settings.clone()).unwrap();
        let err = train_toy(&data, &setup, Some(&failing), None, &mut |_, _| {}).unwrap_err();
        let TrainError::Judge { checkpoint, metrics, .. } = err else { panic!("expected judge error") };
        assert_eq!(checkpoint.step as usize, metrics.len());
        assert!(checkpoint.step < 10);

        let healthy = JudgeClient::new(MockJudge::new(0), settings.clone()).unwrap();
        let resumed = train_toy(&data, &setup, Some(&healthy), Some(*checkpoint), &mut |_, _| {}).unwrap();
        let fresh = JudgeClient::new(MockJudge::new(0), settings).unwrap();
        let straight = train_toy(&data, &setup, Some(&fresh), None, &mut |_, _| {}).unwrap();
        assert_eq!(resumed.checkpoint, straight.checkpoint);
        assert_eq!(resumed.metrics[..], straight.metrics[straight.metrics.len() - resumed.metrics.len()..]);
    }

    #[test]
    fn checkpoint_json_round_trips() {
        let data = synthetic_dataset(2, 3, 0);
        let c = Checkpoint { step: 4, policy: ToyPolicy::uniform(&data, 2) };
        let back = Checkpoint::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.policy.position(&data[1].id).unwrap(), 1);
    }

    #[test]
    fn grpo_step_reports_lengths() {
        let data = synthetic_dataset(1, 4, 0);
        let mut policy = ToyPolicy::uniform(&data, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = toy_rollout(&policy, &data[0], &[TemplateFamily::concise()], 3, &mut rng).unwrap();
        let g = RolloutGroup {
            instance_id: data[0].id.clone(),
            trajectories: vec![r.trajectory.clone(), r.trajectory],
            actions: vec![r.action, r.action],
            rewards: vec![1.0, 1.0],
            advantages: vec![0.0, 0.0],
        };
        let m = grpo_step(&mut policy, &[g], &GrpoConfig::default(), 3).unwrap();
        assert_eq!(m.mean_length, r.stats.length_tokens as f64);
        assert_eq!(m.mean_reward, 1.0);
        assert_eq!(m.step, 3);
    }
}
