//! Diagnostics over reasoning traces: option-mention density by stage,
//! stage-audit aggregation, distractor perturbation and robustness, and
//! per-ability accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Ability, Instance};
use crate::judge::{JudgeClient, JudgeError, JudgeRequest};
use crate::trajectory::{
    find_option_mentions, quartile_ranges, OptionMentionProfile, ParsedTrajectory, Tokenizer, WhitespaceTokenizer,
};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("no input records")]
    EmptyInput,
    #[error("trajectory for {instance_id} has no thinking segment")]
    MissingThinking { instance_id: String },
    #[error("anchor {anchor} is past the last of {sentences} sentence(s)")]
    AnchorOutOfRange { anchor: usize, sentences: usize },
    #[error("misaligned pair: {0}")]
    MisalignedPairs(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// How thinking text is cut into four stage buckets.
#[derive(Clone, Copy)]
pub enum Segmentation<'a> {
    Quartile,
    Judge(&'a JudgeClient),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub label: String,
    /// Mean option mentions per sample in each stage bucket.
    pub mean_per_quartile: [f64; 4],
    pub mean_total: f64,
    pub samples: usize,
}

impl DensityReport {
    /// Plain-text table, one row per report.
    pub fn table(reports: &[DensityReport]) -> String {
        let mut out = format!("{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "label", "Q1", "Q2", "Q3", "Q4", "total", "n");
        for r in reports {
            let q = r.mean_per_quartile;
            let _ = writeln!(
                out,
                "{:<24} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7}",
                r.label, q[0], q[1], q[2], q[3], r.mean_total, r.samples
            );
        }
        out
    }

    /// Plot-ready CSV rows `label,quartile,mean_mentions` with 1-based quartiles.
    pub fn csv(reports: &[DensityReport]) -> String {
        let mut out = String::from("label,quartile,mean_mentions\n");
        for r in reports {
            for (q, m) in r.mean_per_quartile.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", r.label, q + 1, m);
            }
        }
        out
    }
}

/// Option-mention profile of one trace under `segmentation`.
pub fn mention_profile(
    instance: &Instance,
    trajectory: &ParsedTrajectory,
    segmentation: Segmentation<'_>,
) -> Result<OptionMentionProfile, AnalysisError> {
    let thinking = trajectory
        .thinking
        .as_deref()
        .ok_or_else(|| AnalysisError::MissingThinking { instance_id: instance.id.clone() })?;
    let tokens = WhitespaceTokenizer.tokenize(thinking);
    let ranges = match segmentation {
        Segmentation::Quartile => quartile_ranges(tokens.len()),
        Segmentation::Judge(client) => {
            client.segment_stages(&JudgeRequest { instance, thinking, reference: None })?.ranges
        }
    };
    Ok(OptionMentionProfile::from_mentions(&find_option_mentions(&tokens, &instance.options), &ranges))
}

pub fn density_report(
    label: impl Into<String>,
    items: &[(&Instance, &ParsedTrajectory)],
    segmentation: Segmentation<'_>,
) -> Result<DensityReport, AnalysisError> {
    if items.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut sums = [0.0; 4];
    let mut total = 0.0;
    for (instance, trajectory) in items {
        let p = mention_profile(instance, trajectory, segmentation)?;
        for (s, c) in sums.iter_mut().zip(p.per_quartile_counts) {
            *s += c as f64;
        }
        total += p.total as f64;
    }
    let n = items.len() as f64;
    Ok(DensityReport {
        label: label.into(),
        mean_per_quartile: sums.map(|s| s / n),
        mean_total: total / n,
        samples: items.len(),
    })
}

/// Per-stage correctness of one audited trace (encoding, interpretation, goal, response).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageAuditRecord {
    pub instance_id: String,
    pub stages: [bool; 4],
    pub final_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAuditSummary {
    pub records: usize,
    pub stage_accuracy: [f64; 4],
    pub final_accuracy: f64,
    /// Share of records whose final answer is right while the interpretation stage is wrong.
    pub reversal_rate: f64,
    /// Encoding accuracy minus interpretation accuracy.
    pub encode_interpret_drop: f64,
}

pub fn stage_audit_aggregate(records: &[StageAuditRecord]) -> Result<StageAuditSummary, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let n = records.len() as f64;
    let frac = |f: &dyn Fn(&StageAuditRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    let stage_accuracy: [f64; 4] = std::array::from_fn(|s| frac(&|r| r.stages[s]));
    Ok(StageAuditSummary {
        records: records.len(),
        stage_accuracy,
        final_accuracy: frac(&|r| r.final_correct),
        reversal_rate: frac(&|r| r.final_correct && !r.stages[1]),
        encode_interpret_drop: stage_accuracy[0] - stage_accuracy[1],
    })
}

/// A distractor sentence and the number of original sentences that precede it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub sentence: String,
    pub anchor: usize,
}

/// Sentences ending in `.`, `?` or `!` followed by whitespace; a trailing
/// fragment without a terminator counts as a sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') && chars.peek().is_some_and(|(_, n)| n.is_whitespace()) {
            let s = text[start..i + c.len_utf8()].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Copy of `instance` with distractor sentences inserted into the story and
/// `-perturbed` appended to the id. Distractors sharing an anchor keep their
/// given order.
pub fn perturb_instance(instance: &Instance, distractors: &[Distractor]) -> Result<Instance, AnalysisError> {
    let sentences = split_sentences(&instance.story);
    for d in distractors {
        if d.anchor > sentences.len() {
            return Err(AnalysisError::AnchorOutOfRange { anchor: d.anchor, sentences: sentences.len() });
        }
    }
    let mut parts: Vec<&str> = Vec::with_capacity(sentences.len() + distractors.len());
    for k in 0..=sentences.len() {
        parts.extend(distractors.iter().filter(|d| d.anchor == k).map(|d| d.sentence.trim()));
        if let Some(s) = sentences.get(k) {
            parts.push(s);
        }
    }
    let story = if distractors.is_empty() { instance.story.clone() } else { parts.join(" ") };
    Ok(Instance { id: format!("{}-perturbed", instance.id), story, ..instance.clone() })
}

/// Outcome of answering one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredResult {
    pub instance_id: String,
    pub correct: bool,
    pub thinking_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub instance_id: String,
    pub original_correct: bool,
    pub perturbed_correct: bool,
    pub original_length: usize,
    pub perturbed_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub rows: Vec<RobustnessRow>,
    pub original_accuracy: f64,
    pub perturbed_accuracy: f64,
    /// Perturbed over original accuracy; absent when the original accuracy is 0.
    pub accuracy_retention: Option<f64>,
    /// Mean of perturbed minus original thinking length, in tokens.
    pub mean_length_drift: f64,
    /// Mean per-instance relative length change in percent, over instances
    /// with a non-zero original length.
    pub mean_length_drift_pct: f64,
}

fn ids_align(original: &str, perturbed: &str) -> bool {
    original == perturbed || perturbed.strip_suffix("-perturbed") == Some(original)
}

/// Pairs results by id, accepting either equal ids or the `-perturbed` suffix.
pub fn align_results(
    original: &[ScoredResult],
    perturbed: &[ScoredResult],
) -> Result<Vec<(ScoredResult, ScoredResult)>, AnalysisError> {
    let by_id: BTreeMap<&str, &ScoredResult> = perturbed
        .iter()
        .map(|p| (p.instance_id.strip_suffix("-perturbed").unwrap_or(&p.instance_id), p))
        .collect();
    if by_id.len() != perturbed.len() || original.len() != perturbed.len() {
        return Err(AnalysisError::MisalignedPairs(format!(
            "{} original vs {} perturbed results",
            original.len(),
            perturbed.len()
        )));
    }
    original
        .iter()
        .map(|o| {
            by_id
                .get(o.instance_id.as_str())
                .map(|p| (o.clone(), (*p).clone()))
                .ok_or_else(|| AnalysisError::MisalignedPairs(format!("no perturbed result for {}", o.instance_id)))
        })
        .collect()
}

pub fn robustness_study(pairs: &[(ScoredResult, ScoredResult)]) -> Result<PerturbationResult, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (o, p) in pairs {
        if !ids_align(&o.instance_id, &p.instance_id) {
            return Err(AnalysisError::MisalignedPairs(format!("{} vs {}", o.instance_id, p.instance_id)));
        }
        rows.push(RobustnessRow {
            instance_id: o.instance_id.clone(),
            original_correct: o.correct,
            perturbed_correct: p.correct,
            original_length: o.thinking_length,
            perturbed_length: p.thinking_length,
        });
    }
    rows.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let n = rows.len() as f64;
    let original_accuracy = rows.iter().filter(|r| r.original_correct).count() as f64 / n;
    let perturbed_accuracy = rows.iter().filter(|r| r.perturbed_correct).count() as f64 / n;
    let mean_length_drift =
        rows.iter().map(|r| r.perturbed_length as f64 - r.original_length as f64).sum::<f64>() / n;
    let pct: Vec<f64> = rows
        .iter()
        .filter(|r| r.original_length > 0)
        .map(|r| (r.perturbed_length as f64 - r.original_length as f64) / r.original_length as f64 * 100.0)
        .collect();
    let mean_length_drift_pct = if pct.is_empty() { 0.0 } else { pct.iter().sum::<f64>() / pct.len() as f64 };
    Ok(PerturbationResult {
        rows,
        original_accuracy,
        perturbed_accuracy,
        accuracy_retention: (original_accuracy > 0.0).then(|| perturbed_accuracy / original_accuracy),
        mean_length_drift,
        mean_length_drift_pct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbilityAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: AbilityAccuracy,
    pub per_ability: BTreeMap<String, AbilityAccuracy>,
    /// Instances with no trajectory; counted as wrong.
    pub missing: Vec<String>,
}

/// Extracted-answer accuracy overall and per ability. Malformed trajectories count as wrong.
pub fn accuracy_by_ability(instances: &[Instance], trajectories: &BTreeMap<String, ParsedTrajectory>) -> EvalReport {
    let mut tally: BTreeMap<Ability, (usize, usize)> = BTreeMap::new();
    let mut missing = Vec::new();
    for inst in instances {
        let correct = match trajectories.get(&inst.id) {
            Some(t) => t.well_formed && t.answer_label == Some(inst.answer),
            None => {
                missing.push(inst.id.clone());
                false
            }
        };
        let e = tally.entry(inst.ability).or_default();
        e.0 += usize::from(correct);
        e.1 += 1;
    }
    let acc = |(c, t): (usize, usize)| AbilityAccuracy {
        correct: c,
        total: t,
        accuracy: if t == 0 { 0.0 } else { c as f64 / t as f64 },
    };
    let overall = tally.values().fold((0, 0), |(c, t), &(ci, ti)| (c + ci, t + ti));
    EvalReport {
        overall: acc(overall),
        per_ability: tally.into_iter().map(|(a, v)| (a.as_str().to_string(), acc(v))).collect(),
        missing,
    }
}
