//! Preference-pair construction from tiered reasoning segments.
//!
//! Segments are tiered by teacher status, answer correctness and judge
//! score, then paired within each instance by priority:
//!
//! | priority | chosen | rejected |
//! |----------|--------|----------|
//! | P0 | S | C |
//! | P1 | A | C |
//! | P2 | A | B |
//! | P3 | B | D |
//! | P4 | later checkpoint and strictly shorter | earlier and longer |

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::provenance::{data_lines, Provenance};

#[derive(Debug, thiserror::Error)]
pub enum PairsError {
    #[error("pair set is empty")]
    EmptyPairSet,
    #[error("line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredSegment {
    pub instance_id: String,
    pub trajectory_ref: String,
    /// 1 when the segment's final answer is correct, else 0.
    pub acc: u8,
    pub llm_score: f64,
    /// Checkpoint step the trajectory was sampled from.
    pub source_step: u64,
    pub length_tokens: usize,
    #[serde(default)]
    pub is_teacher: bool,
}

impl ScoredSegment {
    pub fn validate(&self) -> Result<(), String> {
        if self.acc > 1 {
            return Err(format!("acc must be 0 or 1, got {}", self.acc));
        }
        if !(0.0..=1.0).contains(&self.llm_score) {
            return Err(format!("llm_score {} is outside [0, 1]", self.llm_score));
        }
        Ok(())
    }

    fn canonical_key(&self) -> (&str, u64, usize, u8, bool, u64) {
        (&self.trajectory_ref, self.source_step, self.length_tokens, self.acc, self.is_teacher, self.llm_score.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    S,
    A,
    B,
    C,
    D,
}

pub fn tier_assign(s: &ScoredSegment) -> Tier {
    if s.is_teacher {
        Tier::S
    } else if s.acc == 0 {
        Tier::D
    } else if s.llm_score >= 0.8 {
        Tier::A
    } else if s.llm_score >= 0.6 {
        Tier::B
    } else {
        Tier::C
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Priority {
    P0,
    P1,
    P2,
    P3,
    P4,
}

impl Priority {
    pub const ALL: [Priority; 5] = [Priority::P0, Priority::P1, Priority::P2, Priority::P3, Priority::P4];

    /// Whether `(chosen, rejected)` is eligible under this priority.
    pub fn admits(self, chosen: &ScoredSegment, rejected: &ScoredSegment, relax_p4: bool) -> bool {
        if chosen.instance_id != rejected.instance_id {
            return false;
        }
        let (tc, tr) = (tier_assign(chosen), tier_assign(rejected));
        match self {
            Priority::P0 => tc == Tier::S && tr == Tier::C,
            Priority::P1 => tc == Tier::A && tr == Tier::C,
            Priority::P2 => tc == Tier::A && tr == Tier::B,
            Priority::P3 => tc == Tier::B && tr == Tier::D,
            Priority::P4 => {
                chosen.source_step > rejected.source_step
                    && chosen.length_tokens < rejected.length_tokens
                    && (relax_p4 || (tc == tr && chosen.acc == 1 && rejected.acc == 1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub priority: Priority,
    pub chosen_tier: Tier,
    pub rejected_tier: Tier,
    pub chosen: ScoredSegment,
    pub rejected: ScoredSegment,
}

/// Per-priority caps; `None` means unlimited.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairQuotas {
    pub p0: Option<usize>,
    pub p1: Option<usize>,
    pub p2: Option<usize>,
    pub p3: Option<usize>,
    pub p4: Option<usize>,
    /// Overall cap, split across priorities in proportion to their counts.
    pub target_total: Option<usize>,
}

impl PairQuotas {
    pub fn get(&self, p: Priority) -> Option<usize> {
        match p {
            Priority::P0 => self.p0,
            Priority::P1 => self.p1,
            Priority::P2 => self.p2,
            Priority::P3 => self.p3,
            Priority::P4 => self.p4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub quotas: PairQuotas,
    /// Allow P4 pairs across tiers and with incorrect answers.
    pub relax_p4: bool,
    pub seed: u64,
}

/// Checkpoint sampling plan used to collect candidate segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub checkpoints: usize,
    pub samples_per_checkpoint: usize,
    pub instances: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self { checkpoints: 10, samples_per_checkpoint: 6, instances: 700 }
    }
}

impl SamplingPlan {
    pub fn total_segments(&self) -> usize {
        self.checkpoints * self.samples_per_checkpoint * self.instances
    }
}

/// Every eligible pair of one instance, in canonical order, grouped by priority.
fn enumerate_instance(segments: &[&ScoredSegment], relax_p4: bool) -> Vec<(Priority, usize, PreferencePair)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for priority in Priority::ALL {
        let mut index = 0;
        for (i, c) in segments.iter().enumerate() {
            for (j, r) in segments.iter().enumerate() {
                if i == j || !priority.admits(c, r, relax_p4) || !seen.insert((c.canonical_key(), r.canonical_key())) {
                    continue;
                }
                out.push((
                    priority,
                    index,
                    PreferencePair {
                        instance_id: c.instance_id.clone(),
                        priority,
                        chosen_tier: tier_assign(c),
                        rejected_tier: tier_assign(r),
                        chosen: (*c).clone(),
                        rejected: (*r).clone(),
                    },
                ));
                index += 1;
            }
        }
    }
    out
}

/// Splits `total` across `counts` in proportion, by largest remainder.
fn proportional(counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    if sum <= total {
        return counts.to_vec();
    }
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * total as f64 / sum as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - alloc.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if alloc[i] < counts[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Builds preference pairs from scored segments.
///
/// Segments are sorted canonically inside each instance before pairing, so
/// the result does not depend on input order. Quotas are applied per
/// priority over the whole set by seeded uniform subsampling. Output is
/// ordered by (instance id, priority, pair index).
pub fn build_pairs(segments: &[ScoredSegment], cfg: &PairConfig) -> Vec<PreferencePair> {
    let mut by_instance: BTreeMap<&str, Vec<&ScoredSegment>> = BTreeMap::new();
    for s in segments {
        by_instance.entry(&s.instance_id).or_default().push(s);
    }
    let mut pool: [Vec<(String, usize, PreferencePair)>; 5] = Default::default();
    for (id, mut segs) in by_instance {
        segs.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        for (priority, index, pair) in enumerate_instance(&segs, cfg.relax_p4) {
            pool[priority as usize].push((id.to_string(), index, pair));
        }
    }

    let mut caps: Vec<usize> = Priority::ALL
        .iter()
        .map(|&p| cfg.quotas.get(p).map_or(pool[p as usize].len(), |q| q.min(pool[p as usize].len())))
        .collect();
    if let Some(target) = cfg.quotas.target_total {
        caps = proportional(&caps, target);
    }

    let mut kept = Vec::new();
    for (p, candidates) in pool.into_iter().enumerate() {
        let cap = caps[p];
        if cap >= candidates.len() {
            kept.extend(candidates);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(p as u64));
        let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), cap).into_vec();
        picked.sort_unstable();
        let mut slots: Vec<Option<_>> = candidates.into_iter().map(Some).collect();
        kept.extend(picked.into_iter().filter_map(|i| slots[i].take()));
    }
    kept.sort_by(|a, b| (&a.0, a.2.priority, a.1).cmp(&(&b.0, b.2.priority, b.1)));
    kept.into_iter().map(|(_, _, pair)| pair).collect()
}

/// Fraction of pairs the scorer orders correctly; ties count one half.
pub fn pairwise_accuracy(pairs: &[PreferencePair], scorer: impl Fn(&ScoredSegment) -> f64) -> Result<f64, PairsError> {
    if pairs.is_empty() {
        return Err(PairsError::EmptyPairSet);
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let (c, r) = (scorer(&p.chosen), scorer(&p.rejected));
            if c > r {
                1.0
            } else if c == r {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

pub fn parse_segments(text: &str) -> Result<Vec<ScoredSegment>, PairsError> {
    data_lines(text)
        .map(|(line_no, line)| {
            let s: ScoredSegment = serde_json::from_str(line)
                .map_err(|e| PairsError::MalformedRecord { line_no, reason: e.to_string() })?;
            s.validate().map_err(|reason| PairsError::MalformedRecord { line_no, reason })?;
            Ok(s)
        })
        .collect()
}

pub fn write_pairs<W: Write>(
    mut w: W,
    pairs: &[PreferencePair],
    provenance: Option<&Provenance>,
) -> std::io::Result<()> {
    if let Some(p) = provenance {
        p.write_jsonl_header(&mut w)?;
    }
    for pair in pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
