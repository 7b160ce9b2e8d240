use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompts::{extract_block, extract_token_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Structural,
    Content,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

/// A chat-completion request. `kind` is never sent over the wire; it lets
/// local backends answer in the right shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    #[serde(skip)]
    pub kind: JudgeKind,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user_text(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limits, 5xx.
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("backend error: {0}")]
    Fatal(String),
    /// The judge explicitly refused the task.
    #[error("judge declined the request")]
    Declined,
}

pub trait JudgeBackend: Send + Sync {
    /// Identifier folded into cache keys so different backends never share entries.
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Seeded random verdicts, deterministic in (seed, request). Content verdicts
/// deliberately include tier/score combinations that violate the tier caps.
#[derive(Debug, Clone)]
pub struct MockJudge {
    pub seed: u64,
    pub decline_rate: f64,
}

impl MockJudge {
    pub fn new(seed: u64) -> Self {
        Self { seed, decline_rate: 0.1 }
    }

    fn rng_for(&self, request: &ChatRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(request.model.as_bytes());
        for m in &request.messages {
            h.update(m.role.as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl JudgeBackend for MockJudge {
    fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut rng = self.rng_for(request);
        match request.kind {
            JudgeKind::Structural => Ok(serde_json::json!({
                "encoding": rng.random_bool(0.85),
                "interpretation": rng.random_bool(0.85),
                "goal": rng.random_bool(0.85),
                "response": rng.random_bool(0.85),
                "in_order": rng.random_bool(0.8),
                "premature_conclusion": rng.random_bool(0.2),
            })
            .to_string()),
            JudgeKind::Content => {
                let score = (rng.random_range(0.0..=1.0f64) * 1e4).round() / 1e4;
                if rng.random_bool(0.5) {
                    let tier = ["PerceptionFailure", "InterpretationFailure", "GoalFailure", "HighQuality"]
                        [rng.random_range(0..4)];
                    Ok(serde_json::json!({ "tier": tier, "score": score }).to_string())
                } else {
                    Ok(format!("score: {score:.4}"))
                }
            }
            JudgeKind::Segmentation => {
                if rng.random_bool(self.decline_rate) {
                    return Ok("DECLINE".into());
                }
                let n = extract_token_count(request.user_text()).unwrap_or(0);
                let mut cuts = [rng.random_range(0..=n), rng.random_range(0..=n), rng.random_range(0..=n)];
                cuts.sort_unstable();
                Ok(serde_json::json!({
                    "ranges": [[0, cuts[0]], [cuts[0], cuts[1]], [cuts[1], cuts[2]], [cuts[2], n]]
                })
                .to_string())
            }
        }
    }
}

/// Stage cue words recognised by [`HeuristicJudge`], in stage order.
pub const STAGE_CUES: [&[&str]; 4] = [
    &["encoding", "cue", "cues", "notice", "notices", "noticed", "observe", "observed"],
    &["interpretation", "interpret", "interpreting", "infer", "inferred", "feels", "believes"],
    &["goal", "goals", "wants", "intends", "intention", "aims"],
    &["response", "therefore", "answer"],
];

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Trimmed word, lower-cased into `buf` only when it has upper-case letters.
fn normalized<'a>(w: &'a str, buf: &'a mut String) -> &'a str {
    let w = w.trim_matches(|c: char| !c.is_alphanumeric());
    if w.chars().any(char::is_uppercase) {
        *buf = w.to_lowercase();
        buf.as_str()
    } else {
        w
    }
}

/// Deterministic lexical judge for offline runs.
///
/// Structure comes from the first occurrence of each stage's cue words;
/// content is the fraction of distinct story words (four letters or more)
/// that the reasoning mentions.
#[derive(Debug, Clone, Default)]
pub struct HeuristicJudge;

impl HeuristicJudge {
    pub fn first_cue_positions(reasoning: &str) -> [Option<usize>; 4] {
        let mut first = [None; 4];
        let mut buf = String::new();
        for (i, raw) in reasoning.split_whitespace().enumerate() {
            let w = normalized(raw, &mut buf);
            for (stage, cues) in STAGE_CUES.iter().enumerate() {
                if first[stage].is_none() && cues.contains(&w) {
                    first[stage] = Some(i);
                }
            }
        }
        first
    }

    pub fn story_coverage(story: &str, reasoning: &str) -> f64 {
        let story_words: HashSet<String> =
            story.split_whitespace().map(normalize_word).filter(|w| w.chars().count() >= 4).collect();
        if story_words.is_empty() {
            return 0.0;
        }
        let mut seen: HashSet<&str> = HashSet::new();
        let mut buf = String::new();
        for raw in reasoning.split_whitespace() {
            let w = normalized(raw, &mut buf);
            if let Some(s) = story_words.get(w) {
                seen.insert(s.as_str());
            }
        }
        seen.len() as f64 / story_words.len() as f64
    }
}

impl JudgeBackend for HeuristicJudge {
    fn id(&self) -> String {
        "heuristic".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let text = request.user_text();
        let reasoning = extract_block(text, "reasoning").unwrap_or("");
        match request.kind {
            JudgeKind::Structural => {
                let first = Self::first_cue_positions(reasoning);
                let present: Vec<usize> = first.iter().flatten().copied().collect();
                let in_order = present.windows(2).all(|w| w[0] < w[1]);
                let premature = match first[3] {
                    Some(r) => first[..3].iter().flatten().any(|&p| p > r),
                    None => false,
                };
                Ok(serde_json::json!({
                    "encoding": first[0].is_some(),
                    "interpretation": first[1].is_some(),
                    "goal": first[2].is_some(),
                    "response": first[3].is_some(),
                    "in_order": in_order,
                    "premature_conclusion": premature,
                })
                .to_string())
            }
            JudgeKind::Content => {
                let story = extract_block(text, "story").unwrap_or("");
                let score = (Self::story_coverage(story, reasoning) * 100.0).round() / 100.0;
                Ok(format!("score: {score:.4}"))
            }
            JudgeKind::Segmentation => {
                let n = extract_token_count(text).unwrap_or(0);
                let first = Self::first_cue_positions(reasoning);
                let cuts: Option<Vec<usize>> = first[1..].iter().copied().collect();
                match cuts {
                    Some(c) if first[0] == Some(0) && c.windows(2).all(|w| w[0] < w[1]) && c[2] <= n => {
                        Ok(serde_json::json!({
                            "ranges": [[0, c[0]], [c[0], c[1]], [c[1], c[2]], [c[2], n]]
                        })
                        .to_string())
                    }
                    _ => Ok("DECLINE".into()),
                }
            }
        }
    }
}

/// Wraps a backend and counts the calls that reach it.
pub struct CountingBackend<B> {
    pub inner: B,
    calls: AtomicU64,
}

impl<B: JudgeBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: JudgeBackend> JudgeBackend for CountingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

impl<B: JudgeBackend + ?Sized> JudgeBackend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: JudgeBackend + ?Sized> JudgeBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}
