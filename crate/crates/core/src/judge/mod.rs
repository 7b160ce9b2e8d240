//! LLM-as-judge scoring of reasoning structure and content.
//!
//! [`JudgeClient`] turns a [`JudgeRequest`] into a prompt, sends it to a
//! [`JudgeBackend`] with caching, bounded retries and a concurrency cap, and
//! parses the reply into a verdict. Parsing is two-stage: a JSON object is
//! tried first, then a permissive text pattern.

mod backend;
mod cache;
mod http;
pub mod prompts;

use std::ops::Range;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use backend::{
    BackendError, ChatMessage, ChatRequest, CountingBackend, HeuristicJudge, JudgeBackend, JudgeKind, MockJudge,
    STAGE_CUES,
};
pub use cache::{cache_key, JudgeCache};
pub use http::HttpJudge;

use crate::dataset::Instance;
use crate::trajectory::quartile_ranges;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("invalid judge request: {0}")]
    InvalidRequest(String),
    #[error("judge backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("could not parse judge verdict from {raw:?}")]
    UnparseableVerdict { raw: String },
    #[error("judge declined to segment the trajectory")]
    SegmentationDeclined,
    #[error("judge returned an invalid segmentation: {0}")]
    InvalidSegmentation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SipStage {
    Encoding,
    Interpretation,
    Goal,
    Response,
}

impl SipStage {
    pub const ALL: [SipStage; 4] = [SipStage::Encoding, SipStage::Interpretation, SipStage::Goal, SipStage::Response];

    pub fn as_str(self) -> &'static str {
        match self {
            SipStage::Encoding => "encoding",
            SipStage::Interpretation => "interpretation",
            SipStage::Goal => "goal",
            SipStage::Response => "response",
        }
    }
}

/// 0.25 per stage present, halved when the stages are out of order and
/// halved again for a premature conclusion.
pub fn structural_score(stages_present: [bool; 4], in_order: bool, premature_conclusion: bool) -> f64 {
    let mut score = 0.25 * stages_present.iter().filter(|&&p| p).count() as f64;
    if !in_order {
        score *= 0.5;
    }
    if premature_conclusion {
        score *= 0.5;
    }
    score
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralVerdict {
    pub stages_present: [bool; 4],
    pub in_order: bool,
    pub premature_conclusion: bool,
    pub score: f64,
}

impl StructuralVerdict {
    pub fn new(stages_present: [bool; 4], in_order: bool, premature_conclusion: bool) -> Self {
        Self {
            stages_present,
            in_order,
            premature_conclusion,
            score: structural_score(stages_present, in_order, premature_conclusion),
        }
    }

    pub fn recompute(&self) -> f64 {
        structural_score(self.stages_present, self.in_order, self.premature_conclusion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContentTier {
    PerceptionFailure,
    InterpretationFailure,
    GoalFailure,
    HighQuality,
}

impl ContentTier {
    pub const ALL: [ContentTier; 4] = [
        ContentTier::PerceptionFailure,
        ContentTier::InterpretationFailure,
        ContentTier::GoalFailure,
        ContentTier::HighQuality,
    ];

    /// Highest score compatible with the tier.
    pub fn cap(self) -> f64 {
        match self {
            ContentTier::PerceptionFailure => 0.2,
            ContentTier::InterpretationFailure => 0.5,
            ContentTier::GoalFailure => 0.7,
            ContentTier::HighQuality => 1.0,
        }
    }

    pub fn for_score(score: f64) -> Self {
        Self::ALL.into_iter().find(|t| score <= t.cap()).unwrap_or(ContentTier::HighQuality)
    }

    fn parse(text: &str) -> Option<Self> {
        let key: String = text.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "perceptionfailure" | "perception" | "tier1" | "1" => Some(ContentTier::PerceptionFailure),
            "interpretationfailure" | "interpretation" | "interpretationtomfailure" | "tier2" | "2" => {
                Some(ContentTier::InterpretationFailure)
            }
            "goalfailure" | "goal" | "goallogicalignment" | "tier3" | "3" => Some(ContentTier::GoalFailure),
            "highquality" | "tier4" | "4" => Some(ContentTier::HighQuality),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentVerdict {
    pub score: f64,
    /// Tier stated by the judge, or the band the score falls in.
    pub tier: ContentTier,
    /// True when a stated tier forced the score down to its cap.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RubricMode {
    /// Reference-guided when a reference analysis is supplied, reference-free otherwise.
    #[default]
    Auto,
    ReferenceGuided,
    ReferenceFree,
}

#[derive(Debug, Clone, Copy)]
pub struct JudgeRequest<'a> {
    pub instance: &'a Instance,
    pub thinking: &'a str,
    pub reference: Option<&'a str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    Judge,
    QuartileFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSegmentation {
    pub ranges: [Range<usize>; 4],
    pub source: SegmentSource,
}

fn first_json_object(raw: &str) -> Option<serde_json::Value> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&raw[start..=end]).ok()
}

fn json_bool(v: &serde_json::Value) -> Option<bool> {
    match v {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::String(s) => parse_yes_no(s),
        serde_json::Value::Number(n) => n.as_f64().map(|x| x != 0.0),
        _ => None,
    }
}

fn parse_yes_no(s: &str) -> Option<bool> {
    match s.trim().to_lowercase().as_str() {
        "true" | "yes" | "y" | "present" => Some(true),
        "false" | "no" | "n" | "absent" => Some(false),
        _ => None,
    }
}

const STRUCTURAL_KEYS: [&str; 6] = ["encoding", "interpretation", "goal", "response", "in_order", "premature_conclusion"];

pub fn parse_structural_verdict(raw: &str) -> Result<StructuralVerdict, JudgeError> {
    let unparseable = || JudgeError::UnparseableVerdict { raw: raw.to_string() };
    let mut values: [Option<bool>; 6] = [None; 6];
    if let Some(serde_json::Value::Object(map)) = first_json_object(raw) {
        let stages = map.get("stages").and_then(|s| s.as_object()).unwrap_or(&map);
        for (i, key) in STRUCTURAL_KEYS.iter().enumerate() {
            let source = if i < 4 { stages } else { &map };
            values[i] = source.get(*key).and_then(json_bool);
        }
    }
    if values.iter().any(Option::is_none) {
        let re = Regex::new(
            r"(?im)\b(encoding|interpretation|goal|response|in[ _-]?order|premature[ _-]?conclusion)\b\W{0,3}\s*(true|false|yes|no)\b",
        )
        .expect("static pattern");
        for cap in re.captures_iter(raw) {
            let key = cap[1].to_lowercase().replace([' ', '-'], "_").replace("inorder", "in_order");
            let key = if key == "prematureconclusion" { "premature_conclusion".to_string() } else { key };
            if let Some(i) = STRUCTURAL_KEYS.iter().position(|k| *k == key) {
                if values[i].is_none() {
                    values[i] = parse_yes_no(&cap[2]);
                }
            }
        }
    }
    let v: Vec<bool> = values.iter().copied().collect::<Option<_>>().ok_or_else(unparseable)?;
    Ok(StructuralVerdict::new([v[0], v[1], v[2], v[3]], v[4], v[5]))
}

pub fn parse_content_verdict(raw: &str) -> Result<ContentVerdict, JudgeError> {
    let unparseable = || JudgeError::UnparseableVerdict { raw: raw.to_string() };
    let mut score = None;
    let mut stated_tier = None;
    if let Some(serde_json::Value::Object(map)) = first_json_object(raw) {
        score = map.get("score").and_then(|s| match s {
            serde_json::Value::Number(n) => n.as_f64(),
            serde_json::Value::String(t) => t.trim().parse().ok(),
            _ => None,
        });
        stated_tier = map.get("tier").and_then(|t| match t {
            serde_json::Value::String(s) => ContentTier::parse(s),
            serde_json::Value::Number(n) => ContentTier::parse(&n.to_string()),
            _ => None,
        });
    }
    if score.is_none() {
        let labelled = Regex::new(r"(?i)score\s*[:=]?\s*([01](?:\.\d+)?|\.\d+)").expect("static pattern");
        let bare = Regex::new(r"(?:^|[^\d.])([01](?:\.\d+)?|\.\d+)(?:$|[^\d.])").expect("static pattern");
        score = labelled
            .captures(raw)
            .or_else(|| bare.captures(raw))
            .and_then(|c| c[1].parse::<f64>().ok());
    }
    let score = score.filter(|s| (0.0..=1.0).contains(s)).ok_or_else(unparseable)?;
    Ok(match stated_tier {
        Some(tier) if score > tier.cap() => {
            log::warn!("content judge gave score {score} above the {tier:?} cap {}; clamping", tier.cap());
            ContentVerdict { score: tier.cap(), tier, clamped: true }
        }
        Some(tier) => ContentVerdict { score, tier, clamped: false },
        None => ContentVerdict { score, tier: ContentTier::for_score(score), clamped: false },
    })
}

/// Checks that `ranges` are four contiguous, ordered spans covering `0..token_count`.
pub fn validate_segmentation(ranges: &[Range<usize>], token_count: usize) -> Result<(), JudgeError> {
    let bad = |m: String| Err(JudgeError::InvalidSegmentation(m));
    if ranges.len() != 4 {
        return bad(format!("expected 4 ranges, got {}", ranges.len()));
    }
    let mut cursor = 0;
    for r in ranges {
        if r.start != cursor || r.end < r.start {
            return bad(format!("range {r:?} does not continue from token {cursor}"));
        }
        cursor = r.end;
    }
    if cursor != token_count {
        return bad(format!("ranges end at {cursor}, trajectory has {token_count} tokens"));
    }
    Ok(())
}

pub fn parse_segmentation(raw: &str, token_count: usize) -> Result<[Range<usize>; 4], JudgeError> {
    if raw.trim().to_uppercase().starts_with("DECLINE") {
        return Err(JudgeError::SegmentationDeclined);
    }
    let value = first_json_object(raw)
        .and_then(|v| v.get("ranges").cloned())
        .or_else(|| {
            let start = raw.find('[')?;
            let end = raw.rfind(']')?;
            serde_json::from_str(raw.get(start..=end)?).ok()
        })
        .ok_or_else(|| JudgeError::UnparseableVerdict { raw: raw.to_string() })?;
    let pairs: Vec<(usize, usize)> = serde_json::from_value(value)
        .map_err(|e| JudgeError::InvalidSegmentation(format!("ranges are not [start, end] pairs: {e}")))?;
    let ranges: Vec<Range<usize>> = pairs.into_iter().map(|(s, e)| s..e).collect();
    validate_segmentation(&ranges, token_count)?;
    Ok([ranges[0].clone(), ranges[1].clone(), ranges[2].clone(), ranges[3].clone()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub retry_backoff: Duration,
    /// Wall-clock budget for one verdict, retries included.
    #[serde(with = "millis")]
    pub total_timeout: Duration,
    #[serde(with = "millis")]
    pub request_timeout: Duration,
    pub max_in_flight: usize,
    pub rubric_mode: RubricMode,
    /// Fall back to token quartiles when the judge cannot segment a trajectory.
    pub segmentation_fallback: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            model: "judge".into(),
            temperature: 0.0,
            max_tokens: 512,
            max_attempts: 3,
            retry_backoff: Duration::from_millis(250),
            total_timeout: Duration::from_secs(120),
            request_timeout: Duration::from_secs(60),
            max_in_flight: 4,
            rubric_mode: RubricMode::Auto,
            segmentation_fallback: true,
            cache_dir: None,
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct JudgeClient {
    backend: Box<dyn JudgeBackend>,
    settings: JudgeSettings,
    cache: JudgeCache,
    in_flight: InFlight,
}

impl std::fmt::Debug for JudgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JudgeClient").field("backend", &self.backend.id()).field("settings", &self.settings).finish()
    }
}

impl JudgeClient {
    pub fn new(backend: impl JudgeBackend + 'static, settings: JudgeSettings) -> std::io::Result<Self> {
        let cache = JudgeCache::new(settings.cache_dir.clone())?;
        let in_flight = InFlight { limit: settings.max_in_flight.max(1), active: Mutex::new(0), freed: Condvar::new() };
        Ok(Self { backend: Box::new(backend), settings, cache, in_flight })
    }

    pub fn settings(&self) -> &JudgeSettings {
        &self.settings
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    fn chat(&self, kind: JudgeKind, system: String, user: String) -> ChatRequest {
        ChatRequest {
            kind,
            model: self.settings.model.clone(),
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        }
    }

    fn call_backend(&self, request: &ChatRequest) -> Result<String, JudgeError> {
        let started = Instant::now();
        let mut last_error = String::new();
        let max_attempts = self.settings.max_attempts.max(1);
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let backoff = self.settings.retry_backoff * 2u32.saturating_pow(attempt - 2);
                let remaining = self.settings.total_timeout.saturating_sub(started.elapsed());
                if remaining <= backoff {
                    return Err(JudgeError::BackendUnavailable { attempts: attempt - 1, last_error });
                }
                std::thread::sleep(backoff);
            }
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.complete(request)
            };
            match result {
                Ok(text) => return Ok(text),
                Err(BackendError::Declined) => return Ok("DECLINE".into()),
                Err(BackendError::Fatal(m)) => {
                    return Err(JudgeError::BackendUnavailable { attempts: attempt, last_error: m })
                }
                Err(BackendError::Transient(m)) => {
                    log::debug!("judge attempt {attempt}/{max_attempts} failed: {m}");
                    last_error = m;
                }
            }
        }
        Err(JudgeError::BackendUnavailable { attempts: max_attempts, last_error })
    }

    /// Cached verdict lookup. Only replies that parse are cached.
    fn query<T>(&self, request: ChatRequest, parse: impl Fn(&str) -> Result<T, JudgeError>) -> Result<T, JudgeError> {
        let key = cache_key(&self.backend.id(), &request);
        if let Some(cached) = self.cache.get(&key) {
            match parse(&cached) {
                Ok(v) => return Ok(v),
                Err(_) => log::warn!("discarding unparseable cached judge reply {key}"),
            }
        }
        let raw = self.call_backend(&request)?;
        let parsed = parse(&raw)?;
        self.cache.put(&key, &raw);
        Ok(parsed)
    }

    pub fn structural_score(&self, req: &JudgeRequest<'_>) -> Result<StructuralVerdict, JudgeError> {
        let chat = self.chat(
            JudgeKind::Structural,
            prompts::STRUCTURAL_SYSTEM.to_string(),
            prompts::structural_user(req.instance, req.thinking),
        );
        self.query(chat, parse_structural_verdict)
    }

    pub fn content_score(&self, req: &JudgeRequest<'_>) -> Result<ContentVerdict, JudgeError> {
        let reference = match (self.settings.rubric_mode, req.reference) {
            (RubricMode::ReferenceFree, _) => None,
            (RubricMode::ReferenceGuided, None) => {
                return Err(JudgeError::InvalidRequest(format!(
                    "reference-guided rubric needs a reference analysis for instance {}",
                    req.instance.id
                )))
            }
            (_, r) => r,
        };
        let system = match reference {
            Some(_) => prompts::CONTENT_SYSTEM.to_string(),
            None => format!("{}\n\n{}", prompts::CONTENT_SYSTEM, prompts::CONTENT_REFERENCE_FREE_NOTE),
        };
        let chat = self.chat(JudgeKind::Content, system, prompts::content_user(req.instance, req.thinking, reference));
        self.query(chat, parse_content_verdict)
    }

    /// Splits the thinking text (whitespace tokens) into the four stages.
    pub fn segment_stages(&self, req: &JudgeRequest<'_>) -> Result<StageSegmentation, JudgeError> {
        let n = req.thinking.split_whitespace().count();
        let chat = self.chat(
            JudgeKind::Segmentation,
            prompts::SEGMENTATION_SYSTEM.to_string(),
            prompts::segmentation_user(req.instance, req.thinking, n),
        );
        match self.query(chat, |raw| parse_segmentation(raw, n)) {
            Ok(ranges) => Ok(StageSegmentation { ranges, source: SegmentSource::Judge }),
            Err(e @ (JudgeError::SegmentationDeclined | JudgeError::InvalidSegmentation(_) | JudgeError::UnparseableVerdict { .. } | JudgeError::BackendUnavailable { .. }))
                if self.settings.segmentation_fallback =>
            {
                log::warn!("segmentation for {} fell back to quartiles: {e}", req.instance.id);
                Ok(StageSegmentation { ranges: quartile_ranges(n), source: SegmentSource::QuartileFallback })
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests;
