use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::dataset::tests::grimmo;

fn fast_settings() -> JudgeSettings {
    JudgeSettings { retry_backoff: Duration::from_millis(1), ..JudgeSettings::default() }
}

#[test]
fn structural_score_matches_rubric() {
    assert_eq!(structural_score([true; 4], true, false), 1.0);
    assert_eq!(structural_score([true, true, false, true], true, false), 0.75);
    assert_eq!(structural_score([true; 4], false, false), 0.5);
    assert_eq!(structural_score([true; 4], false, true), 0.25);
    assert_eq!(structural_score([false; 4], true, false), 0.0);
}

#[test]
fn structural_json_and_text_verdicts_parse() {
    let v = parse_structural_verdict(
        r#"Here you go: {"encoding": true, "interpretation": false, "goal": true, "response": true, "in_order": true, "premature_conclusion": false}"#,
    )
    .unwrap();
    assert_eq!(v.stages_present, [true, false, true, true]);
    assert_eq!(v.score, 0.75);

    let v = parse_structural_verdict(
        "Encoding: yes\nInterpretation: yes\nGoal: no\nResponse: yes\nIn order: no\nPremature conclusion: yes",
    )
    .unwrap();
    assert_eq!(v, StructuralVerdict::new([true, true, false, true], false, true));
    assert_eq!(v.score, 0.1875);

    assert!(matches!(
        parse_structural_verdict("the reasoning looks fine"),
        Err(JudgeError::UnparseableVerdict { .. })
    ));
}

#[test]
fn content_verdicts_parse_and_clamp() {
    let v = parse_content_verdict("0.7").unwrap();
    assert_eq!((v.score, v.tier, v.clamped), (0.7, ContentTier::GoalFailure, false));
    let v = parse_content_verdict("Score: 0.85").unwrap();
    assert_eq!(v.tier, ContentTier::HighQuality);
    let v = parse_content_verdict(r#"{"tier": "PerceptionFailure", "score": 0.9}"#).unwrap();
    assert_eq!((v.score, v.tier, v.clamped), (0.2, ContentTier::PerceptionFailure, true));
    let v = parse_content_verdict(r#"{"tier": "Tier 2", "score": 0.4}"#).unwrap();
    assert_eq!((v.score, v.tier, v.clamped), (0.4, ContentTier::InterpretationFailure, false));
    assert!(parse_content_verdict("score: 7").is_err());
    assert!(parse_content_verdict("no idea").is_err());
}

#[test]
fn tier_bands() {
    assert_eq!(ContentTier::for_score(0.0), ContentTier::PerceptionFailure);
    assert_eq!(ContentTier::for_score(0.2), ContentTier::PerceptionFailure);
    assert_eq!(ContentTier::for_score(0.3), ContentTier::InterpretationFailure);
    assert_eq!(ContentTier::for_score(0.5), ContentTier::InterpretationFailure);
    assert_eq!(ContentTier::for_score(0.6), ContentTier::GoalFailure);
    assert_eq!(ContentTier::for_score(0.8), ContentTier::HighQuality);
}

#[test]
fn segmentation_validation() {
    assert_eq!(parse_segmentation(r#"{"ranges": [[0,2],[2,5],[5,5],[5,9]]}"#, 9).unwrap()[1], 2..5);
    assert!(matches!(parse_segmentation("DECLINE", 9), Err(JudgeError::SegmentationDeclined)));
    assert!(matches!(
        parse_segmentation(r#"{"ranges": [[0,2],[3,5],[5,6],[6,9]]}"#, 9),
        Err(JudgeError::InvalidSegmentation(_))
    ));
    assert!(matches!(
        parse_segmentation(r#"{"ranges": [[0,2],[2,5],[5,9]]}"#, 9),
        Err(JudgeError::InvalidSegmentation(_))
    ));
    assert!(parse_segmentation(r#"{"ranges": [[0,2],[2,5],[5,6],[6,8]]}"#, 9).is_err());
}

#[test]
fn mock_verdicts_are_seeded_and_valid() {
    let inst = grimmo();
    let req = JudgeRequest { instance: &inst, thinking: "some reasoning here", reference: None };
    let a = JudgeClient::new(MockJudge::new(3), fast_settings()).unwrap();
    let b = JudgeClient::new(MockJudge::new(3), fast_settings()).unwrap();
    assert_eq!(a.structural_score(&req).unwrap(), b.structural_score(&req).unwrap());
    assert_eq!(a.content_score(&req).unwrap(), b.content_score(&req).unwrap());
    let v = a.structural_score(&req).unwrap();
    assert_eq!(v.score, v.recompute());
}

#[test]
fn mock_content_stress_respects_caps() {
    let inst = grimmo();
    let client = JudgeClient::new(MockJudge::new(11), fast_settings()).unwrap();
    let mut clamped = 0;
    for i in 0..1000 {
        let thinking = format!("trajectory number {i}");
        let v = client.content_score(&JudgeRequest { instance: &inst, thinking: &thinking, reference: None }).unwrap();
        assert!((0.0..=1.0).contains(&v.score));
        assert!(v.score <= v.tier.cap());
        clamped += v.clamped as u32;
    }
    assert!(clamped > 0);
}

#[test]
fn cache_prevents_repeat_backend_calls() {
    let inst = grimmo();
    let backend = Arc::new(CountingBackend::new(MockJudge::new(5)));
    let client = JudgeClient::new(backend.clone(), fast_settings()).unwrap();
    let req = JudgeRequest { instance: &inst, thinking: "cue interpretation goal answer", reference: None };
    let first = client.structural_score(&req).unwrap();
    assert_eq!(backend.calls(), 1);
    assert_eq!(client.structural_score(&req).unwrap(), first);
    assert_eq!(backend.calls(), 1);
    client.content_score(&req).unwrap();
    assert_eq!(backend.calls(), 2);
}

#[test]
fn disk_cache_survives_client_restart() {
    let dir = tempfile::tempdir().unwrap();
    let inst = grimmo();
    let req = JudgeRequest { instance: &inst, thinking: "persisted reasoning", reference: None };
    let settings = JudgeSettings { cache_dir: Some(dir.path().to_path_buf()), ..fast_settings() };
    let first = JudgeClient::new(MockJudge::new(1), settings.clone()).unwrap().content_score(&req).unwrap();
    let backend = Arc::new(CountingBackend::new(MockJudge::new(1)));
    let second = JudgeClient::new(backend.clone(), settings).unwrap().content_score(&req).unwrap();
    assert_eq!(first, second);
    assert_eq!(backend.calls(), 0);
}

#[test]
fn cache_key_depends_on_sampling_and_backend() {
    let req = ChatRequest {
        kind: JudgeKind::Content,
        model: "m".into(),
        messages: vec![ChatMessage::user("x")],
        temperature: 0.0,
        max_tokens: 10,
    };
    let hot = ChatRequest { temperature: 0.7, ..req.clone() };
    assert_ne!(cache_key("a", &req), cache_key("a", &hot));
    assert_ne!(cache_key("a", &req), cache_key("b", &req));
    assert_eq!(cache_key("a", &req), cache_key("a", &req.clone()));
}

struct Flaky {
    failures: AtomicU32,
    fatal: bool,
}

impl JudgeBackend for Flaky {
    fn id(&self) -> String {
        "flaky".into()
    }

    fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
        if self.failures.load(Ordering::SeqCst) > 0 {
            self.failures.fetch_sub(1, Ordering::SeqCst);
            return Err(if self.fatal { BackendError::Fatal("401".into()) } else { BackendError::Transient("503".into()) });
        }
        Ok("score: 0.6".into())
    }
}

#[test]
fn transient_errors_are_retried_within_bounds() {
    let inst = grimmo();
    let req = JudgeRequest { instance: &inst, thinking: "t", reference: None };
    let ok = JudgeClient::new(Flaky { failures: AtomicU32::new(2), fatal: false }, fast_settings()).unwrap();
    assert_eq!(ok.content_score(&req).unwrap().score, 0.6);

    let down = JudgeClient::new(Flaky { failures: AtomicU32::new(10), fatal: false }, fast_settings()).unwrap();
    assert!(matches!(down.content_score(&req), Err(JudgeError::BackendUnavailable { attempts: 3, .. })));

    let fatal = JudgeClient::new(Flaky { failures: AtomicU32::new(1), fatal: true }, fast_settings()).unwrap();
    assert!(matches!(fatal.content_score(&req), Err(JudgeError::BackendUnavailable { attempts: 1, .. })));
}

#[test]
fn reference_guided_mode_requires_reference() {
    let inst = grimmo();
    let settings = JudgeSettings { rubric_mode: RubricMode::ReferenceGuided, ..fast_settings() };
    let client = JudgeClient::new(MockJudge::new(0), settings).unwrap();
    let req = JudgeRequest { instance: &inst, thinking: "t", reference: None };
    assert!(matches!(client.content_score(&req), Err(JudgeError::InvalidRequest(_))));
    let req = JudgeRequest { reference: Some("Grimmo wants to convey care."), ..req };
    assert!(client.content_score(&req).is_ok());
}

#[test]
fn segmentation_falls_back_to_quartiles() {
    let inst = grimmo();
    let client = JudgeClient::new(HeuristicJudge, fast_settings()).unwrap();
    let thinking = "plain words without any stage markers at all";
    let seg = client.segment_stages(&JudgeRequest { instance: &inst, thinking, reference: None }).unwrap();
    assert_eq!(seg.source, SegmentSource::QuartileFallback);
    assert_eq!(seg.ranges, quartile_ranges(8));

    let strict = JudgeClient::new(HeuristicJudge, JudgeSettings { segmentation_fallback: false, ..fast_settings() }).unwrap();
    assert!(matches!(
        strict.segment_stages(&JudgeRequest { instance: &inst, thinking, reference: None }),
        Err(JudgeError::SegmentationDeclined)
    ));

    let staged = "Cues: he smiles. Interpreting this, he feels warm. His goal is to help. Therefore the answer is D";
    let seg = client.segment_stages(&JudgeRequest { instance: &inst, thinking: staged, reference: None }).unwrap();
    assert_eq!(seg.source, SegmentSource::Judge);
    assert_eq!(seg.ranges, [0..3, 3..9, 9..13, 13..18]);
}

#[test]
fn heuristic_judge_reads_stage_order_and_coverage() {
    let inst = grimmo();
    let client = JudgeClient::new(HeuristicJudge, fast_settings()).unwrap();
    let ordered = "Cues noticed: Grimmo sits by the window. Interpreting: he feels lonely. Goal: Fennel wants to comfort. Therefore the answer is D.";
    let v = client.structural_score(&JudgeRequest { instance: &inst, thinking: ordered, reference: None }).unwrap();
    assert_eq!(v.score, 1.0);
    let rushed = "The answer is D. Cues: he sits there. He feels lonely. His goal is company.";
    let v = client.structural_score(&JudgeRequest { instance: &inst, thinking: rushed, reference: None }).unwrap();
    assert!(v.premature_conclusion && !v.in_order);
    assert_eq!(v.score, 0.25);

    assert_eq!(HeuristicJudge::story_coverage("alpha beta gamma delta", "alpha gamma"), 0.5);
    assert_eq!(HeuristicJudge::story_coverage("", "alpha"), 0.0);
}

proptest! {
    #[test]
    fn parsed_structural_score_is_recomputable(bits in proptest::collection::vec(any::<bool>(), 6)) {
        let raw = serde_json::json!({
            "encoding": bits[0], "interpretation": bits[1], "goal": bits[2], "response": bits[3],
            "in_order": bits[4], "premature_conclusion": bits[5],
        }).to_string();
        let v = parse_structural_verdict(&raw).unwrap();
        prop_assert_eq!(v.score, v.recompute());
        prop_assert!([0.0, 0.03125, 0.0625, 0.09375, 0.125, 0.1875, 0.25, 0.375, 0.5, 0.75, 1.0].contains(&v.score));
    }

    #[test]
    fn content_scores_never_exceed_stated_cap(score in 0.0..=1.0f64, tier in 0usize..4) {
        let t = ContentTier::ALL[tier];
        let raw = serde_json::json!({"tier": format!("{t:?}"), "score": score}).to_string();
        let v = parse_content_verdict(&raw).unwrap();
        prop_assert!(v.score <= t.cap());
        prop_assert_eq!(v.clamped, score > t.cap());
    }
}

#[test]
fn free_text_content_verdicts() {
    let v = parse_content_verdict("score: 0.15 (hallucinated cues)").unwrap();
    assert_eq!((v.score, v.tier, v.clamped), (0.15, ContentTier::PerceptionFailure, false));
    let v = parse_content_verdict("1.0").unwrap();
    assert_eq!((v.score, v.tier), (1.0, ContentTier::HighQuality));
}

#[test]
fn mock_verdicts_vary_across_requests() {
    let inst = grimmo();
    let client = JudgeClient::new(MockJudge::new(3), fast_settings()).unwrap();
    let scores: std::collections::BTreeSet<u64> = (0..1000)
        .map(|i| {
            let thinking = format!("trace number {i}");
            client.content_score(&JudgeRequest { instance: &inst, thinking: &thinking, reference: None }).unwrap().score.to_bits()
        })
        .collect();
    assert!(scores.len() > 100, "{}", scores.len());
}

#[test]
fn unavailable_backend_segmentation_falls_back() {
    let inst = grimmo();
    let client = JudgeClient::new(Flaky { failures: AtomicU32::new(100), fatal: false }, fast_settings()).unwrap();
    let seg = client.segment_stages(&JudgeRequest { instance: &inst, thinking: "a b c d e", reference: None }).unwrap();
    assert_eq!((seg.source, seg.ranges), (SegmentSource::QuartileFallback, quartile_ranges(5)));
}
