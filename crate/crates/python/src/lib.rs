//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists with the same field names as the JSON records the CLI reads and
//! writes.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sip_core::analysis::{self, Distractor};
use sip_core::dataset::Instance;
use sip_core::grpo::{self, TrainSetup};
use sip_core::judge::{HeuristicJudge, JudgeClient, JudgeRequest, JudgeSettings, MockJudge};
use sip_core::pairs::{self, PairConfig, ScoredSegment};
use sip_core::rewards::{self, ComponentMask, CurriculumConfig, LengthRewardConfig, LengthTerm, RewardInputs};
use sip_core::trajectory::{self, Tokenizer, WhitespaceTokenizer};

create_exception!(sip_reward, SipRewardError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SipRewardError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn from_opt<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

/// Split a raw completion into thinking and answer.
#[pyfunction]
fn parse_trajectory<'py>(py: Python<'py>, raw: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &trajectory::parse_trajectory_any(raw))
}

/// `1 - distinct/total` over whitespace-token n-grams.
#[pyfunction]
#[pyo3(signature = (text, n = trajectory::DEFAULT_NGRAM_ORDER))]
fn repetition_ratio(text: &str, n: usize) -> f64 {
    trajectory::repetition_ratio(&WhitespaceTokenizer.tokenize(text), n)
}

#[pyfunction]
#[pyo3(signature = (rho, config = None))]
fn repetition_reward(rho: f64, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: LengthRewardConfig = from_opt(config)?;
    rewards::repetition_reward(rho, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (length_tokens, config = None))]
fn window_reward(length_tokens: f64, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: LengthRewardConfig = from_opt(config)?;
    Ok(rewards::window_reward(length_tokens, &cfg))
}

#[pyfunction]
#[pyo3(signature = (step, config = None))]
fn curriculum_weights<'py>(py: Python<'py>, step: u64, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: CurriculumConfig = from_opt(config)?;
    let w = rewards::curriculum_weights(step, &cfg).map_err(err)?;
    let out = BTreeMap::from([("w_out", w.w_out), ("w_struct", w.w_struct), ("w_content", w.w_content)]);
    to_py(py, &out)
}

/// Composite reward for one trajectory. Leave `rho` and `length_tokens`
/// unset to drop the length term.
#[pyfunction]
#[pyo3(signature = (
    *, format_ok, correct, r_struct, r_content, rho = None, length_tokens = None,
    step = 0, curriculum = None, length = None, mask = None,
))]
#[allow(clippy::too_many_arguments)]
fn total_reward<'py>(
    py: Python<'py>,
    format_ok: bool,
    correct: bool,
    r_struct: f64,
    r_content: f64,
    rho: Option<f64>,
    length_tokens: Option<f64>,
    step: u64,
    curriculum: Option<&Bound<'py, PyAny>>,
    length: Option<&Bound<'py, PyAny>>,
    mask: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let length_term = match (rho, length_tokens) {
        (Some(rho), Some(length_tokens)) => LengthTerm::Measured { rho, length_tokens },
        (None, None) => LengthTerm::Disabled,
        _ => return Err(err("rho and length_tokens must be given together")),
    };
    let inputs = RewardInputs { format_ok, correct, r_struct, r_content, length: length_term };
    let mask: ComponentMask = from_opt(mask)?;
    let breakdown =
        rewards::total_reward_masked(&inputs, step, &from_opt(curriculum)?, &from_opt(length)?, mask).map_err(err)?;
    to_py(py, &breakdown)
}

#[pyfunction]
#[pyo3(signature = (rewards, eps = 1e-8))]
fn group_advantages(rewards: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    grpo::group_advantages(&rewards, eps).map_err(err)
}

/// Option mentions per positional quartile of the thinking segment.
#[pyfunction]
fn count_option_mentions<'py>(py: Python<'py>, instance: &Bound<'py, PyAny>, raw: &str) -> PyResult<Bound<'py, PyAny>> {
    let instance: Instance = from_py(instance)?;
    let parsed = trajectory::parse_trajectory_any(raw);
    to_py(py, &trajectory::count_option_mentions(&parsed, &instance.options).map_err(err)?)
}

#[pyfunction]
fn tier_assign(segment: &Bound<'_, PyAny>) -> PyResult<String> {
    let segment: ScoredSegment = from_py(segment)?;
    segment.validate().map_err(err)?;
    Ok(format!("{:?}", pairs::tier_assign(&segment)))
}

#[pyfunction]
#[pyo3(signature = (segments, config = None))]
fn build_pairs<'py>(
    py: Python<'py>,
    segments: &Bound<'py, PyAny>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let segments: Vec<ScoredSegment> = from_py(segments)?;
    for s in &segments {
        s.validate().map_err(|e| err(format!("{}: {e}", s.trajectory_ref)))?;
    }
    let cfg: PairConfig = from_opt(config)?;
    to_py(py, &pairs::build_pairs(&segments, &cfg))
}

/// Insert `(sentence, anchor)` distractors after the given story sentences.
#[pyfunction]
fn perturb_instance<'py>(
    py: Python<'py>,
    instance: &Bound<'py, PyAny>,
    distractors: Vec<(String, usize)>,
) -> PyResult<Bound<'py, PyAny>> {
    let instance: Instance = from_py(instance)?;
    let distractors: Vec<Distractor> =
        distractors.into_iter().map(|(sentence, anchor)| Distractor { sentence, anchor }).collect();
    to_py(py, &analysis::perturb_instance(&instance, &distractors).map_err(err)?)
}

/// Reproducible synthetic multiple-choice instances.
#[pyfunction]
#[pyo3(signature = (n, options = 4, seed = 0))]
fn synthetic_dataset<'py>(py: Python<'py>, n: usize, options: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &grpo::synthetic_dataset(n, options, seed))
}

/// An offline judge: `"mock"` (seeded random verdicts) or `"heuristic"`
/// (cue and story-coverage scoring).
#[pyclass(module = "sip_reward", frozen)]
struct Judge {
    client: JudgeClient,
}

#[pymethods]
impl Judge {
    #[new]
    #[pyo3(signature = (kind = "mock", seed = 0))]
    fn new(kind: &str, seed: u64) -> PyResult<Self> {
        let settings = JudgeSettings::default();
        let client = match kind {
            "mock" => JudgeClient::new(MockJudge::new(seed), settings),
            "heuristic" => JudgeClient::new(HeuristicJudge, settings),
            other => return Err(err(format!("unknown judge kind {other:?}; expected \"mock\" or \"heuristic\""))),
        };
        Ok(Self { client: client.map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Judge({})", self.client.backend_id())
    }

    fn structural_score<'py>(&self, py: Python<'py>, instance: &Bound<'py, PyAny>, thinking: &str) -> PyResult<Bound<'py, PyAny>> {
        let instance: Instance = from_py(instance)?;
        let req = JudgeRequest { instance: &instance, thinking, reference: None };
        to_py(py, &self.client.structural_score(&req).map_err(err)?)
    }

    #[pyo3(signature = (instance, thinking, reference = None))]
    fn content_score<'py>(
        &self,
        py: Python<'py>,
        instance: &Bound<'py, PyAny>,
        thinking: &str,
        reference: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let instance: Instance = from_py(instance)?;
        let req = JudgeRequest { instance: &instance, thinking, reference };
        to_py(py, &self.client.content_score(&req).map_err(err)?)
    }

    /// Train the tabular toy policy with this judge supplying process rewards.
    /// Returns the per-step metrics, the final checkpoint and the greedy
    /// training accuracy.
    #[pyo3(signature = (instances, setup = None))]
    fn train_toy<'py>(
        &self,
        py: Python<'py>,
        instances: &Bound<'py, PyAny>,
        setup: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let instances: Vec<Instance> = from_py(instances)?;
        let setup: TrainSetup = from_opt(setup)?;
        let report = py
            .detach(|| grpo::train_toy(&instances, &setup, Some(&self.client), None, &mut |_, _| {}))
            .map_err(err)?;
        let out = serde_json::json!({
            "metrics": report.metrics,
            "checkpoint": report.checkpoint,
            "train_accuracy": report.train_accuracy,
        });
        to_py(py, &out)
    }
}

#[pymodule]
fn sip_reward(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SipRewardError", m.py().get_type::<SipRewardError>())?;
    m.add_class::<Judge>()?;
    m.add_function(wrap_pyfunction!(parse_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(repetition_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(repetition_reward, m)?)?;
    m.add_function(wrap_pyfunction!(window_reward, m)?)?;
    m.add_function(wrap_pyfunction!(curriculum_weights, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(count_option_mentions, m)?)?;
    m.add_function(wrap_pyfunction!(tier_assign, m)?)?;
    m.add_function(wrap_pyfunction!(build_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_instance, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    Ok(())
}
