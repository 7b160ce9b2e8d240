//! Prompt templates for the structural, content and segmentation judges.
//!
//! User messages wrap each field in a pseudo-XML block (`<story>`, `<question>`,
//! `<options>`, `<reference>`, `<reasoning>`) so local backends can recover
//! the fields without a second channel.

use crate::dataset::Instance;

pub const STRUCTURAL_SYSTEM: &str = "\
You are an expert evaluator of social reasoning. You check whether a model's \
reasoning trajectory follows the four-stage Social Information Processing (SIP) \
framework, in this order:
1. Cue Encoding: identifying the relevant social signals in the story.
2. Cue Interpretation: inferring the characters' latent mental states from those cues.
3. Goal Clarification: determining the social objectives and intentions in play.
4. Response Generation: selecting the response or answer that follows from the above.

For the reasoning you are given, decide:
- which of the four stages are present;
- whether the stages that are present appear in the order above (stage skipping \
and back-tracking count as out of order);
- whether the reasoning commits to an answer before it has encoded and \
interpreted the story cues (a premature conclusion, e.g. starting from the \
answer options and justifying one of them after the fact).

Reply with a single JSON object and nothing else:
{\"encoding\": true|false, \"interpretation\": true|false, \"goal\": true|false, \
\"response\": true|false, \"in_order\": true|false, \"premature_conclusion\": true|false}";

pub const CONTENT_SYSTEM: &str = "\
You are an expert Evaluator of Social Reasoning and Theory of Mind. Your task is to \
score a Candidate Reasoning Process by comparing it against a Reference SIP Analysis. \
The Reference SIP Analysis represents the standard reasoning path following the \
Social Information Processing (SIP) framework. It outlines which social cues should \
be noticed, how they should be interpreted (including Theory of Mind), and what the \
goal should be.

Evaluation Logic: social reasoning is sequential. Evaluate the Candidate Reasoning \
in a strict order: Encoding, Interpretation, Goal, Response. Strictly penalize the \
candidate if it deviates from the Reference in the early stages.

Scoring Rubric (0.0 - 1.0):
1. Tier 1: Perception Failure (Score: 0.0 - 0.2)
   - Check: compare the candidate's Encoding against the Reference.
   - Criteria: does the candidate hallucinate cues that are not in the Reference? Does it miss critical facts?
   - Rule: if the candidate's observed cues contradict or miss key points in the Reference, the score cannot exceed 0.2.
2. Tier 2: Interpretation & Theory of Mind Failure (Score: 0.3 - 0.5)
   - Check: compare the candidate's Interpretation against the Reference.
   - Criteria: does the candidate correctly infer the characters' mental states as described in the Reference?
   - Rule: if the candidate misinterprets the social dynamic or the characters' mental states, the score cannot exceed 0.5.
3. Tier 3: Goal/Logic Alignment (Score: 0.6 - 0.7)
   - Check: compare the candidate's Goal Clarification against the Reference.
   - Criteria: is the reasoning linking the Goal to the Action weak?
   - Rule: if the strategic logic is flawed despite correct understanding, the score is capped at 0.7.
4. Tier 4: High Quality (Score: 0.8 - 1.0)
   - Criteria: the candidate closely matches the Reference in Encoding, Interpretation (ToM), and Goal. The reasoning logically justifies the Action.
   - Rule: 1.0 for perfect alignment with the Reference's logic; 0.8-0.9 for correct logic with minor redundancy.
Output Format: score (e.g., 0.7)";

/// Appended to the content rubric when no reference analysis is supplied.
pub const CONTENT_REFERENCE_FREE_NOTE: &str = "\
No Reference SIP Analysis is available for this item. Apply the same rubric using \
the story itself and the gold answer as the reference.";

pub const SEGMENTATION_SYSTEM: &str = "\
You split a reasoning trajectory into the four Social Information Processing stages: \
Cue Encoding, Cue Interpretation, Goal Clarification, Response Generation. The \
reasoning is tokenized on whitespace and tokens are numbered from 0. Return four \
contiguous, ordered half-open token ranges that together cover every token; a stage \
that does not occur gets an empty range. Reply with JSON only: \
{\"ranges\": [[start, end], [start, end], [start, end], [start, end]]}. \
If the reasoning cannot be segmented, reply DECLINE.";

fn options_block(instance: &Instance) -> String {
    instance
        .options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn item_blocks(instance: &Instance) -> String {
    format!(
        "<story>\n{}\n</story>\n<question>\n{}\n</question>\n<options>\n{}\n</options>\n",
        instance.story,
        instance.question,
        options_block(instance)
    )
}

pub fn structural_user(instance: &Instance, thinking: &str) -> String {
    format!("{}<reasoning>\n{}\n</reasoning>", item_blocks(instance), thinking)
}

pub fn content_user(instance: &Instance, thinking: &str, reference: Option<&str>) -> String {
    let reference = match reference {
        Some(r) => format!("<reference>\n{r}\n</reference>\n"),
        None => format!("<gold_answer>{}</gold_answer>\n", instance.answer),
    };
    format!("{}{}<reasoning>\n{}\n</reasoning>", item_blocks(instance), reference, thinking)
}

pub fn segmentation_user(instance: &Instance, thinking: &str, token_count: usize) -> String {
    format!(
        "{}Token count: {}\n<reasoning>\n{}\n</reasoning>",
        item_blocks(instance),
        token_count,
        thinking
    )
}

/// Text between `<tag>` and `</tag>` in a prompt, trimmed.
pub fn extract_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].rfind(&close)?;
    Some(text[start..end].trim())
}

/// Value of the `Token count: N` line of a segmentation prompt.
pub fn extract_token_count(text: &str) -> Option<usize> {
    text.lines()
        .find_map(|l| l.trim().strip_prefix("Token count:"))
        .and_then(|v| v.trim().parse().ok())
}
