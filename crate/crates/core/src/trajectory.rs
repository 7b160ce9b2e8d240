//! Parsing of tagged reasoning outputs and the statistics computed over the
//! thinking segment: token length, n-gram repetition ratio, positional
//! quartiles and explicit option mentions.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnswerOption, Label};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("trajectory has no thinking segment")]
    MissingThinking,
    #[error("n-gram order must be at least 1")]
    InvalidNgramOrder,
}

/// Which tag pair wraps the reasoning segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagStyle {
    #[default]
    Think,
    Thinking,
}

impl TagStyle {
    pub fn open(self) -> &'static str {
        match self {
            TagStyle::Think => "<think>",
            TagStyle::Thinking => "<thinking>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            TagStyle::Think => "</think>",
            TagStyle::Thinking => "</thinking>",
        }
    }
}

const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTrajectory {
    pub raw: String,
    pub thinking: Option<String>,
    pub answer_label: Option<Label>,
    pub well_formed: bool,
}

impl ParsedTrajectory {
    /// Canonical tagged rendering. Malformed trajectories render as their raw text.
    pub fn render(&self, style: TagStyle) -> String {
        match (&self.thinking, self.answer_label, self.well_formed) {
            (Some(thinking), Some(label), true) => render_tagged(thinking, label, style),
            _ => self.raw.clone(),
        }
    }
}

pub fn render_tagged(thinking: &str, label: Label, style: TagStyle) -> String {
    format!(
        "{}\n{}\n{}{}{}{}",
        style.open(),
        thinking,
        style.close(),
        ANSWER_OPEN,
        label,
        ANSWER_CLOSE
    )
}

/// Parses `raw` using the given tag style. Never fails: anything that is not
/// exactly one thinking block followed by exactly one answer block holding a
/// label comes back with `well_formed = false`.
pub fn parse_trajectory(raw: &str, style: TagStyle) -> ParsedTrajectory {
    let think = block(raw, style.open(), style.close());
    let answer = block(raw, ANSWER_OPEN, ANSWER_CLOSE);
    let thinking = think.as_ref().map(|b| b.inner.trim().to_string());
    let answer_label = answer.as_ref().and_then(|b| extract_label(b.inner));

    let well_formed = match (&think, &answer) {
        (Some(t), Some(a)) => {
            t.unique && a.unique && t.end <= a.start && answer_label.is_some()
        }
        _ => false,
    };
    ParsedTrajectory { raw: raw.to_string(), thinking, answer_label, well_formed }
}

/// Parses with whichever tag style the text uses (`<thinking>` if present, else `<think>`).
pub fn parse_trajectory_any(raw: &str) -> ParsedTrajectory {
    let style = if raw.contains(TagStyle::Thinking.open()) || raw.contains(TagStyle::Thinking.close()) {
        TagStyle::Thinking
    } else {
        TagStyle::Think
    };
    parse_trajectory(raw, style)
}

struct Block<'a> {
    inner: &'a str,
    start: usize,
    end: usize,
    unique: bool,
}

/// First `open … close` block, and whether both tags occur exactly once.
fn block<'a>(raw: &'a str, open: &str, close: &str) -> Option<Block<'a>> {
    let start = raw.find(open)?;
    let inner_start = start + open.len();
    let close_rel = raw[inner_start..].find(close)?;
    let inner_end = inner_start + close_rel;
    Some(Block {
        inner: &raw[inner_start..inner_end],
        start,
        end: inner_end + close.len(),
        unique: raw.matches(open).count() == 1 && raw.matches(close).count() == 1,
    })
}

/// First uppercase ASCII letter not adjacent to another letter or digit.
pub fn extract_label(text: &str) -> Option<Label> {
    let chars: Vec<char> = text.chars().collect();
    chars.iter().enumerate().find_map(|(i, &c)| {
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        (c.is_ascii_uppercase() && before_ok && after_ok).then(|| Label::new(c)).flatten()
    })
}

/// Splits text into tokens that are substrings of the input.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

/// Whitespace-delimited tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

pub const DEFAULT_NGRAM_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub length_tokens: usize,
    pub repetition_ratio: f64,
    pub ngram_order: usize,
    pub quartile_boundaries: [Range<usize>; 4],
}

/// `1 - distinct/total` over the n-grams of `tokens`; 0 when there are none.
pub fn repetition_ratio(tokens: &[&str], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[&str]> = tokens.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

/// Four contiguous ranges covering `0..len`; the first `len % 4` get one extra token.
pub fn quartile_ranges(len: usize) -> [Range<usize>; 4] {
    let base = len / 4;
    let extra = len % 4;
    let mut start = 0;
    std::array::from_fn(|q| {
        let size = base + usize::from(q < extra);
        let r = start..start + size;
        start += size;
        r
    })
}

pub fn compute_stats(
    t: &ParsedTrajectory,
    tokenizer: &dyn Tokenizer,
    n: usize,
) -> Result<TrajectoryStats, TrajectoryError> {
    if n == 0 {
        return Err(TrajectoryError::InvalidNgramOrder);
    }
    let thinking = t.thinking.as_deref().ok_or(TrajectoryError::MissingThinking)?;
    let tokens = tokenizer.tokenize(thinking);
    Ok(TrajectoryStats {
        length_tokens: tokens.len(),
        repetition_ratio: repetition_ratio(&tokens, n),
        ngram_order: n,
        quartile_boundaries: quartile_ranges(tokens.len()),
    })
}

/// How an option reference was recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionKind {
    /// `option C`
    Named,
    /// `C.` or `C)`
    Enumerated,
    /// The option's full text, three or more words.
    Quoted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionMention {
    pub token_index: usize,
    pub label: Label,
    pub kind: MentionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OptionMentionProfile {
    pub per_quartile_counts: [usize; 4],
    pub total: usize,
}

impl OptionMentionProfile {
    pub fn from_mentions(mentions: &[OptionMention], ranges: &[Range<usize>; 4]) -> Self {
        let buckets = bucket_mentions(mentions, ranges);
        let per_quartile_counts = std::array::from_fn(|q| buckets[q].len());
        Self { per_quartile_counts, total: per_quartile_counts.iter().sum() }
    }
}

/// Groups mentions by the range containing their start index, keeping order.
/// Mentions outside every range are dropped.
pub fn bucket_mentions(mentions: &[OptionMention], ranges: &[Range<usize>; 4]) -> [Vec<OptionMention>; 4] {
    let mut out: [Vec<OptionMention>; 4] = Default::default();
    for m in mentions {
        if let Some(q) = ranges.iter().position(|r| r.contains(&m.token_index)) {
            out[q].push(*m);
        }
    }
    out
}

fn normalize(token: &str) -> String {
    token.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

fn normalized_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(normalize).filter(|w| !w.is_empty()).collect()
}

/// End (exclusive token index) of `words` matched starting at token `start`,
/// skipping tokens that normalise to nothing.
fn match_words(norm: &[String], start: usize, words: &[String]) -> Option<usize> {
    let mut i = start;
    for (k, w) in words.iter().enumerate() {
        if k > 0 {
            while i < norm.len() && norm[i].is_empty() {
                i += 1;
            }
        }
        if norm.get(i)? != w {
            return None;
        }
        i += 1;
    }
    Some(i)
}

/// `C.` / `C)` / `(C)` at a token boundary for an existing label.
fn enumerated_label(token: &str, labels: &[Label]) -> Option<Label> {
    let body = token.trim_start_matches(['(', '[', '"', '\'', '\u{201c}', '\u{2018}']);
    let mut chars = body.chars();
    let label = Label::new(chars.next()?)?;
    if !matches!(chars.next(), Some('.') | Some(')')) {
        return None;
    }
    if chars.next().is_some_and(char::is_alphanumeric) {
        return None;
    }
    labels.contains(&label).then_some(label)
}

/// Chronological option mentions in a token sequence. A label reference
/// immediately followed by that option's text counts once.
pub fn find_option_mentions(tokens: &[&str], options: &[AnswerOption]) -> Vec<OptionMention> {
    let labels: Vec<Label> = options.iter().map(|o| o.label).collect();
    let texts: Vec<(Label, Vec<String>)> = options
        .iter()
        .map(|o| (o.label, normalized_words(&o.text)))
        .filter(|(_, w)| w.len() >= 3)
        .collect();
    let norm: Vec<String> = tokens.iter().map(|t| normalize(t)).collect();
    let text_of = |label: Label| texts.iter().find(|(l, _)| *l == label).map(|(_, w)| w.as_slice());
    let next_content = |mut i: usize| {
        while i < norm.len() && norm[i].is_empty() {
            i += 1;
        }
        i
    };

    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut found: Option<(Label, MentionKind, usize)> = None;
        if norm[i] == "option" && i + 1 < tokens.len() {
            let next = tokens[i + 1].trim_matches(|c: char| !c.is_alphanumeric());
            if let Some(label) = next.parse::<Label>().ok().filter(|l| labels.contains(l)) {
                found = Some((label, MentionKind::Named, i + 2));
            }
        }
        if found.is_none() {
            if let Some(label) = enumerated_label(tokens[i], &labels) {
                found = Some((label, MentionKind::Enumerated, i + 1));
            }
        }
        if let Some((label, kind, end)) = found {
            let end = text_of(label)
                .and_then(|w| match_words(&norm, next_content(end), w))
                .unwrap_or(end);
            mentions.push(OptionMention { token_index: i, label, kind });
            i = end;
            continue;
        }
        if !norm[i].is_empty() {
            if let Some((label, end)) = texts
                .iter()
                .find_map(|(l, w)| match_words(&norm, i, w).map(|end| (*l, end)))
            {
                mentions.push(OptionMention { token_index: i, label, kind: MentionKind::Quoted });
                i = end;
                continue;
            }
        }
        i += 1;
    }
    mentions
}

/// Option mentions in the thinking segment, bucketed into positional quartiles.
pub fn count_option_mentions(
    t: &ParsedTrajectory,
    options: &[AnswerOption],
) -> Result<OptionMentionProfile, TrajectoryError> {
    let thinking = t.thinking.as_deref().ok_or(TrajectoryError::MissingThinking)?;
    let tokens = WhitespaceTokenizer.tokenize(thinking);
    let mentions = find_option_mentions(&tokens, options);
    Ok(OptionMentionProfile::from_mentions(&mentions, &quartile_ranges(tokens.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(c: char) -> Label {
        Label::new(c).unwrap()
    }

    fn thinking_only(text: &str) -> ParsedTrajectory {
        parse_trajectory(&render_tagged(text, label('A'), TagStyle::Think), TagStyle::Think)
    }

    fn grimmo_options() -> Vec<AnswerOption> {
        crate::dataset::tests::grimmo().options
    }

    #[test]
    fn well_formed_think_answer() {
        let p = parse_trajectory("<think>…reasoning…</think><answer>D</answer>", TagStyle::Think);
        assert!(p.well_formed);
        assert_eq!(p.answer_label, Some(label('D')));
        assert_eq!(p.thinking.as_deref(), Some("…reasoning…"));
    }

    #[test]
    fn no_tags_is_malformed() {
        let p = parse_trajectory("no tags at all", TagStyle::Think);
        assert!(!p.well_formed);
        assert_eq!(p.answer_label, None);
        assert_eq!(p.thinking, None);
    }

    #[test]
    fn answer_label_ignores_punctuation() {
        let p = parse_trajectory("<think>x</think><answer>Answer: C.</answer>", TagStyle::Think);
        assert!(p.well_formed);
        assert_eq!(p.answer_label, Some(label('C')));
        assert_eq!(extract_label("(B)"), Some(label('B')));
        assert_eq!(extract_label("none"), None);
    }

    #[test]
    fn structural_defects_are_malformed() {
        for raw in [
            "<think>x</think><answer>D",
            "<think>x</think><answer>D</answer><answer>C</answer>",
            "<answer>D</answer><think>x</think>",
            "<think>x<think>y</think><answer>D</answer>",
            "<think>x</think><answer>maybe</answer>",
            "<thinking>x</thinking><answer>D</answer>",
        ] {
            assert!(!parse_trajectory(raw, TagStyle::Think).well_formed, "{raw}");
        }
    }

    #[test]
    fn both_tag_styles_are_understood() {
        let p = parse_trajectory_any("<thinking>a b</thinking>\n<answer>B</answer>");
        assert!(p.well_formed);
        assert_eq!(p.thinking.as_deref(), Some("a b"));
        let p = parse_trajectory_any("<think>a b</think><answer>B</answer>");
        assert!(p.well_formed);
    }

    #[test]
    fn repetition_ratio_examples() {
        let s = compute_stats(&thinking_only("a b c d"), &WhitespaceTokenizer, 3).unwrap();
        assert_eq!(s.repetition_ratio, 0.0);
        assert_eq!(s.length_tokens, 4);

        // trigrams: abc bca cab abc bca cab abc -> 7 total, 3 distinct
        let s = compute_stats(&thinking_only("a b c a b c a b c"), &WhitespaceTokenizer, 3).unwrap();
        assert!((s.repetition_ratio - 4.0 / 7.0).abs() < 1e-15);

        let s = compute_stats(&thinking_only("a b"), &WhitespaceTokenizer, 3).unwrap();
        assert_eq!(s.repetition_ratio, 0.0);
    }

    #[test]
    fn stats_require_thinking() {
        let p = parse_trajectory("plain", TagStyle::Think);
        assert_eq!(compute_stats(&p, &WhitespaceTokenizer, 3), Err(TrajectoryError::MissingThinking));
        assert_eq!(count_option_mentions(&p, &grimmo_options()), Err(TrajectoryError::MissingThinking));
        assert_eq!(
            compute_stats(&thinking_only("a"), &WhitespaceTokenizer, 0),
            Err(TrajectoryError::InvalidNgramOrder)
        );
    }

    #[test]
    fn quartiles_are_balanced() {
        let sizes: Vec<usize> = quartile_ranges(10).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(quartile_ranges(0), [0..0, 0..0, 0..0, 0..0]);
        assert_eq!(quartile_ranges(5), [0..2, 2..3, 3..4, 4..5]);
    }

    #[test]
    fn no_mentions() {
        let p = thinking_only("the robot lives underground and has never seen the sky");
        assert_eq!(count_option_mentions(&p, &grimmo_options()).unwrap().total, 0);
    }

    #[test]
    fn tail_mentions_land_in_last_quartile() {
        // 20 filler tokens + 9 tokens: "C." at index 24 and "option A" at 27,
        // quartiles of 29 tokens are [0,8) [8,15) [15,22) [22,29).
        let filler = vec!["word"; 20].join(" ");
        let p = thinking_only(&format!("{filler} so the answer is C. But maybe option A"));
        let profile = count_option_mentions(&p, &grimmo_options()).unwrap();
        assert_eq!(profile.total, 2);
        assert_eq!(profile.per_quartile_counts, [0, 0, 0, 2]);
    }

    #[test]
    fn mention_kinds() {
        let opts = grimmo_options();
        let tokens: Vec<&str> =
            "Option B is out. (C) too. D. A glowing mushroom spinning in the wind fits; a floating cloud does not, A or B maybe"
                .split_whitespace()
                .collect();
        let m = find_option_mentions(&tokens, &opts);
        let got: Vec<(usize, char, MentionKind)> = m.iter().map(|m| (m.token_index, m.label.as_char(), m.kind)).collect();
        assert_eq!(
            got,
            vec![
                (0, 'B', MentionKind::Named),
                (4, 'C', MentionKind::Enumerated),
                (6, 'D', MentionKind::Enumerated),
                (15, 'A', MentionKind::Quoted),
            ]
        );
    }

    #[test]
    fn article_a_is_not_a_mention() {
        let tokens: Vec<&str> = "A robot spins. A.M. is early".split_whitespace().collect();
        assert!(find_option_mentions(&tokens, &grimmo_options()).is_empty());
    }

    proptest! {
        #[test]
        fn repetition_ratio_in_unit_interval(tokens in prop::collection::vec("[a-d]", 0..60), n in 1usize..5) {
            let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
            let rho = repetition_ratio(&refs, n);
            prop_assert!((0.0..=1.0).contains(&rho));
        }

        #[test]
        fn repetition_ratio_relabeling_invariant(tokens in prop::collection::vec(0u8..6, 0..60), shift in 1u8..6) {
            let a: Vec<String> = tokens.iter().map(|t| format!("w{t}")).collect();
            let b: Vec<String> = tokens.iter().map(|t| format!("v{}", (t + shift) % 6)).collect();
            let ra: Vec<&str> = a.iter().map(String::as_str).collect();
            let rb: Vec<&str> = b.iter().map(String::as_str).collect();
            prop_assert_eq!(repetition_ratio(&ra, 3), repetition_ratio(&rb, 3));
        }

        #[test]
        fn quartiles_partition(len in 0usize..10_000) {
            let q = quartile_ranges(len);
            prop_assert_eq!(q[0].start, 0);
            prop_assert_eq!(q[3].end, len);
            for w in q.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let sizes: Vec<usize> = q.iter().map(|r| r.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn bucketing_preserves_chronology(words in prop::collection::vec(prop::sample::select(vec!["A.", "option", "B", "C)", "x", "y", "A"]), 0..80)) {
            let opts = grimmo_options();
            let mentions = find_option_mentions(&words, &opts);
            let buckets = bucket_mentions(&mentions, &quartile_ranges(words.len()));
            let flat: Vec<OptionMention> = buckets.concat();
            prop_assert_eq!(flat, mentions);
        }

        #[test]
        fn render_parse_round_trip(words in prop::collection::vec("[a-z]{1,8}", 1..40), idx in 0usize..26, thinking_tag in any::<bool>()) {
            let style = if thinking_tag { TagStyle::Thinking } else { TagStyle::Think };
            let thinking = words.join(" ");
            let lab = Label::from_index(idx).unwrap();
            let p = parse_trajectory(&render_tagged(&thinking, lab, style), style);
            prop_assert!(p.well_formed);
            let again = parse_trajectory(&p.render(style), style);
            prop_assert_eq!(again, p);
        }
    }
}
