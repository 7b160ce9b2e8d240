//! Synthetic instances and reasoning-trace templates for the toy trainer.
//!
//! Filler words are six-letter consonant-vowel strings and story words are
//! five-letter consonant-vowel-consonant strings, so the two vocabularies
//! never collide and story coverage of a synthesized trace is exact.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Ability, AnswerOption, Instance, Label};
use crate::judge::STAGE_CUES;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Shape of a synthesized reasoning trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFamily {
    pub name: String,
    /// Approximate whitespace-token length of the thinking text.
    pub target_length: usize,
    /// Target trigram repetition ratio.
    pub repetition: f64,
    /// Fraction of the story's distinct content words the trace restates.
    pub story_coverage: f64,
    /// Which of encoding, interpretation, goal and response sections appear.
    pub stages: [bool; 4],
}

impl TemplateFamily {
    /// Mid-length, low-repetition, all four stages.
    pub fn concise() -> Self {
        Self { name: "concise".into(), target_length: 1450, repetition: 0.02, story_coverage: 0.4, stages: [true; 4] }
    }

    /// Long and loop-heavy, restating the whole story.
    pub fn verbose() -> Self {
        Self { name: "verbose".into(), target_length: 4200, repetition: 0.6, story_coverage: 1.0, stages: [true; 4] }
    }

    /// Very short, jumps straight to the answer.
    pub fn terse() -> Self {
        Self {
            name: "terse".into(),
            target_length: 150,
            repetition: 0.0,
            story_coverage: 0.0,
            stages: [false, false, false, true],
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::concise(), Self::verbose(), Self::terse()]
    }

    /// Thinking text for `answer` on `instance`, deterministic in `rng`.
    pub fn render<R: Rng>(&self, instance: &Instance, answer: Label, rng: &mut R) -> String {
        let story = story_words(&instance.story);
        let keep = ((story.len() as f64) * self.story_coverage.clamp(0.0, 1.0)).round() as usize;
        let mut chosen: Vec<&String> = story.iter().collect();
        chosen.shuffle(rng);
        chosen.truncate(keep);

        let headers: [Vec<String>; 4] = [
            words("Cues noticed in the story:"),
            words("Interpreting these cues, the character feels"),
            words("The goal is clear: the character wants"),
            vec!["Therefore,".into(), "the".into(), "answer".into(), "is".into(), format!("{answer}.")],
        ];
        let fixed: usize = headers.iter().zip(self.stages).filter(|(_, on)| *on).map(|(h, _)| h.len()).sum();
        let body = self.target_length.saturating_sub(fixed + chosen.len());
        let looped = if self.repetition > 0.0 {
            let chunk = 12usize;
            ((self.repetition * self.target_length as f64).round() as usize + chunk).min(body)
        } else {
            0
        };
        let unique = body - looped;

        let present: Vec<usize> = (0..4).filter(|&s| self.stages[s]).collect();
        let mut sections: [Vec<String>; 4] = Default::default();
        for &s in present.iter().filter(|&&s| s != 3) {
            sections[s].extend(headers[s].iter().cloned());
        }
        let first_body = present.first().copied().unwrap_or(3);
        if self.stages[0] {
            sections[0].extend(chosen.iter().map(|w| w.to_string()));
        } else {
            sections[first_body].extend(chosen.iter().map(|w| w.to_string()));
        }
        let loop_section = if self.stages[1] { 1 } else { first_body };
        let loop_chunk: Vec<String> = (0..12).map(|_| filler_word(rng)).collect();
        sections[loop_section].extend(loop_chunk.iter().cycle().take(looped).cloned());

        let body_sections: Vec<usize> = present.iter().copied().filter(|&s| s != 3).collect();
        let body_sections = if body_sections.is_empty() { vec![3] } else { body_sections };
        for i in 0..unique {
            let s = body_sections[i % body_sections.len()];
            sections[s].push(filler_word(rng));
        }
        if self.stages[3] {
            sections[3].extend(headers[3].iter().cloned());
        }
        sections.iter().filter(|s| !s.is_empty()).map(|s| s.join(" ")).collect::<Vec<_>>().join("\n")
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

const FILLER_VOCAB_SIZE: usize = 4096;

/// Fixed filler vocabulary, drawn once from a constant seed.
fn filler_vocab() -> &'static [String] {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut seen = BTreeSet::new();
        let mut vocab = Vec::with_capacity(FILLER_VOCAB_SIZE);
        while vocab.len() < FILLER_VOCAB_SIZE {
            let w: String = (0..3)
                .flat_map(|_| {
                    [
                        CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                        VOWELS[rng.random_range(0..VOWELS.len())] as char,
                    ]
                })
                .collect();
            if !STAGE_CUES.iter().any(|cues| cues.contains(&w.as_str())) && seen.insert(w.clone()) {
                vocab.push(w);
            }
        }
        vocab
    })
}

fn filler_word<R: Rng>(rng: &mut R) -> String {
    filler_vocab()[rng.random_range(0..FILLER_VOCAB_SIZE)].clone()
}

fn story_word<R: Rng>(rng: &mut R) -> String {
    let c = |rng: &mut R| CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
    let v = |rng: &mut R| VOWELS[rng.random_range(0..VOWELS.len())] as char;
    [c(rng), v(rng), c(rng), v(rng), c(rng)].iter().collect()
}

/// Distinct lower-cased story words of four or more letters, in sorted order.
pub fn story_words(story: &str) -> BTreeSet<String> {
    story
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| w.chars().count() >= 4)
        .collect()
}

/// `n` random multiple-choice instances with `options` answer options each.
pub fn synthetic_dataset(n: usize, options: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sentences: Vec<String> = (0..6)
                .map(|_| {
                    let mut s: Vec<String> = (0..5).map(|_| story_word(&mut rng)).collect();
                    s[0] = capitalize(&s[0]);
                    format!("{}.", s.join(" "))
                })
                .collect();
            let opts: Vec<AnswerOption> = (0..options)
                .map(|k| AnswerOption {
                    label: Label::from_index(k).expect("at most 26 options"),
                    text: (0..3).map(|_| story_word(&mut rng)).collect::<Vec<_>>().join(" "),
                })
                .collect();
            Instance {
                id: format!("syn-{i:04}"),
                ability: Ability::ALL[i % Ability::ALL.len()],
                sub_ability: None,
                story: sentences.join(" "),
                question: "What is the most fitting response?".into(),
                answer: Label::from_index(rng.random_range(0..options)).expect("at most 26 options"),
                options: opts,
            }
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
