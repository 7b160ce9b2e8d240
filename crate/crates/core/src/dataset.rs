//! Benchmark instances, the line-delimited dataset format and seeded splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::provenance::{self, Provenance};

/// Errors raised while reading, validating or splitting datasets.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("cannot put {requested} instances in the training split, only {available} available")]
    InsufficientData { requested: usize, available: usize },
}

/// The six social-reasoning ability dimensions. Unknown names are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ability {
    Belief,
    Desire,
    Emotion,
    Intention,
    Knowledge,
    NonLiteralCommunication,
}

impl Ability {
    pub const ALL: [Ability; 6] = [
        Ability::Belief,
        Ability::Desire,
        Ability::Emotion,
        Ability::Intention,
        Ability::Knowledge,
        Ability::NonLiteralCommunication,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ability::Belief => "Belief",
            Ability::Desire => "Desire",
            Ability::Emotion => "Emotion",
            Ability::Intention => "Intention",
            Ability::Knowledge => "Knowledge",
            Ability::NonLiteralCommunication => "NonLiteralCommunication",
        }
    }
}

impl fmt::Display for Ability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A multiple-choice option label: a single uppercase ASCII letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(char);

impl Label {
    pub fn new(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then_some(Label(c))
    }

    /// The label at position `idx` (0 → `A`).
    pub fn from_index(idx: usize) -> Option<Self> {
        (idx < 26).then(|| Label((b'A' + idx as u8) as char))
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c).ok_or_else(|| format!("label `{s}` is not an uppercase letter")),
            _ => Err(format!("label `{s}` must be a single uppercase letter")),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        serializer.serialize_str(self.0.encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One labeled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub label: Label,
    pub text: String,
}

/// One benchmark item: ability, story, question, options and gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub ability: Ability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_ability: Option<String>,
    pub story: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub answer: Label,
}

impl Instance {
    /// Checks the option and answer invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.options.len() < 2 {
            return Err(format!("{} option(s), at least 2 required", self.options.len()));
        }
        for (idx, opt) in self.options.iter().enumerate() {
            let expected = Label::from_index(idx).ok_or("more than 26 options")?;
            if opt.label != expected {
                return Err(format!(
                    "option {} has label `{}`, expected `{}`",
                    idx + 1,
                    opt.label,
                    expected
                ));
            }
            if opt.text.trim().is_empty() {
                return Err(format!("option `{}` has empty text", opt.label));
            }
        }
        if !self.options.iter().any(|o| o.label == self.answer) {
            return Err(format!("answer `{}` is not one of the option labels", self.answer));
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.options.iter().map(|o| o.label)
    }

    pub fn option(&self, label: Label) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.label == label)
    }
}

/// Disjoint train/test partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Supported on-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

/// Loads and validates a dataset. A leading provenance header line is skipped.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<Instance>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        DatasetFormat::Jsonl => parse_dataset(&text),
    }
}

/// Parses line-delimited instance records from an in-memory string.
pub fn parse_dataset(text: &str) -> Result<Vec<Instance>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in provenance::data_lines(text) {
        let inst: Instance = serde_json::from_str(line).map_err(|e| DatasetError::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        inst.validate()
            .map_err(|reason| DatasetError::MalformedRecord { line_no, reason })?;
        if !seen.insert(inst.id.clone()) {
            return Err(DatasetError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

/// Writes instances one JSON object per line, preceded by an optional header.
pub fn write_dataset<W: Write>(
    mut w: W,
    instances: &[Instance],
    header: Option<&Provenance>,
) -> io::Result<()> {
    if let Some(h) = header {
        h.write_jsonl_header(&mut w)?;
    }
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Seeded unstratified split. Each side keeps the input order.
pub fn split_dataset(data: &[Instance], train_count: usize, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if train_count > data.len() {
        return Err(DatasetError::InsufficientData {
            requested: train_count,
            available: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; data.len()];
    for &i in &order[..train_count] {
        in_train[i] = true;
    }
    Ok(partition(data, &in_train))
}

/// Seeded split that allocates the training quota across abilities in
/// proportion to their frequency (largest-remainder rounding).
pub fn split_dataset_stratified(
    data: &[Instance],
    train_count: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if train_count > data.len() {
        return Err(DatasetError::InsufficientData {
            requested: train_count,
            available: data.len(),
        });
    }
    let mut strata: BTreeMap<Ability, Vec<usize>> = BTreeMap::new();
    for (i, inst) in data.iter().enumerate() {
        strata.entry(inst.ability).or_default().push(i);
    }
    let total = data.len().max(1);
    let mut quotas: Vec<(Ability, usize, f64)> = strata
        .iter()
        .map(|(&ab, members)| {
            let exact = train_count as f64 * members.len() as f64 / total as f64;
            (ab, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = train_count - quotas.iter().map(|q| q.1).sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for idx in by_remainder {
        if remaining == 0 {
            break;
        }
        if quotas[idx].1 < strata[&quotas[idx].0].len() {
            quotas[idx].1 += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; data.len()];
    for (ab, quota, _) in quotas {
        let mut members = strata[&ab].clone();
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            in_train[i] = true;
        }
    }
    Ok(partition(data, &in_train))
}

fn partition(data: &[Instance], in_train: &[bool]) -> DatasetSplit {
    let mut split = DatasetSplit { train: Vec::new(), test: Vec::new() };
    for (inst, &train) in data.iter().zip(in_train) {
        if train {
            split.train.push(inst.clone());
        } else {
            split.test.push(inst.clone());
        }
    }
    split
}
