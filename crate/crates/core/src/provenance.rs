//! Provenance headers and content digests stamped onto every output file.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Key under which the header object is stored on the first line of JSONL outputs.
pub const HEADER_KEY: &str = "provenance";

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// File name only, so digests do not depend on the working directory.
    pub name: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Ok(Self::of_bytes(
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            &bytes,
        ))
    }

    pub fn of_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self { name: name.into(), sha256: sha256_hex(bytes) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
}

impl Provenance {
    pub fn new(command: impl Into<String>, config: &serde_json::Value, inputs: Vec<InputDigest>) -> Self {
        // serde_json maps are sorted, so this rendering is canonical.
        let canonical = serde_json::to_string(config).unwrap_or_default();
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            command: command.into(),
            config_digest: sha256_hex(canonical),
            config: config.clone(),
            inputs,
        }
    }

    pub fn write_jsonl_header<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert(HEADER_KEY.to_string(), serde_json::to_value(self)?);
        serde_json::to_writer(&mut w, &obj)?;
        w.write_all(b"\n")
    }

    /// Header as `#`-prefixed comment lines, for text tables and CSV.
    pub fn write_comment_header<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# {} {} {}", self.tool, self.version, self.command)?;
        writeln!(w, "# config_digest: {}", self.config_digest)?;
        for input in &self.inputs {
            writeln!(w, "# input: {} sha256:{}", input.name, input.sha256)?;
        }
        writeln!(w, "# config: {}", serde_json::to_string(&self.config)?)
    }

    /// Reads the header from the first non-blank line of a JSONL document, if present.
    pub fn read_jsonl_header(text: &str) -> Option<Self> {
        let first = text.lines().find(|l| !l.trim().is_empty())?;
        header_value(first).and_then(|v| serde_json::from_value(v).ok())
    }
}

fn header_value(line: &str) -> Option<serde_json::Value> {
    let trimmed = line.trim_start();
    if !trimmed.starts_with('{') || !trimmed.contains(HEADER_KEY) {
        return None;
    }
    match serde_json::from_str::<serde_json::Value>(trimmed).ok()? {
        serde_json::Value::Object(mut map) if map.len() == 1 => map.remove(HEADER_KEY),
        _ => None,
    }
}

/// Non-blank lines of a JSONL document with 1-based line numbers, skipping a
/// leading provenance header.
pub fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut first = true;
    text.lines().enumerate().filter_map(move |(i, line)| {
        if line.trim().is_empty() {
            return None;
        }
        if std::mem::take(&mut first) && header_value(line).is_some() {
            return None;
        }
        Some((i + 1, line))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips_and_is_skipped() {
        let p = Provenance::new("score", &serde_json::json!({"b": 2, "a": 1}), vec![InputDigest::of_bytes("x.jsonl", b"abc")]);
        let mut buf = Vec::new();
        p.write_jsonl_header(&mut buf).unwrap();
        buf.extend_from_slice(b"{\"k\":1}\n\n{\"k\":2}\n");
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(Provenance::read_jsonl_header(&text).unwrap(), p);
        let lines: Vec<_> = data_lines(&text).collect();
        assert_eq!(lines, vec![(2, "{\"k\":1}"), (4, "{\"k\":2}")]);
    }

    #[test]
    fn config_digest_is_stable() {
        let a = Provenance::new("x", &serde_json::json!({"a": 1, "b": [1, 2]}), vec![]);
        let b = Provenance::new("x", &serde_json::json!({"b": [1, 2], "a": 1}), vec![]);
        assert_eq!(a.config_digest, b.config_digest);
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
