use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sip_reward::provenance::{data_lines, InputDigest, Provenance};

use crate::config::{config_value, RunConfig};
use crate::error::CliError;
use crate::Format;

pub type Sink = BufWriter<Box<dyn Write>>;

pub fn open(path: Option<&Path>) -> Result<Sink, CliError> {
    let inner: Box<dyn Write> = match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            Box::new(File::create(p).map_err(|e| CliError::io(p, e))?)
        }
        None => Box::new(io::stdout()),
    };
    Ok(BufWriter::new(inner))
}

pub fn provenance(command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<Provenance, CliError> {
    let digests = inputs
        .iter()
        .map(|p| InputDigest::of_file(p).map_err(|e| CliError::io(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Provenance::new(command, &config_value(cfg), digests))
}

pub fn header(w: &mut Sink, prov: &Provenance, format: Format) -> Result<(), CliError> {
    match format {
        Format::Jsonl => prov.write_jsonl_header(w),
        Format::Table | Format::Csv => prov.write_comment_header(w),
    }
    .map_err(write_error)
}

pub fn json_line<T: Serialize>(w: &mut Sink, value: &T) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CliError::Data(format!("cannot write output: {e}")))?;
    w.write_all(b"\n").map_err(write_error)
}

pub fn finish(mut w: Sink) -> Result<(), CliError> {
    w.flush().map_err(write_error)
}

pub fn write_error(e: io::Error) -> CliError {
    CliError::Data(format!("cannot write output: {e}"))
}

/// Records of a JSONL file, skipping blank lines and a provenance header.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    data_lines(&text)
        .map(|(line_no, line)| {
            serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}:{line_no}: {e}", path.display())))
        })
        .collect()
}
