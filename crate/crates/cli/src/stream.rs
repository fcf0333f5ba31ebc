//! JSON Lines stream files: a header line, then one record per line.

use std::io::{BufRead, Write};

use mode_core::scenario::{Phase, ScenarioStream, StreamRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "mode-ctta-stream";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub phase: Phase,
    pub domains: Vec<String>,
    pub records: usize,
}

pub fn write_stream(out: &mut impl Write, stream: &ScenarioStream, domains: &[String]) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        phase: stream.phase,
        domains: domains.to_vec(),
        records: stream.records.len(),
    };
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    serde_json::to_writer(&mut *out, &header).map_err(|e| CliError::Data(e.to_string()))?;
    out.write_all(b"\n").map_err(io)?;
    for r in &stream.records {
        serde_json::to_writer(&mut *out, r).map_err(|e| CliError::Data(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn read_stream(input: impl BufRead) -> Result<(Header, ScenarioStream)> {
    let mut lines = input.lines();
    let bad = |m: String| CliError::Data(m);
    let first = lines.next().ok_or_else(|| bad("empty stream file".into()))?.map_err(|e| bad(e.to_string()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("stream header: {e}")))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported stream {} v{}", header.format, header.version)));
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        let r: StreamRecord = serde_json::from_str(&line).map_err(|e| bad(format!("record {}: {e}", i + 1)))?;
        records.push(r);
    }
    if records.len() != header.records {
        return Err(bad(format!("header announces {} records, found {}", header.records, records.len())));
    }
    let stream = ScenarioStream { phase: header.phase, records };
    stream.validate()?;
    Ok((header, stream))
}
