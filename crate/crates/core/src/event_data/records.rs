use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format used when writing records.
pub const CANONICAL_TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub precinct: String,
    pub premises: String,
    pub timestamp: NaiveDateTime,
    pub category: String,
}

/// 3-hour slot of the day, `0..=7`.
pub fn slot_of_timestamp(ts: &NaiveDateTime) -> u8 {
    (ts.hour() / 3) as u8
}

pub fn parse_timestamp(raw: &str, format: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(raw.trim(), format)
        .map_err(|e| Error::Data(format!("timestamp {raw:?} does not match {format:?}: {e}")))
}

/// How the columns of a delimited export map onto record fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub precinct: String,
    pub premises: String,
    /// One or more columns joined with a single space before parsing, e.g.
    /// separate date and time columns.
    pub timestamp: Vec<String>,
    pub category: String,
    pub timestamp_format: String,
    /// Single-byte delimiter; `"tab"` is accepted for `\t`.
    pub delimiter: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            precinct: "precinct".into(),
            premises: "premises".into(),
            timestamp: vec!["timestamp".into()],
            category: "category".into(),
            timestamp_format: CANONICAL_TIMESTAMP_FORMAT.into(),
            delimiter: ",".into(),
        }
    }
}

impl ColumnMapping {
    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_str() {
            "tab" | "\\t" | "\t" => Ok(b'\t'),
            d if d.len() == 1 => Ok(d.as_bytes()[0]),
            d => Err(Error::Config(format!("unsupported delimiter {d:?}"))),
        }
    }
}

/// A row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number, header included.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<EventRecord>,
    pub rejected: Vec<RejectedRow>,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Config(format!("column {name:?} not found in header")))
}

/// Reads delimited text. Missing mapped columns fail the whole read; bad
/// rows are collected in [`Ingested::rejected`].
pub fn read_records<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Ingested> {
    if mapping.timestamp.is_empty() {
        return Err(Error::Config("timestamp column mapping is empty".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter_byte()?)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let precinct = column_index(&headers, &mapping.precinct)?;
    let premises = column_index(&headers, &mapping.premises)?;
    let category = column_index(&headers, &mapping.category)?;
    let ts_cols = mapping
        .timestamp
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Ingested::default();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
        let raw_ts = ts_cols.iter().map(|&i| field(i)).collect::<Vec<_>>().join(" ");
        let record = (|| {
            let timestamp = parse_timestamp(&raw_ts, &mapping.timestamp_format)?;
            let rec = EventRecord {
                precinct: field(precinct).to_string(),
                premises: field(premises).to_string(),
                timestamp,
                category: field(category).to_string(),
            };
            if rec.precinct.is_empty() || rec.premises.is_empty() || rec.category.is_empty() {
                return Err(Error::Data("empty precinct, premises or category".into()));
            }
            Ok(rec)
        })();
        match record {
            Ok(rec) => out.records.push(rec),
            Err(e) => out.rejected.push(RejectedRow {
                line,
                reason: e.to_string(),
            }),
        }
    }
    if !out.rejected.is_empty() {
        log::warn!("rejected {} of {} rows", out.rejected.len(), out.rejected.len() + out.records.len());
        for r in out.rejected.iter().take(5) {
            log::warn!("line {}: {}", r.line, r.reason);
        }
    }
    Ok(out)
}

pub fn read_records_file(path: &Path, mapping: &ColumnMapping) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), mapping)
}

/// Writes records with the default column names and timestamp format.
pub fn write_records<W: Write>(writer: W, records: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["precinct", "premises", "timestamp", "category"])?;
    for r in records {
        let ts = r.timestamp.format(CANONICAL_TIMESTAMP_FORMAT).to_string();
        w.write_record([r.precinct.as_str(), r.premises.as_str(), ts.as_str(), r.category.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("<records>", e))?;
    Ok(())
}
