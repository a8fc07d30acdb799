//! Line-delimited JSON streaming.

use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Iterates over the records of a JSONL stream. Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> impl Iterator<Item = Result<T, JsonlError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(e.into())),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(|source| JsonlError::Json { line: i + 1, source })),
    })
}

pub fn write_jsonl_record<T: Serialize, W: Write>(mut writer: W, record: &T) -> io::Result<()> {
    serde_json::to_writer(&mut writer, record)?;
    writer.write_all(b"\n")
}

pub fn write_jsonl<'a, T: Serialize + 'a, W: Write>(
    mut writer: W,
    records: impl IntoIterator<Item = &'a T>,
) -> io::Result<usize> {
    let mut n = 0;
    for r in records {
        write_jsonl_record(&mut writer, r)?;
        n += 1;
    }
    Ok(n)
}
