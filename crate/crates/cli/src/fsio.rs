//! File plumbing: atomic writes and the JSON-lines corpus format.

use crate::CliError;
use ask_core::corpus::SyntheticCorpus;
use serde::Deserialize;
use std::io::BufRead;
use std::path::Path;

/// Write-temp-then-rename so partial output never lands under the final
/// name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    id: u64,
    audio: Vec<f64>,
    text: Vec<f64>,
}

/// One object per line: {id, audio: [d_in floats], text: [d_in floats]}.
/// Ids must be the dense range 0..n.
pub fn read_jsonl_corpus(path: &Path) -> Result<SyntheticCorpus, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open corpus {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<CorpusLine> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CorpusLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("corpus line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config("corpus file has no pairs".to_string()));
    }
    rows.sort_by_key(|r| r.id);
    let d_in = rows[0].audio.len();
    for (i, row) in rows.iter().enumerate() {
        if row.id != i as u64 {
            return Err(CliError::Config(format!(
                "corpus ids must be the dense range 0..{}; found {}",
                rows.len(),
                row.id
            )));
        }
        if row.audio.len() != d_in || row.text.len() != d_in {
            return Err(CliError::Config(format!(
                "corpus id {}: feature lengths {}x{} do not match d_in {d_in}",
                row.id,
                row.audio.len(),
                row.text.len()
            )));
        }
    }
    let pairs = rows.into_iter().map(|r| (r.audio, r.text)).collect();
    SyntheticCorpus::from_pairs(pairs).map_err(|e| CliError::Config(e.to_string()))
}
