//! Append-only metric records, one JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Environment frames consumed when the record was made.
    pub step: u64,
    pub split: String,
    pub name: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Records kept in memory and mirrored to a file when one is attached.
#[derive(Debug, Default)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
    file: Option<(PathBuf, File)>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Create (truncating) `path` and write any `existing` records to it.
    pub fn create(path: &Path, existing: Vec<MetricRecord>) -> Result<Self> {
        let mut file = File::create(path)?;
        for r in &existing {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
        file.flush()?;
        Ok(Self { records: existing, file: Some((path.to_path_buf(), file)) })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some((_, f)) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::FileNotFound(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let r = |step| MetricRecord {
            step,
            split: "eval".into(),
            name: "return".into(),
            value: 0.1 + step as f64,
            seed: 3,
            config_hash: "ab".into(),
        };
        let mut log = MetricLog::create(&path, vec![r(0)]).unwrap();
        log.push(r(5)).unwrap();
        assert_eq!(read_log(&path).unwrap(), vec![r(0), r(5)]);
        assert_eq!(log.records().len(), 2);
        assert!(matches!(read_log(&dir.path().join("none")), Err(CliError::FileNotFound(_))));
    }
}
