//! Report files: one JSON document per run plus CSV and gnuplot data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hwif::BackendKind;
use crate::model::Histogram;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: u32,
    pub tool_version: String,
    pub experiment: String,
    pub backend: BackendKind,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tsc_khz: u64,
    pub truncated: bool,
    pub summary: serde_json::Value,
    pub results: serde_json::Value,
}

/// SHA-256 over the compact JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ExperimentReport {
    pub fn new<C: Serialize>(
        experiment: &str,
        backend: BackendKind,
        seed: u64,
        config: &C,
        tsc_khz: u64,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(ExperimentReport {
            schema: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: experiment.to_string(),
            backend,
            seed,
            config_hash: config_hash(&config)?,
            config,
            tsc_khz,
            truncated: false,
            summary: serde_json::Value::Null,
            results: serde_json::Value::Null,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.json", self.experiment));
        write_atomic(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let probe = dir.join(".eeprobe-write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(probe.display().to_string(), e))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes serializable rows with a header derived from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Two-column `bin_center count` data preceded by a comment line.
pub fn histogram_gnuplot(hist: &Histogram, header: &str) -> String {
    let mut s = format!("# {header}\n");
    for (i, c) in hist.counts.iter().enumerate() {
        s.push_str(&format!("{} {}\n", hist.bin_center(i), c));
    }
    s
}

pub fn write_gnuplot(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_config_only() {
        let a = ExperimentReport::new("x", BackendKind::Simulation, 1, &[1, 2], 3).unwrap();
        let b = ExperimentReport::new("y", BackendKind::Hardware, 9, &[1, 2], 4).unwrap();
        let c = ExperimentReport::new("x", BackendKind::Simulation, 1, &[2, 1], 3).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }

    #[test]
    fn gnuplot_layout() {
        let h = Histogram::from_parts(0.0, 25.0, vec![3, 0, 1], 0).unwrap();
        assert_eq!(histogram_gnuplot(&h, "delay_us count"), "# delay_us count\n12.5 3\n37.5 0\n62.5 1\n");
    }

    #[test]
    fn csv_append_writes_one_header() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        append_csv(&p, &[Row { a: 1 }]).unwrap();
        append_csv(&p, &[Row { a: 2 }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a\n1\n2\n");
    }
}
