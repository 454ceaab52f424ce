//! Power sources for the hardware backend.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{PowerSample, PowerSourceKind};

/// Parses one `t_ns,watts` line.
pub fn parse_power_line(line: &str) -> Result<PowerSample> {
    let mut fields = line.trim().split(',');
    let (Some(t), Some(w), None) = (fields.next(), fields.next(), fields.next()) else {
        return Err(Error::Parse(format!("expected \"t_ns,watts\", got {line:?}")));
    };
    let t_ns: u64 = t
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad timestamp {t:?}")))?;
    let watts: f64 = w
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad power value {w:?}")))?;
    PowerSample::new(t_ns, watts, PowerSourceKind::ExternalFile)
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Replays samples from a `t_ns,watts` file written by an external meter.
/// Blank lines and lines starting with `#` are skipped.
pub struct ExternalFileSource {
    path: PathBuf,
    reader: BufReader<fs::File>,
    line: String,
}

impl ExternalFileSource {
    pub fn open(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::SourceUnavailable(format!("{}: {e}", path.display())))?;
        Ok(ExternalFileSource {
            path: path.to_path_buf(),
            reader: BufReader::new(file),
            line: String::new(),
        })
    }

    pub fn next_sample(&mut self) -> Result<PowerSample> {
        loop {
            self.line.clear();
            let n = self
                .reader
                .read_line(&mut self.line)
                .map_err(|e| Error::io(self.path.display().to_string(), e))?;
            if n == 0 {
                return Err(Error::SourceUnavailable(format!(
                    "{}: no more samples",
                    self.path.display()
                )));
            }
            let l = self.line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            return parse_power_line(l);
        }
    }
}

struct RaplDomain {
    energy: PathBuf,
    max_range_uj: u64,
}

/// Package power from the RAPL energy counters, differenced between calls.
pub struct RaplSource {
    domains: Vec<RaplDomain>,
    last: Option<(Instant, u64, Vec<u64>)>,
    epoch: Instant,
}

fn read_u64(path: &Path) -> Result<u64> {
    let s = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::PermissionDenied {
            Error::PermissionDenied {
                path: path.to_path_buf(),
                hint: "RAPL energy counters are root-only on recent kernels".into(),
            }
        } else {
            Error::SourceUnavailable(format!("{}: {e}", path.display()))
        }
    })?;
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{}: {:?}", path.display(), s.trim())))
}

impl RaplSource {
    /// Finds the top-level package domains (`intel-rapl:N`) below `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let entries = fs::read_dir(root)
            .map_err(|e| Error::SourceUnavailable(format!("{}: {e}", root.display())))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_prefix("intel-rapl:"))
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::SourceUnavailable(format!(
                "no RAPL package domains below {}",
                root.display()
            )));
        }
        let mut domains = Vec::new();
        for d in dirs {
            let energy = d.join("energy_uj");
            read_u64(&energy)?;
            let max_range_uj = read_u64(&d.join("max_energy_range_uj")).unwrap_or(u64::MAX);
            domains.push(RaplDomain { energy, max_range_uj });
        }
        Ok(RaplSource {
            domains,
            last: None,
            epoch: Instant::now(),
        })
    }

    fn read_all(&self) -> Result<Vec<u64>> {
        self.domains.iter().map(|d| read_u64(&d.energy)).collect()
    }

    fn delta_uj(&self, before: &[u64], after: &[u64]) -> u64 {
        self.domains
            .iter()
            .zip(before.iter().zip(after))
            .map(|(d, (&b, &a))| {
                if a >= b {
                    a - b
                } else {
                    d.max_range_uj.saturating_sub(b) + a
                }
            })
            .sum()
    }

    /// Average power since the previous call. The first call measures over a
    /// short window of `warmup`.
    pub fn sample(&mut self, warmup: Duration) -> Result<PowerSample> {
        if self.last.is_none() {
            let v = self.read_all()?;
            self.last = Some((Instant::now(), 0, v));
            std::thread::sleep(warmup);
        }
        let now = Instant::now();
        let values = self.read_all()?;
        let (then, _, prev) = self.last.take().expect("initialized above");
        let dt = now.duration_since(then).as_secs_f64();
        let uj = self.delta_uj(&prev, &values);
        let watts = if dt > 0.0 { uj as f64 * 1e-6 / dt } else { 0.0 };
        let t_ns = now.duration_since(self.epoch).as_nanos() as u64;
        self.last = Some((now, uj, values));
        PowerSample::new(t_ns, watts, PowerSourceKind::Rapl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines() {
        let s = parse_power_line("1000000,362.0").unwrap();
        assert_eq!(s.t_ns, 1_000_000);
        assert_eq!(s.watts, 362.0);
        assert_eq!(s.source, PowerSourceKind::ExternalFile);
        assert!(matches!(parse_power_line("abc"), Err(Error::Parse(_))));
        assert!(matches!(parse_power_line("1,2,3"), Err(Error::Parse(_))));
        assert!(matches!(parse_power_line("1,-3"), Err(Error::Parse(_))));
    }

    #[test]
    fn external_file_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "# t_ns,watts\n1000,100.5\n\n2000,101\n").unwrap();
        let mut src = ExternalFileSource::open(&path).unwrap();
        assert_eq!(src.next_sample().unwrap().watts, 100.5);
        assert_eq!(src.next_sample().unwrap().t_ns, 2000);
        assert!(matches!(src.next_sample(), Err(Error::SourceUnavailable(_))));
        assert!(ExternalFileSource::open(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn rapl_differencing_with_wrap() {
        let dir = tempfile::tempdir().unwrap();
        for (name, e) in [("intel-rapl:0", 1000u64), ("intel-rapl:1", 5000)] {
            let d = dir.path().join(name);
            fs::create_dir(&d).unwrap();
            fs::write(d.join("energy_uj"), format!("{e}\n")).unwrap();
            fs::write(d.join("max_energy_range_uj"), "10000\n").unwrap();
        }
        // Subdomains must not be counted.
        fs::create_dir(dir.path().join("intel-rapl:0:0")).unwrap();
        let mut src = RaplSource::open(dir.path()).unwrap();
        assert_eq!(src.domains.len(), 2);
        let first = src.sample(Duration::from_millis(1)).unwrap();
        assert_eq!(first.watts, 0.0);
        fs::write(dir.path().join("intel-rapl:1/energy_uj"), "500\n").unwrap();
        src.sample(Duration::ZERO).unwrap();
        assert_eq!(src.last.as_ref().unwrap().1, 5500);
    }

    #[test]
    fn rapl_missing_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            RaplSource::open(dir.path()),
            Err(Error::SourceUnavailable(_))
        ));
    }
}
