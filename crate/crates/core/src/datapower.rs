//! Data-dependent power: XOR kernels over operands of controlled Hamming
//! weight and a linear model of package power in the operand popcounts.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{least_squares, summarize};
use crate::error::{Error, Result};
use crate::hwif::{derive_seed, Backend, CounterEvent, Kernel};
use crate::model::{cycles_to_us, us_to_cycles, Cpu, PowerSample, RegressionFit};

/// Operand width in bits.
pub const OPERAND_BITS: u32 = 512;

/// A 512-bit vector operand stored as eight little-endian words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operand([u64; 8]);

impl Operand {
    pub const ZERO: Operand = Operand([0; 8]);

    pub fn from_words(words: [u64; 8]) -> Self {
        Operand(words)
    }

    pub fn words(&self) -> &[u64; 8] {
        &self.0
    }

    pub fn popcount(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().rev().map(|w| format!("{w:016x}")).collect()
    }
}

/// Operand with exactly `popcount` set bits at positions chosen by `seed`.
pub fn make_operand(popcount: u32, width: u32, seed: u64) -> Result<Operand> {
    if width != OPERAND_BITS {
        return Err(Error::RangeViolation(format!(
            "operand width {width} (only {OPERAND_BITS} is supported)"
        )));
    }
    if popcount > width {
        return Err(Error::RangeViolation(format!(
            "popcount {popcount} exceeds width {width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = [0u64; 8];
    for bit in sample(&mut rng, width as usize, popcount as usize) {
        words[bit / 64] |= 1 << (bit % 64);
    }
    Ok(Operand(words))
}

/// Predictor names of the power model.
pub const COEF_V1: &str = "popcnt_v1";
pub const COEF_V2: &str = "popcnt_v2_excess";

/// One line of a sweep definition. Accepts `[v1, v2, khz, duration_s]` or
/// the equivalent object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "SweepEntryRepr")]
pub struct SweepEntry {
    pub popcnt_v1: u32,
    pub popcnt_v2: u32,
    pub khz: u64,
    pub duration_s: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SweepEntryRepr {
    Tuple(u32, u32, u64, f64),
    Object {
        popcnt_v1: u32,
        popcnt_v2: u32,
        khz: u64,
        duration_s: f64,
    },
}

impl From<SweepEntryRepr> for SweepEntry {
    fn from(r: SweepEntryRepr) -> Self {
        let (popcnt_v1, popcnt_v2, khz, duration_s) = match r {
            SweepEntryRepr::Tuple(a, b, c, d) => (a, b, c, d),
            SweepEntryRepr::Object {
                popcnt_v1,
                popcnt_v2,
                khz,
                duration_s,
            } => (popcnt_v1, popcnt_v2, khz, duration_s),
        };
        SweepEntry {
            popcnt_v1,
            popcnt_v2,
            khz,
            duration_s,
        }
    }
}

pub fn parse_sweep(json: &str) -> Result<Vec<SweepEntry>> {
    let entries: Vec<SweepEntry> =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("sweep file: {e}")))?;
    for e in &entries {
        if e.popcnt_v1 > OPERAND_BITS || e.popcnt_v2 > OPERAND_BITS {
            return Err(Error::RangeViolation(format!(
                "popcounts ({}, {}) exceed {OPERAND_BITS}",
                e.popcnt_v1, e.popcnt_v2
            )));
        }
        if !(e.duration_s > 0.0) {
            return Err(Error::Config(format!("duration {} s must be positive", e.duration_s)));
        }
    }
    Ok(entries)
}

/// Full grid of popcounts in steps of `step` at every frequency.
pub fn grid_sweep(step: u32, frequencies: &[u64], duration_s: f64) -> Vec<SweepEntry> {
    let step = step.clamp(1, OPERAND_BITS);
    let levels: Vec<u32> = (0..=OPERAND_BITS / step).map(|i| i * step).collect();
    let mut out = Vec::new();
    for &khz in frequencies {
        for &popcnt_v1 in &levels {
            for &popcnt_v2 in &levels {
                out.push(SweepEntry {
                    popcnt_v1,
                    popcnt_v2,
                    khz,
                    duration_s,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub popcnt_v1: u32,
    pub popcnt_v2: u32,
    pub core_khz: u64,
    pub samples: Vec<PowerSample>,
    /// Core frequency derived from APERF over each sampling interval.
    pub observed_khz: Vec<f64>,
    /// Kernel iterations per second, summed over all CPUs.
    pub iteration_rate: f64,
    /// Frequency drifted during the point.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XorRunConfig {
    /// Empty means every CPU of the backend.
    pub cpus: Vec<Cpu>,
    pub sample_interval_ms: f64,
    /// Relative frequency deviation tolerated before a point is flagged.
    pub frequency_tolerance: f64,
    pub min_samples: usize,
}

impl Default for XorRunConfig {
    fn default() -> Self {
        XorRunConfig {
            cpus: Vec::new(),
            sample_interval_ms: 100.0,
            frequency_tolerance: 0.02,
            min_samples: 50,
        }
    }
}

/// Runs the XOR kernel on every configured CPU and samples package power
/// at a fixed cadence.
pub fn run_xor_point(
    backend: &dyn Backend,
    v1: Operand,
    v2: Operand,
    core_khz: u64,
    duration_s: f64,
    config: &XorRunConfig,
) -> Result<SweepPoint> {
    let cpus = if config.cpus.is_empty() {
        backend.cpus()
    } else {
        config.cpus.clone()
    };
    let &probe = cpus.first().ok_or_else(|| Error::Config("no CPUs selected".into()))?;
    let tsc = backend.tsc_khz();
    let interval = us_to_cycles(config.sample_interval_ms * 1000.0, tsc).max(1);
    let n = (duration_s * 1000.0 / config.sample_interval_ms).floor() as usize;
    if n < config.min_samples {
        return Err(Error::TooFewSamples {
            have: n,
            need: config.min_samples.saturating_sub(1),
        });
    }
    for &cpu in &cpus {
        backend.set_core_frequency(cpu, core_khz)?;
    }
    let settle = backend.now_cycles(probe)? + us_to_cycles(10_000.0, tsc);
    backend.sleep_until(probe, settle)?;

    let handle = backend.start_kernel(&cpus, Kernel::Xor { v1, v2 })?;
    let sampled = (|| -> Result<(Vec<PowerSample>, Vec<f64>)> {
        let mut samples = Vec::with_capacity(n);
        let mut observed = Vec::with_capacity(n);
        let start = backend.now_cycles(probe)?;
        let mut last = (start, backend.read_counter(probe, CounterEvent::Aperf)?);
        for k in 1..=n as u64 {
            backend.sleep_until(probe, start + k * interval)?;
            samples.push(backend.sample_power()?);
            let now = (
                backend.now_cycles(probe)?,
                backend.read_counter(probe, CounterEvent::Aperf)?,
            );
            let dt = now.0.saturating_sub(last.0).max(1);
            observed.push(now.1.saturating_sub(last.1) as f64 * tsc as f64 / dt as f64);
            last = now;
        }
        Ok((samples, observed))
    })();
    let stopped = backend.stop_kernel(handle);
    let (samples, observed_khz) = sampled?;
    let stats = stopped?;
    let iteration_rate = stats
        .iter()
        .map(|s| s.iterations as f64 / (cycles_to_us(s.elapsed_cycles.max(1) as f64, tsc) * 1e-6))
        .sum();
    let tol = config.frequency_tolerance * core_khz as f64;
    let flagged = observed_khz.iter().any(|&f| (f - core_khz as f64).abs() > tol);
    Ok(SweepPoint {
        popcnt_v1: v1.popcount(),
        popcnt_v2: v2.popcount(),
        core_khz,
        samples,
        observed_khz,
        iteration_rate,
        flagged,
    })
}

/// Runs every sweep entry with operands drawn from `seed`.
pub fn run_sweep(
    backend: &dyn Backend,
    entries: &[SweepEntry],
    config: &XorRunConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        if crate::interrupt::requested() {
            break;
        }
        let v1 = make_operand(e.popcnt_v1, OPERAND_BITS, derive_seed(seed, 2 * i as u64))?;
        let v2 = make_operand(e.popcnt_v2, OPERAND_BITS, derive_seed(seed, 2 * i as u64 + 1))?;
        out.push(run_xor_point(backend, v1, v2, e.khz, e.duration_s, config)?);
    }
    Ok(out)
}

/// Drops `head` leading and `tail` trailing samples.
pub fn trim_samples<T: Clone>(samples: &[T], head: usize, tail: usize) -> Result<Vec<T>> {
    if samples.len() <= head + tail {
        return Err(Error::TooFewSamples {
            have: samples.len(),
            need: head + tail,
        });
    }
    Ok(samples[head..samples.len() - tail].to_vec())
}

pub const TRIM_HEAD: usize = 10;
pub const TRIM_TAIL: usize = 5;

/// Mean, sample standard deviation and count of the trimmed samples.
pub fn point_power(point: &SweepPoint) -> Result<(f64, f64, usize)> {
    let kept = trim_samples(&point.samples, TRIM_HEAD, TRIM_TAIL)?;
    let w: Vec<f64> = kept.iter().map(|s| s.watts).collect();
    let s = summarize(&w)?;
    Ok((s.mean, s.stdev, s.n))
}

fn predictors(p1: u32, p2: u32, active_cores: u32) -> Vec<f64> {
    let cores = active_cores as f64;
    vec![p1 as f64 * cores, p2.saturating_sub(p1) as f64 * cores]
}

/// Least-squares fit of mean trimmed power per frequency. Coefficients are
/// in mW per set bit per core.
pub fn fit_power_model(points: &[SweepPoint], active_cores: u32) -> Result<BTreeMap<u64, RegressionFit>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if active_cores == 0 {
        return Err(Error::Config("active_cores must be positive".into()));
    }
    let mut by_khz: BTreeMap<u64, Vec<&SweepPoint>> = BTreeMap::new();
    for p in points {
        by_khz.entry(p.core_khz).or_default().push(p);
    }
    let mut out = BTreeMap::new();
    for (khz, pts) in by_khz {
        let mut configs: Vec<(u32, u32)> = pts.iter().map(|p| (p.popcnt_v1, p.popcnt_v2)).collect();
        configs.sort_unstable();
        configs.dedup();
        if configs.len() < 3 {
            return Err(Error::RankDeficient {
                rank: configs.len(),
                cols: 3,
            });
        }
        let x: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| predictors(p.popcnt_v1, p.popcnt_v2, active_cores))
            .collect();
        let y = pts
            .iter()
            .map(|p| point_power(p).map(|(m, _, _)| m))
            .collect::<Result<Vec<f64>>>()?;
        let fit = least_squares(&[COEF_V1, COEF_V2], &x, &y)?;
        let coef = fit.coef.iter().map(|(k, v)| (k.clone(), v * 1000.0)).collect();
        out.insert(khz, RegressionFit::new(fit.intercept_w, coef, fit.rss, fit.n)?);
    }
    Ok(out)
}

/// Modelled package power in W.
pub fn predict_power(fit: &RegressionFit, popcnt_v1: u32, popcnt_v2: u32, active_cores: u32) -> f64 {
    let x = predictors(popcnt_v1, popcnt_v2, active_cores);
    let c1 = fit.coefficient(COEF_V1).unwrap_or(0.0);
    let c2 = fit.coefficient(COEF_V2).unwrap_or(0.0);
    fit.intercept_w + (c1 * x[0] + c2 * x[1]) / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PowerSourceKind;

    fn point(p1: u32, p2: u32, khz: u64, watts: &[f64]) -> SweepPoint {
        SweepPoint {
            popcnt_v1: p1,
            popcnt_v2: p2,
            core_khz: khz,
            samples: watts
                .iter()
                .enumerate()
                .map(|(i, &w)| PowerSample::new(i as u64, w, PowerSourceKind::Simulated).unwrap())
                .collect(),
            observed_khz: Vec::new(),
            iteration_rate: 0.0,
            flagged: false,
        }
    }

    #[test]
    fn operand_examples() {
        assert_eq!(make_operand(0, 512, 1).unwrap(), Operand::ZERO);
        assert_eq!(make_operand(512, 512, 1).unwrap(), Operand::from_words([u64::MAX; 8]));
        let a = make_operand(256, 512, 1).unwrap();
        let b = make_operand(256, 512, 2).unwrap();
        assert_eq!((a.popcount(), b.popcount()), (256, 256));
        assert_ne!(a, b);
        assert!(matches!(make_operand(513, 512, 0), Err(Error::RangeViolation(_))));
        assert!(make_operand(1, 256, 0).is_err());
    }

    #[test]
    fn trimming_examples() {
        let v: Vec<u32> = (0..50).collect();
        let t = trim_samples(&v, 10, 5).unwrap();
        assert_eq!(t.len(), 35);
        assert_eq!((t[0], t[34]), (10, 44));
        assert_eq!(trim_samples(&v[..16], 10, 5).unwrap(), vec![10]);
        assert!(matches!(
            trim_samples(&v[..15], 10, 5),
            Err(Error::TooFewSamples { have: 15, need: 15 })
        ));
    }

    #[test]
    fn sweep_file_formats() {
        let e = parse_sweep(r#"[[0, 512, 3000000, 5], {"popcnt_v1": 1, "popcnt_v2": 2, "khz": 2400000, "duration_s": 6.5}]"#)
            .unwrap();
        assert_eq!(e[0].popcnt_v2, 512);
        assert_eq!(e[1].duration_s, 6.5);
        assert!(parse_sweep("[[600, 0, 1, 1]]").is_err());
        assert!(parse_sweep("{}").is_err());
        assert_eq!(grid_sweep(128, &[1, 2], 5.0).len(), 50);
    }

    #[test]
    fn constant_power_gives_zero_coefficients() {
        let pts: Vec<SweepPoint> = [(0, 0), (512, 0), (0, 512), (256, 512)]
            .iter()
            .map(|&(a, b)| point(a, b, 3_000_000, &[300.0; 20]))
            .collect();
        let fit = &fit_power_model(&pts, 36).unwrap()[&3_000_000];
        assert!((fit.intercept_w - 300.0).abs() < 1e-9);
        assert!(fit.coefficient(COEF_V1).unwrap().abs() < 1e-9);
        assert!(fit.coefficient(COEF_V2).unwrap().abs() < 1e-9);
        assert_eq!(predict_power(fit, 0, 0, 36), fit.intercept_w);
    }

    #[test]
    fn too_few_configurations() {
        let pts = vec![point(0, 0, 1, &[1.0; 20]), point(1, 1, 1, &[2.0; 20])];
        assert!(matches!(fit_power_model(&pts, 1), Err(Error::RankDeficient { .. })));
    }
}
