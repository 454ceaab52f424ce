//! AVX-512 license transitions under an alternating High/Low workload.
//!
//! High phases run 512-bit FMA, Low phases run serializing instructions.
//! Counters bracketing every phase show how long the out-of-order engine
//! is throttled after each upward transition and how long the reduced
//! license frequency persists into the following Low phase.

use serde::{Deserialize, Serialize};

use crate::analysis::{summarize, SummaryStats};
use crate::error::{Error, Result};
use crate::hwif::{Backend, CounterEvent};
use crate::model::{cycles_to_ns, cycles_to_us, us_to_cycles, Cpu, LicensePhaseRecord, PhaseKind};

/// Phases longer than this multiple of their nominal length are flagged.
pub const OVERRUN_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighLowConfig {
    pub period_us: u64,
    pub low_fraction_pct: u32,
    pub duration_s: u64,
    /// Empty means every CPU of the backend.
    pub cpus: Vec<Cpu>,
    pub core_khz: u64,
    /// Frequency of the AVX-512 license level, for converting license cycles.
    pub license_khz: u64,
    /// Adds streaming loads to the High kernel.
    pub memory: bool,
}

impl Default for HighLowConfig {
    fn default() -> Self {
        HighLowConfig {
            period_us: 2_000_000,
            low_fraction_pct: 50,
            duration_s: 30,
            cpus: Vec::new(),
            core_khz: 3_000_000,
            license_khz: 2_700_000,
            memory: false,
        }
    }
}

impl HighLowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.low_fraction_pct > 100 {
            return Err(Error::Config(format!(
                "low fraction {}% is not within 0..=100",
                self.low_fraction_pct
            )));
        }
        if self.period_us < 100 {
            return Err(Error::Config(format!("period {} us is below 100 us", self.period_us)));
        }
        if self.duration_s == 0 || self.core_khz == 0 || self.license_khz == 0 {
            return Err(Error::Config("duration and frequencies must be positive".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> u64 {
        (self.duration_s * 1_000_000 / self.period_us).max(1)
    }

    fn phase_us(&self) -> (f64, f64) {
        let low = self.period_us as f64 * self.low_fraction_pct as f64 / 100.0;
        (self.period_us as f64 - low, low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuPhase {
    pub cpu: Cpu,
    pub phase_index: u64,
    pub record: LicensePhaseRecord,
    /// The phase took more than [`OVERRUN_FACTOR`] times its nominal length.
    pub overrun: bool,
}

#[derive(Debug, Clone, Copy)]
struct Counters {
    aperf: u64,
    throttle: u64,
    license2: u64,
    tsc: u64,
}

fn read_counters(backend: &dyn Backend, cpu: Cpu) -> Result<Counters> {
    Ok(Counters {
        aperf: backend.read_counter(cpu, CounterEvent::Aperf)?,
        throttle: backend.read_counter(cpu, CounterEvent::Throttle)?,
        license2: backend.read_counter(cpu, CounterEvent::License2)?,
        tsc: backend.now_cycles(cpu)?,
    })
}

fn worker(
    backend: &dyn Backend,
    config: &HighLowConfig,
    cpu: Cpu,
    epoch: u64,
) -> Result<Vec<CpuPhase>> {
    backend.pin_to_cpu(cpu)?;
    let tsc = backend.tsc_khz();
    let (high_us, _) = config.phase_us();
    let period = us_to_cycles(config.period_us as f64, tsc);
    let high = us_to_cycles(high_us, tsc);
    let phases: Vec<(PhaseKind, u64, u64)> = [(PhaseKind::High, 0, high), (PhaseKind::Low, high, period)]
        .into_iter()
        .filter(|&(_, from, to)| to > from)
        .collect();
    backend.sleep_until(cpu, epoch)?;
    let mut out = Vec::with_capacity(config.iterations() as usize * phases.len());
    let mut index = 0;
    let mut last = read_counters(backend, cpu)?;
    for i in 0..config.iterations() {
        if crate::interrupt::requested() {
            break;
        }
        let base = epoch + i * period;
        for &(kind, from, to) in &phases {
            backend.license_phase_until(cpu, kind, base + to, config.memory)?;
            let now = read_counters(backend, cpu)?;
            let wall = now.tsc - last.tsc;
            let record = LicensePhaseRecord::new(
                kind,
                now.aperf - last.aperf,
                now.throttle - last.throttle,
                now.license2 - last.license2,
                cycles_to_ns(wall, tsc),
            )?;
            out.push(CpuPhase {
                cpu,
                phase_index: index,
                record,
                overrun: wall as f64 > OVERRUN_FACTOR * (to - from) as f64,
            });
            index += 1;
            last = now;
        }
    }
    Ok(out)
}

/// Runs the alternating workload on every configured CPU at once. Phase
/// boundaries derive from one shared start time so all CPUs switch
/// together.
pub fn run_high_low(backend: &dyn Backend, config: &HighLowConfig) -> Result<Vec<CpuPhase>> {
    config.validate()?;
    let cpus = if config.cpus.is_empty() {
        backend.cpus()
    } else {
        config.cpus.clone()
    };
    for &cpu in &cpus {
        if !backend.available_frequencies(cpu)?.contains(&config.core_khz) {
            return Err(Error::UnsupportedFrequency { cpu, khz: config.core_khz });
        }
        backend.set_core_frequency(cpu, config.core_khz)?;
    }
    let tsc = backend.tsc_khz();
    let mut start = 0;
    for &cpu in &cpus {
        start = start.max(backend.now_cycles(cpu)?);
    }
    // Leaves time for the frequency requests and the worker start-up.
    let epoch = start + us_to_cycles(10_000.0, tsc);
    let results: Vec<Result<Vec<CpuPhase>>> = std::thread::scope(|s| {
        let handles: Vec<_> = cpus
            .iter()
            .map(|&cpu| s.spawn(move || worker(backend, config, cpu, epoch)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invalid("worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Minimum, median and maximum of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub n: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl From<SummaryStats> for Spread {
    fn from(s: SummaryStats) -> Self {
        Spread {
            n: s.n,
            min: s.min,
            median: s.p50,
            max: s.max,
        }
    }
}

fn spread(values: &[f64]) -> Result<Spread> {
    summarize(values).map(Spread::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LicenseStats {
    pub throttle_us_per_transition: Spread,
    pub low_license_us: Spread,
    pub throttle_fraction_high: Spread,
    pub license_fraction_low: Spread,
    /// Throttled cycles over all High-phase cycles.
    pub throttle_fraction_high_total: f64,
    /// License-2 cycles over all Low-phase cycles.
    pub license_fraction_low_total: f64,
}

fn pooled(records: &[&LicensePhaseRecord], part: fn(&LicensePhaseRecord) -> u64) -> f64 {
    let total: u64 = records.iter().map(|r| r.cycles_total).sum();
    if total == 0 {
        return 0.0;
    }
    records.iter().map(|r| part(r)).sum::<u64>() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LicenseSummary {
    pub all: LicenseStats,
    pub per_cpu: Vec<(Cpu, LicenseStats)>,
}

fn stats(phases: &[&CpuPhase], core_khz: u64, license_khz: u64) -> Result<LicenseStats> {
    let high: Vec<&LicensePhaseRecord> =
        phases.iter().map(|p| &p.record).filter(|r| r.kind == PhaseKind::High).collect();
    let low: Vec<&LicensePhaseRecord> =
        phases.iter().map(|p| &p.record).filter(|r| r.kind == PhaseKind::Low).collect();
    let or_zero = |v: Vec<f64>| if v.is_empty() { vec![0.0] } else { v };
    Ok(LicenseStats {
        throttle_us_per_transition: spread(&or_zero(
            high.iter()
                .map(|r| cycles_to_us(r.cycles_throttled as f64, core_khz))
                .collect(),
        ))?,
        low_license_us: spread(&or_zero(
            low.iter()
                .map(|r| cycles_to_us(r.cycles_license2 as f64, license_khz))
                .collect(),
        ))?,
        throttle_fraction_high: spread(&or_zero(high.iter().map(|r| r.throttle_fraction()).collect()))?,
        license_fraction_low: spread(&or_zero(low.iter().map(|r| r.license_fraction()).collect()))?,
        throttle_fraction_high_total: pooled(&high, |r| r.cycles_throttled),
        license_fraction_low_total: pooled(&low, |r| r.cycles_license2),
    })
}

/// Per-CPU and aggregate statistics. Throttle cycles convert at the core
/// frequency the phase started at, license cycles at the license frequency.
pub fn summarize_license(phases: &[CpuPhase], core_khz: u64, license_khz: u64) -> Result<LicenseSummary> {
    if phases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cpus: Vec<Cpu> = phases.iter().map(|p| p.cpu).collect();
    cpus.sort_unstable();
    cpus.dedup();
    let all: Vec<&CpuPhase> = phases.iter().collect();
    let per_cpu = cpus
        .into_iter()
        .map(|cpu| {
            let mine: Vec<&CpuPhase> = phases.iter().filter(|p| p.cpu == cpu).collect();
            stats(&mine, core_khz, license_khz).map(|s| (cpu, s))
        })
        .collect::<Result<_>>()?;
    Ok(LicenseSummary {
        all: stats(&all, core_khz, license_khz)?,
        per_cpu,
    })
}
