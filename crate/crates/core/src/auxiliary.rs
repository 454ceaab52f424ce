//! Clock-modulation duty cycle and PPERF productivity checks.

use serde::{Deserialize, Serialize};

use crate::chase::{build_chase, ChasePreset, CACHE_LINE_BYTES};
use crate::error::{Error, Result};
use crate::hwif::msr::ClockModulation;
use crate::hwif::{Backend, CounterEvent};
use crate::model::{us_to_cycles, Cpu};

/// A level counts as ineffective when the measured duty stays this close to 1.
const INEFFECTIVE_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TstateResult {
    pub level: u32,
    pub nominal_duty: f64,
    pub effective_duty: f64,
    /// False when a modulating level left the work rate unchanged.
    pub implemented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TstateConfig {
    pub cpu: Cpu,
    pub duration_s: f64,
    /// Pinned for the run; `None` keeps the current setting.
    pub core_khz: Option<u64>,
}

impl Default for TstateConfig {
    fn default() -> Self {
        TstateConfig {
            cpu: 0,
            duration_s: 1.0,
            core_khz: None,
        }
    }
}

fn pin_frequency(backend: &dyn Backend, cpu: Cpu, khz: Option<u64>) -> Result<()> {
    let khz = match khz {
        Some(k) => k,
        None => backend.core_frequency(cpu)?,
    };
    backend.set_core_frequency(cpu, khz)
}

fn work_for(backend: &dyn Backend, cpu: Cpu, duration: u64) -> Result<u64> {
    let start = backend.now_cycles(cpu)?;
    backend.compute_until(cpu, start + duration)
}

/// Work done at `level` relative to the same time unmodulated. The previous
/// register value is written back before returning.
pub fn measure_tstate(backend: &dyn Backend, level: u32, config: &TstateConfig) -> Result<TstateResult> {
    let cpu = config.cpu;
    let regs = backend.registers();
    let extended = regs.extended_clock_modulation;
    let setting = ClockModulation::new(level, extended)?;
    if !(config.duration_s > 0.0) {
        return Err(Error::Config(format!("duration {} s must be positive", config.duration_s)));
    }
    let address = regs.clock_modulation;
    let saved = backend
        .read_msr(cpu, address)
        .map_err(|e| Error::RegisterUnavailable(format!("clock modulation on CPU {cpu}: {e}")))?;
    backend.pin_to_cpu(cpu)?;
    pin_frequency(backend, cpu, config.core_khz)?;
    let duration = us_to_cycles(config.duration_s * 1e6, backend.tsc_khz());
    let run = || -> Result<(u64, u64)> {
        backend.write_msr(cpu, address, ClockModulation::off(extended).encode())?;
        let w0 = work_for(backend, cpu, duration)?;
        backend.write_msr(cpu, address, setting.encode())?;
        let w1 = work_for(backend, cpu, duration)?;
        Ok((w0, w1))
    };
    let result = run();
    let restored = backend.write_msr(cpu, address, saved);
    let (w0, w1) = result?;
    restored?;
    if w0 == 0 {
        return Err(Error::Verification("no work completed without modulation".into()));
    }
    let effective_duty = (w1 as f64 / w0 as f64).min(1.0);
    if effective_duty <= 0.0 {
        return Err(Error::Verification(format!("no work completed at level {level}")));
    }
    Ok(TstateResult {
        level,
        nominal_duty: setting.nominal_duty(),
        effective_duty,
        implemented: level == 0 || effective_duty < 1.0 - INEFFECTIVE_MARGIN,
    })
}

/// Every encodable level, from no modulation down to the deepest.
pub fn sweep_tstates(backend: &dyn Backend, config: &TstateConfig) -> Result<Vec<TstateResult>> {
    let max = ClockModulation::max_level(backend.registers().extended_clock_modulation);
    let mut out = Vec::new();
    for level in std::iter::once(0).chain((1..=max).rev()) {
        if crate::interrupt::requested() {
            break;
        }
        out.push(measure_tstate(backend, level, config)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PperfWorkload {
    StallChase,
    Compute,
}

impl std::fmt::Display for PperfWorkload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PperfWorkload::StallChase => "stall_chase",
            PperfWorkload::Compute => "compute",
        })
    }
}

impl std::str::FromStr for PperfWorkload {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stall_chase" | "stall-chase" => Ok(PperfWorkload::StallChase),
            "compute" => Ok(PperfWorkload::Compute),
            _ => Err(Error::Config(format!("unknown workload {s:?} (stall_chase|compute)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PperfConfig {
    pub cpu: Cpu,
    pub duration_s: f64,
    pub chase_lines: usize,
    pub seed: u64,
}

impl Default for PperfConfig {
    fn default() -> Self {
        PperfConfig {
            cpu: 0,
            duration_s: 1.0,
            chase_lines: ChasePreset::DRAM_LINES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PperfResult {
    pub workload: PperfWorkload,
    pub aperf_delta: u64,
    pub pperf_delta: u64,
    pub ratio: f64,
}

/// PPERF delta over APERF delta while `workload` runs.
pub fn measure_pperf_ratio(
    backend: &dyn Backend,
    workload: PperfWorkload,
    config: &PperfConfig,
) -> Result<PperfResult> {
    let cpu = config.cpu;
    let buffer = match workload {
        PperfWorkload::StallChase => Some(build_chase(config.chase_lines, CACHE_LINE_BYTES, config.seed)?),
        PperfWorkload::Compute => None,
    };
    backend.pin_to_cpu(cpu)?;
    let duration = us_to_cycles(config.duration_s * 1e6, backend.tsc_khz());
    let a0 = backend.read_counter(cpu, CounterEvent::Aperf)?;
    let p0 = backend.read_counter(cpu, CounterEvent::Pperf)?;
    let deadline = backend.now_cycles(cpu)? + duration;
    match &buffer {
        Some(b) => {
            backend.chase_until(cpu, b, 0, deadline)?;
        }
        None => {
            backend.compute_until(cpu, deadline)?;
        }
    }
    let a1 = backend.read_counter(cpu, CounterEvent::Aperf)?;
    let p1 = backend.read_counter(cpu, CounterEvent::Pperf)?;
    let aperf_delta = a1.saturating_sub(a0);
    let pperf_delta = p1.saturating_sub(p0);
    if aperf_delta == 0 {
        return Err(Error::Verification("APERF did not advance".into()));
    }
    Ok(PperfResult {
        workload,
        aperf_delta,
        pperf_delta,
        ratio: pperf_delta as f64 / aperf_delta as f64,
    })
}
