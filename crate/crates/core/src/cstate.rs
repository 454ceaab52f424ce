//! Wake-up latency from idle states between a caller and a callee CPU.

use serde::{Deserialize, Serialize};

use crate::analysis::median;
use crate::error::{Error, Result};
use crate::hwif::{Backend, IdleState, Kernel, WakeMode};
use crate::model::{cycles_to_us, us_to_cycles, Cpu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CState {
    #[serde(rename = "C0poll")]
    C0Poll,
    C1,
    C1E,
    C6,
}

impl CState {
    pub const ALL: [CState; 4] = [CState::C0Poll, CState::C1, CState::C1E, CState::C6];

    /// Name of the matching idle-driver state.
    pub fn driver_name(self) -> &'static str {
        match self {
            CState::C0Poll => "POLL",
            CState::C1 => "C1",
            CState::C1E => "C1E",
            CState::C6 => "C6",
        }
    }
}

impl std::fmt::Display for CState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CState::C0Poll => "C0poll",
            other => other.driver_name(),
        })
    }
}

impl std::str::FromStr for CState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C0POLL" | "POLL" | "C0" => Ok(CState::C0Poll),
            "C1" => Ok(CState::C1),
            "C1E" => Ok(CState::C1E),
            "C6" => Ok(CState::C6),
            _ => Err(Error::Config(format!("unknown C-state {s:?} (C0poll|C1|C1E|C6)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Caller and callee share a package.
    Local,
    /// Caller on another package while the callee's package is busy.
    RemoteActive,
    /// Caller on another package while the callee's package is idle.
    RemoteIdle,
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Relation::Local => "local",
            Relation::RemoteActive => "remote_active",
            Relation::RemoteIdle => "remote_idle",
        })
    }
}

impl std::str::FromStr for Relation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Relation::Local),
            "remote_active" | "remote-active" => Ok(Relation::RemoteActive),
            "remote_idle" | "remote-idle" => Ok(Relation::RemoteIdle),
            _ => Err(Error::Config(format!(
                "unknown relation {s:?} (local|remote_active|remote_idle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WakeupSample {
    pub cstate: CState,
    pub relation: Relation,
    pub core_khz: u64,
    pub latency_us: f64,
    /// The callee's residency counters did not show the requested state.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WakeupConfig {
    pub cstate: CState,
    pub relation: Relation,
    pub core_khz: u64,
    pub reps: usize,
    /// Callee CPU; the caller and any helper are chosen to match the relation.
    pub callee: Cpu,
    pub idle_ms: f64,
}

impl Default for WakeupConfig {
    fn default() -> Self {
        WakeupConfig {
            cstate: CState::C6,
            relation: Relation::Local,
            core_khz: 3_000_000,
            reps: 100,
            callee: 0,
            idle_ms: 1000.0,
        }
    }
}

struct Placement {
    caller: Cpu,
    helper: Option<Cpu>,
}

fn place(backend: &dyn Backend, callee: Cpu, relation: Relation) -> Result<Placement> {
    let pkg = backend.package_of(callee)?;
    let mut same = Vec::new();
    let mut other = Vec::new();
    for c in backend.cpus() {
        if c == callee {
            continue;
        }
        if backend.package_of(c)? == pkg {
            same.push(c);
        } else {
            other.push(c);
        }
    }
    let unavailable = |what: &str| Error::Config(format!("{relation} wake-ups need {what}"));
    Ok(match relation {
        Relation::Local => Placement {
            caller: *same.first().ok_or_else(|| unavailable("two CPUs in one package"))?,
            helper: None,
        },
        Relation::RemoteIdle => Placement {
            caller: *other.first().ok_or_else(|| unavailable("a second package"))?,
            helper: None,
        },
        Relation::RemoteActive => Placement {
            caller: *other.first().ok_or_else(|| unavailable("a second package"))?,
            helper: Some(*same.first().ok_or_else(|| unavailable("two CPUs in the callee's package"))?),
        },
    })
}

fn state_index(states: &[IdleState], cstate: CState) -> Result<usize> {
    states
        .iter()
        .find(|s| s.name.eq_ignore_ascii_case(cstate.driver_name()))
        .map(|s| s.index)
        .ok_or_else(|| Error::CstateUnavailable(format!("no idle state named {}", cstate.driver_name())))
}

/// Leaves `cstate` and every shallower state enabled and disables the deeper
/// ones. Returns the index of the target state.
fn restrict_idle(backend: &dyn Backend, cpu: Cpu, cstate: CState) -> Result<usize> {
    let states = backend.idle_states(cpu)?;
    let target = state_index(&states, cstate)?;
    for s in &states {
        let disable = s.index > target;
        if s.disabled != disable {
            backend.set_idle_state_disabled(cpu, s.index, disable)?;
        }
    }
    Ok(target)
}

fn residency(backend: &dyn Backend, cpu: Cpu, index: usize) -> Result<u64> {
    Ok(backend
        .idle_states(cpu)?
        .iter()
        .find(|s| s.index == index)
        .map_or(0, |s| s.residency_us))
}

/// Wake-up latency from `cstate`: per rep the callee blocks, the caller idles
/// for `idle_ms`, stamps the TSC and signals, and the callee stamps the TSC
/// first thing after waking.
pub fn measure_wakeup(backend: &dyn Backend, config: &WakeupConfig) -> Result<Vec<WakeupSample>> {
    let c = config;
    let callee = c.callee;
    let place = place(backend, callee, c.relation)?;
    let tsc = backend.tsc_khz();
    for cpu in [callee, place.caller] {
        if !backend.available_frequencies(cpu)?.contains(&c.core_khz) {
            return Err(Error::UnsupportedFrequency { cpu, khz: c.core_khz });
        }
        backend.set_core_frequency(cpu, c.core_khz)?;
    }
    let target = restrict_idle(backend, callee, c.cstate)?;
    backend.pin_to_cpu(place.caller)?;
    let helper = match place.helper {
        Some(h) => Some(backend.start_kernel(&[h], Kernel::Compute)?),
        None => None,
    };
    let idle = us_to_cycles(c.idle_ms * 1000.0, tsc);
    let run = || -> Result<Vec<WakeupSample>> {
        let mut out = Vec::with_capacity(c.reps);
        for _ in 0..c.reps {
            if crate::interrupt::requested() {
                break;
            }
            let before = residency(backend, callee, target)?;
            let w = backend.wake_probe(place.caller, callee, idle, WakeMode::Block)?;
            let after = residency(backend, callee, target)?;
            let latency_us = cycles_to_us(w.wake_cycles.saturating_sub(w.signal_cycles) as f64, tsc);
            out.push(WakeupSample {
                cstate: c.cstate,
                relation: c.relation,
                core_khz: c.core_khz,
                latency_us,
                flagged: c.cstate != CState::C0Poll && after <= before,
            });
        }
        Ok(out)
    };
    let result = run();
    if let Some(h) = helper {
        let stopped = backend.stop_kernel(h);
        if result.is_ok() {
            stopped?;
        }
    }
    result
}

/// Every combination of `cstates` and `frequencies` for one relation.
pub fn sweep_wakeup(
    backend: &dyn Backend,
    cstates: &[CState],
    frequencies: &[u64],
    base: &WakeupConfig,
) -> Result<Vec<WakeupSample>> {
    let mut out = Vec::with_capacity(cstates.len() * frequencies.len() * base.reps);
    for &cstate in cstates {
        for &core_khz in frequencies {
            if crate::interrupt::requested() {
                return Ok(out);
            }
            out.extend(measure_wakeup(
                backend,
                &WakeupConfig {
                    cstate,
                    core_khz,
                    ..base.clone()
                },
            )?);
        }
    }
    Ok(out)
}

/// Median signal-delivery latency to a busy-polling callee.
pub fn wakeup_baseline(backend: &dyn Backend, callee: Cpu, relation: Relation, reps: usize) -> Result<f64> {
    let place = place(backend, callee, relation)?;
    let tsc = backend.tsc_khz();
    backend.pin_to_cpu(place.caller)?;
    let idle = us_to_cycles(1000.0, tsc);
    let mut lat = Vec::with_capacity(reps);
    for _ in 0..reps {
        let w = backend.wake_probe(place.caller, callee, idle, WakeMode::Poll)?;
        lat.push(cycles_to_us(w.wake_cycles.saturating_sub(w.signal_cycles) as f64, tsc));
    }
    median(&lat)
}
