//! Uniform access to timing, frequency control, model-specific registers,
//! performance events, power sampling and the probe workloads.
//!
//! Two implementations exist: [`HardwareBackend`] talks to the running
//! machine through device files and sysfs, [`SimBackend`] is a deterministic
//! model of the same machine. Experiments are written once against
//! [`Backend`].

mod hardware;
mod kernels;
mod knobs;
pub mod msr;
mod params;
pub mod power;
mod sim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use hardware::{parse_cpu_list, HardwareBackend};
pub use kernels::XOR_UNROLL;
pub use knobs::{with_restored_knobs, CpuKnobs, KnobGuard, SavedKnobs};
pub use params::SimParameters;
pub use sim::{FaultOp, SimBackend, SimKnobs, SimSnapshot};

use crate::chase::ChaseBuffer;
use crate::datapower::Operand;
use crate::error::{Error, Result};
use crate::model::{Cpu, PowerSample, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Hardware,
    Simulation,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hw" | "hardware" => Ok(BackendKind::Hardware),
            "sim" | "simulation" => Ok(BackendKind::Simulation),
            other => Err(Error::Config(format!("unknown backend {other:?} (hw|sim)"))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Hardware => "hardware",
            BackendKind::Simulation => "simulation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterEvent {
    /// Cycles with a throttled out-of-order engine.
    Throttle,
    /// Cycles spent at the AVX-512 license level.
    License2,
    Aperf,
    Pperf,
}

impl std::fmt::Display for CounterEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CounterEvent::Throttle => "throttle",
            CounterEvent::License2 => "license2",
            CounterEvent::Aperf => "aperf",
            CounterEvent::Pperf => "pperf",
        })
    }
}

/// A control write performed by the coordinator context at a given TSC time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    WriteMsr { cpu: Cpu, address: u32, value: u64 },
    SetCoreFrequency { cpu: Cpu, khz: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionTicket(pub u64);

/// TSC values right before the control write was issued and right after it
/// returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub issued_cycles: u64,
    pub returned_cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `value2 ^= value1` over eight register pairs.
    Xor { v1: Operand, v2: Operand },
    /// Register-only integer arithmetic.
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelHandle(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub cpu: Cpu,
    pub iterations: u64,
    pub elapsed_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleState {
    pub index: usize,
    pub name: String,
    pub disabled: bool,
    pub residency_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WakeMode {
    /// Callee blocks on a condition variable and may enter an idle state.
    Block,
    /// Callee busy-polls a shared flag and never leaves C0.
    Poll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WakeObservation {
    pub signal_cycles: u64,
    pub wake_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSource {
    Rapl,
    ExternalFile(PathBuf),
    Simulated,
}

impl std::str::FromStr for PowerSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rapl" => Ok(PowerSource::Rapl),
            "sim" | "simulated" => Ok(PowerSource::Simulated),
            _ => match s.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(PowerSource::ExternalFile(path.into())),
                _ => Err(Error::Config(format!(
                    "unknown power source {s:?} (rapl|simulated|file:PATH)"
                ))),
            },
        }
    }
}

/// Register addresses and raw event codes that vary between platforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformRegisters {
    pub uncore_ratio_limit: u32,
    pub uncore_perf_status: u32,
    pub clock_modulation: u32,
    pub extended_clock_modulation: bool,
    pub aperf: u32,
    pub mperf: u32,
    pub pperf: u32,
    /// Raw perf config (`umask << 8 | event`) for CORE_POWER.THROTTLE.
    pub throttle_event: u64,
    /// Raw perf config for CORE_POWER.LVL2_TURBO_LICENSE.
    pub license2_event: u64,
}

impl Default for PlatformRegisters {
    fn default() -> Self {
        PlatformRegisters {
            uncore_ratio_limit: msr::UNCORE_RATIO_LIMIT,
            uncore_perf_status: msr::UNCORE_PERF_STATUS,
            clock_modulation: msr::IA32_CLOCK_MODULATION,
            extended_clock_modulation: true,
            aperf: msr::IA32_APERF,
            mperf: msr::IA32_MPERF,
            pperf: msr::MSR_PPERF,
            throttle_event: 0x4028,
            license2_event: 0x2028,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub msr_path_template: String,
    pub cpufreq_path_template: String,
    pub cpuidle_path_template: String,
    pub cpu_sysfs_root: PathBuf,
    pub powercap_root: PathBuf,
    pub power_source: PowerSource,
    pub sim: SimParameters,
    pub registers: PlatformRegisters,
    /// Inclusive uncore ratio range accepted by `set_uncore_range`.
    pub uncore_ratio_range: (u32, u32),
    /// CPU the coordinator context runs on; defaults to the highest CPU.
    pub coordinator_cpu: Option<Cpu>,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulation,
            msr_path_template: "/dev/cpu/{cpu}/msr".into(),
            cpufreq_path_template: "/sys/devices/system/cpu/cpu{cpu}/cpufreq".into(),
            cpuidle_path_template: "/sys/devices/system/cpu/cpu{cpu}/cpuidle".into(),
            cpu_sysfs_root: "/sys/devices/system/cpu".into(),
            powercap_root: "/sys/class/powercap".into(),
            power_source: PowerSource::Simulated,
            sim: SimParameters::default(),
            registers: PlatformRegisters::default(),
            uncore_ratio_range: (12, 24),
            coordinator_cpu: None,
            seed: 0,
        }
    }
}

pub const ENV_BACKEND: &str = "EEPROBE_BACKEND";
pub const ENV_MSR_PATH: &str = "EEPROBE_MSR_PATH";

impl BackendConfig {
    pub fn simulation(seed: u64) -> Self {
        BackendConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn hardware() -> Self {
        BackendConfig {
            kind: BackendKind::Hardware,
            power_source: PowerSource::Rapl,
            ..Default::default()
        }
    }

    /// Applies `EEPROBE_BACKEND` and `EEPROBE_MSR_PATH`.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(
            std::env::var(ENV_BACKEND).ok().as_deref(),
            std::env::var(ENV_MSR_PATH).ok().as_deref(),
        )
    }

    pub fn apply_overrides(&mut self, backend: Option<&str>, msr_path: Option<&str>) -> Result<()> {
        if let Some(kind) = backend {
            self.kind = kind.parse()?;
            if self.kind == BackendKind::Hardware && self.power_source == PowerSource::Simulated {
                self.power_source = PowerSource::Rapl;
            }
        }
        if let Some(path) = msr_path {
            self.msr_path_template = path.to_string();
        }
        Ok(())
    }
}

/// Expands `{cpu}` in a path template.
pub fn expand_template(template: &str, cpu: Cpu) -> PathBuf {
    PathBuf::from(template.replace("{cpu}", &cpu.to_string()))
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Conversion factor between TSC cycles and time.
    fn tsc_khz(&self) -> u64;

    /// Cost of one bracketing pair of timestamp reads, in TSC cycles.
    fn timer_overhead_cycles(&self) -> u64;

    /// Online logical CPUs in ascending order.
    fn cpus(&self) -> Vec<Cpu>;

    fn package_of(&self, cpu: Cpu) -> Result<usize>;

    fn registers(&self) -> &PlatformRegisters;

    fn uncore_ratio_range(&self) -> (u32, u32);

    fn now_cycles(&self, cpu: Cpu) -> Result<u64>;

    fn read_msr(&self, cpu: Cpu, address: u32) -> Result<u64>;

    fn write_msr(&self, cpu: Cpu, address: u32, value: u64) -> Result<()>;

    fn available_frequencies(&self, cpu: Cpu) -> Result<Vec<u64>>;

    /// Currently requested core frequency setpoint.
    fn core_frequency(&self, cpu: Cpu) -> Result<u64>;

    fn set_core_frequency(&self, cpu: Cpu, khz: u64) -> Result<()>;

    fn governor(&self, cpu: Cpu) -> Result<String>;

    fn set_governor(&self, cpu: Cpu, governor: &str) -> Result<()>;

    fn read_counter(&self, cpu: Cpu, event: CounterEvent) -> Result<u64>;

    fn sample_power(&self) -> Result<PowerSample>;

    fn pin_to_cpu(&self, cpu: Cpu) -> Result<()>;

    fn current_cpu(&self) -> Result<Cpu>;

    /// Has the coordinator context perform `action` once the TSC reaches
    /// `at_cycles`.
    fn schedule(&self, at_cycles: u64, action: Action) -> Result<ActionTicket>;

    fn await_action(&self, ticket: ActionTicket) -> Result<ActionOutcome>;

    /// Times `entries` groups of `accesses_per_entry` dependent loads starting
    /// at `start` and appends one entry per group. Returns the slot reached.
    fn chase(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        entries: usize,
        accesses_per_entry: usize,
        out: &mut Vec<TraceEntry>,
    ) -> Result<usize>;

    /// Chases untimed until the TSC passes `deadline_cycles`. Returns the slot
    /// reached and the number of loads performed.
    fn chase_until(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        deadline_cycles: u64,
    ) -> Result<(usize, u64)>;

    /// Runs the register-only arithmetic kernel until `deadline_cycles` and
    /// returns the completed iterations.
    fn compute_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<u64>;

    /// Runs the High (512-bit FMA) or Low (serializing instructions) kernel
    /// until `deadline_cycles`, busy-waiting on the TSC.
    fn license_phase_until(
        &self,
        cpu: Cpu,
        kind: crate::model::PhaseKind,
        deadline_cycles: u64,
        memory: bool,
    ) -> Result<()>;

    /// Starts `kernel` on every CPU in `cpus` in the background.
    fn start_kernel(&self, cpus: &[Cpu], kernel: Kernel) -> Result<KernelHandle>;

    fn stop_kernel(&self, handle: KernelHandle) -> Result<Vec<KernelStats>>;

    /// Waits without doing work until the TSC passes `deadline_cycles`.
    fn sleep_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<()>;

    fn idle_states(&self, cpu: Cpu) -> Result<Vec<IdleState>>;

    fn set_idle_state_disabled(&self, cpu: Cpu, index: usize, disabled: bool) -> Result<()>;

    /// One wake-up round: the callee waits, the caller idles for
    /// `idle_cycles`, stamps the TSC and signals; the callee stamps the TSC
    /// as its first action after waking.
    fn wake_probe(
        &self,
        caller: Cpu,
        callee: Cpu,
        idle_cycles: u64,
        mode: WakeMode,
    ) -> Result<WakeObservation>;
}

/// Opens the backend selected by `config`.
pub fn open_backend(config: &BackendConfig) -> Result<Box<dyn Backend>> {
    Ok(match config.kind {
        BackendKind::Simulation => Box::new(SimBackend::new(config.clone())?),
        BackendKind::Hardware => Box::new(HardwareBackend::open(config.clone())?),
    })
}

/// Narrows the uncore ratio range on every package. Equal bounds pin the
/// uncore frequency, although the processor may still clock down when it
/// hits its power limit.
pub fn set_uncore_range(backend: &dyn Backend, min_ratio: u32, max_ratio: u32) -> Result<()> {
    let (lo, hi) = backend.uncore_ratio_range();
    if !(lo <= min_ratio && min_ratio <= max_ratio && max_ratio <= hi) {
        return Err(Error::RangeViolation(format!(
            "uncore ratios must satisfy {lo} <= min ({min_ratio}) <= max ({max_ratio}) <= {hi}"
        )));
    }
    let address = backend.registers().uncore_ratio_limit;
    for cpu in package_leaders(backend)? {
        let current = backend.read_msr(cpu, address)?;
        backend.write_msr(cpu, address, msr::with_uncore_ratios(current, min_ratio, max_ratio))?;
    }
    Ok(())
}

/// Uncore ratio limits `(min, max)` of the package `cpu` belongs to.
pub fn uncore_range(backend: &dyn Backend, cpu: Cpu) -> Result<(u32, u32)> {
    let v = backend.read_msr(cpu, backend.registers().uncore_ratio_limit)?;
    Ok(msr::decode_uncore_ratio_limit(v))
}

/// Lowest-numbered CPU of every package.
pub fn package_leaders(backend: &dyn Backend) -> Result<Vec<Cpu>> {
    let mut leaders: Vec<(usize, Cpu)> = Vec::new();
    for cpu in backend.cpus() {
        let pkg = backend.package_of(cpu)?;
        if !leaders.iter().any(|&(p, _)| p == pkg) {
            leaders.push((pkg, cpu));
        }
    }
    Ok(leaders.into_iter().map(|(_, c)| c).collect())
}

/// Uncore ratio (100 MHz units) closest to `khz`.
pub fn uncore_ratio_for_khz(khz: u64) -> u32 {
    ((khz + 50_000) / 100_000) as u32
}

/// Deterministic 64-bit mixing for deriving independent RNG seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_kind_parsing() {
        assert_eq!("sim".parse::<BackendKind>().unwrap(), BackendKind::Simulation);
        assert_eq!("hardware".parse::<BackendKind>().unwrap(), BackendKind::Hardware);
        assert!("gpu".parse::<BackendKind>().is_err());
    }

    #[test]
    fn power_source_parsing() {
        assert_eq!("rapl".parse::<PowerSource>().unwrap(), PowerSource::Rapl);
        assert_eq!(
            "file:/tmp/p.csv".parse::<PowerSource>().unwrap(),
            PowerSource::ExternalFile("/tmp/p.csv".into())
        );
        assert!("file:".parse::<PowerSource>().is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = BackendConfig::default();
        c.apply_overrides(Some("hw"), Some("/tmp/msr{cpu}")).unwrap();
        assert_eq!(c.kind, BackendKind::Hardware);
        assert_eq!(c.power_source, PowerSource::Rapl);
        assert_eq!(expand_template(&c.msr_path_template, 3), PathBuf::from("/tmp/msr3"));
        assert!(c.apply_overrides(Some("bogus"), None).is_err());
    }

    #[test]
    fn uncore_ratio_rounding() {
        assert_eq!(uncore_ratio_for_khz(2_400_000), 24);
        assert_eq!(uncore_ratio_for_khz(1_400_000), 14);
        assert_eq!(uncore_ratio_for_khz(1_449_999), 14);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
