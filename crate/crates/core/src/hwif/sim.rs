//! Deterministic model of a two-socket server.
//!
//! Every logical CPU carries its own TSC clock and random stream; work
//! advances the clock of the CPU that performs it. Frequency changes,
//! uncore switches and scheduled control writes are timed events that take
//! effect at the first access boundary that reaches them, so long chases
//! advance in a handful of arithmetic steps between events.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::thread::ThreadId;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::msr::{self, ClockModulation};
use super::params::interpolate;
use super::power::ExternalFileSource;
use super::{
    derive_seed, Action, ActionOutcome, ActionTicket, Backend, BackendConfig, BackendKind,
    CounterEvent, IdleState, Kernel, KernelHandle, KernelStats, PlatformRegisters, PowerSource,
    SimParameters, WakeMode, WakeObservation,
};
use crate::chase::ChaseBuffer;
use crate::error::{Error, Result};
use crate::model::{us_to_cycles, Cpu, PhaseKind, PowerSample, PowerSourceKind, TraceEntry};

const IDLE_NAMES: [&str; 4] = ["POLL", "C1", "C1E", "C6"];
const STATE_C1: usize = 1;
const STATE_C6: usize = 3;
const GOVERNORS: [&str; 3] = ["userspace", "performance", "powersave"];

/// Operations that can be made to fail for error-path testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultOp {
    WriteMsr,
    SetCoreFrequency,
    Chase,
    ComputeUntil,
    ReadCounter,
    SamplePower,
    LicensePhase,
    StartKernel,
    WakeProbe,
}

/// Machine settings an experiment may change and must restore.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimKnobs {
    pub requested_khz: Vec<u64>,
    pub governors: Vec<String>,
    pub uncore_ratio_limits: Vec<u64>,
    pub clock_modulation: Vec<u64>,
    pub idle_disabled: Vec<[bool; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub knobs: SimKnobs,
    pub clocks: Vec<u64>,
    /// `[aperf, mperf, pperf, throttle, license2]` per CPU.
    pub counters: Vec<[u64; 5]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Level {
    L1,
    L2,
    Llc,
    Dram,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    aperf: f64,
    mperf: f64,
    pperf: f64,
    throttle: f64,
    license2: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct License {
    high: bool,
    drop_at: Option<u64>,
    last_downgrade: Option<u64>,
    gap_at_acquisition: Option<u64>,
}

struct SimCpu {
    package: usize,
    clock: u64,
    frac: f64,
    requested_khz: u64,
    freq_khz: u64,
    pending_freq: Option<(u64, u64)>,
    governor: String,
    counters: Counters,
    clock_modulation: u64,
    idle_disabled: [bool; 4],
    residency_us: [f64; 4],
    license: License,
    rng: ChaCha8Rng,
    kernel: Option<u64>,
    kernel_work: f64,
}

#[derive(Debug, Clone, Copy)]
struct Switch {
    at: u64,
    khz: u64,
    gap: u64,
}

#[derive(Debug, Clone, Copy)]
struct Stall {
    expire: u64,
    gap: u64,
}

struct SimPackage {
    ratio_limit: u64,
    uncore_khz: u64,
    pending: Option<Switch>,
    artifact: Option<(u64, u64)>,
    stall: Option<Stall>,
    demand_high: bool,
    demand_since: u64,
    mode_since: u64,
    rng: ChaCha8Rng,
}

struct SimKernel {
    cpus: Vec<Cpu>,
    kernel: Kernel,
    started: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Action(u64, u64),
    CoreFrequency,
    Artifact,
    Switch,
    Decision(u64),
}

struct SimState {
    p: SimParameters,
    regs: PlatformRegisters,
    cpus: Vec<SimCpu>,
    pkgs: Vec<SimPackage>,
    actions: BTreeMap<(u64, u64), Action>,
    outcomes: HashMap<u64, Result<ActionOutcome>>,
    next_ticket: u64,
    kernels: HashMap<u64, SimKernel>,
    next_kernel: u64,
    pinned: HashMap<ThreadId, Cpu>,
    power_rng: ChaCha8Rng,
    external_power: Option<ExternalFileSource>,
    faults: HashMap<FaultOp, u64>,
    pstate_interval: u64,
    ufs_interval: u64,
    controlloop: u64,
    write_overhead: u64,
    overhead: f64,
}

pub struct SimBackend {
    state: Mutex<SimState>,
    registers: PlatformRegisters,
    tsc_khz: u64,
    timer_overhead: u64,
    uncore_range: (u32, u32),
    cpu_count: usize,
    cores_per_package: usize,
}

fn ratio_khz(ratio: u64) -> u64 {
    ratio * 100_000
}

fn tick(t: u64, interval: u64) -> u64 {
    t.div_ceil(interval) * interval
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Rounds away floating-point noise so integral latencies stay integral.
fn clean(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// `(a, b)` for latency `a + b / f_ghz` through two anchors.
fn two_point(f_hi_khz: u64, at_hi: f64, f_lo_khz: u64, at_lo: f64) -> (f64, f64) {
    let (g_hi, g_lo) = (f_hi_khz as f64 / 1e6, f_lo_khz as f64 / 1e6);
    if (g_hi - g_lo).abs() < 1e-12 {
        return (at_hi, 0.0);
    }
    let b = (at_lo - at_hi) / (1.0 / g_lo - 1.0 / g_hi);
    (at_hi - b / g_hi, b)
}

impl SimState {
    fn tsc(&self) -> u64 {
        self.p.tsc_khz
    }

    fn us(&self, us: f64) -> u64 {
        us_to_cycles(us, self.p.tsc_khz)
    }

    fn check_cpu(&self, cpu: Cpu) -> Result<()> {
        if cpu < self.cpus.len() {
            Ok(())
        } else {
            Err(Error::InvalidCpu(cpu))
        }
    }

    fn fault(&mut self, op: FaultOp) -> Result<()> {
        if let Some(left) = self.faults.get_mut(&op) {
            if *left == 0 {
                self.faults.remove(&op);
                return Err(Error::InjectedFault(format!("{op:?}")));
            }
            *left -= 1;
        }
        Ok(())
    }

    // ---- uncore -------------------------------------------------------

    fn uncore_limits(&self, pkg: usize) -> (u64, u64) {
        let (mn, mx) = msr::decode_uncore_ratio_limit(self.pkgs[pkg].ratio_limit);
        let lo = mn.max(self.p.uncore_min_ratio).min(self.p.uncore_max_ratio);
        let hi = mx.max(lo).min(self.p.uncore_max_ratio).max(lo);
        (ratio_khz(lo as u64), ratio_khz(hi as u64))
    }

    fn pinned_uncore(&self, pkg: usize) -> Option<u64> {
        let (lo, hi) = self.uncore_limits(pkg);
        (lo == hi).then_some(hi)
    }

    fn desired_uncore(&self, pkg: usize) -> u64 {
        let (lo, hi) = self.uncore_limits(pkg);
        if self.pkgs[pkg].demand_high {
            hi
        } else {
            self.p.ufs_low_khz.clamp(lo, hi)
        }
    }

    fn auto_decision(&self, pkg: usize) -> Option<(u64, u64)> {
        if self.pinned_uncore(pkg).is_some() {
            return None;
        }
        let pk = &self.pkgs[pkg];
        let desired = self.desired_uncore(pkg);
        let in_flight = pk.pending.map_or(pk.uncore_khz, |s| s.khz);
        if desired == in_flight {
            return None;
        }
        let (lo, hi) = self.uncore_limits(pkg);
        let t = if pk.uncore_khz < lo || pk.uncore_khz > hi {
            pk.mode_since
        } else {
            pk.demand_since.max(pk.mode_since) + self.controlloop
        };
        Some((t, desired))
    }

    fn schedule_switch(&mut self, pkg: usize, request: u64, khz: u64) {
        let interval = self.ufs_interval;
        let gap_range = self.p.ufs_gap_us_range;
        let artifact_range = self.p.ufs_artifact_gap_us_range;
        let artifact_rate = self.p.ufs_artifact_rate;
        let tsc = self.tsc();
        let pk = &mut self.pkgs[pkg];
        if khz == pk.uncore_khz {
            pk.pending = None;
            pk.artifact = None;
            return;
        }
        if pk.pending.is_some_and(|s| s.khz == khz) {
            return;
        }
        let at = tick(request, interval);
        let gap = us_to_cycles(draw(&mut pk.rng, gap_range), tsc);
        pk.pending = Some(Switch { at, khz, gap });
        pk.artifact = None;
        let roll: f64 = pk.rng.random();
        if roll < artifact_rate && at > request {
            let a_at = request + pk.rng.random_range(0..at - request);
            let a_gap = us_to_cycles(draw(&mut pk.rng, artifact_range), tsc);
            pk.artifact = Some((a_at, a_gap));
        }
    }

    fn write_uncore_limit(&mut self, pkg: usize, value: u64, t: u64) {
        let pk = &mut self.pkgs[pkg];
        pk.ratio_limit = value;
        pk.mode_since = t;
        if let Some(khz) = self.pinned_uncore(pkg) {
            self.schedule_switch(pkg, t, khz);
        }
    }

    fn note_demand(&mut self, pkg: usize, high: bool, t: u64) {
        let pk = &mut self.pkgs[pkg];
        if pk.demand_high != high {
            pk.demand_high = high;
            pk.demand_since = t;
        }
    }

    fn per_core_power(&self, kernel: &Kernel, khz: u64) -> f64 {
        let p = &self.p;
        let base = (interpolate(&p.power_base_w, khz) - p.power_idle_w) / p.power_reference_cores as f64;
        match kernel {
            Kernel::Compute => base,
            Kernel::Xor { v1, v2 } => {
                let (p1, p2) = (v1.popcount() as f64, v2.popcount() as f64);
                base + (interpolate(&p.power_coef_v1_mw, khz) * p1
                    + interpolate(&p.power_coef_v2_mw, khz) * (p2 - p1).max(0.0))
                    / 1000.0
            }
        }
    }

    fn package_power(&self, pkg: usize) -> f64 {
        let mut w = self.p.power_idle_w / self.p.packages as f64;
        for c in self.cpus.iter().filter(|c| c.package == pkg) {
            if let Some(k) = c.kernel.and_then(|id| self.kernels.get(&id)) {
                w += self.per_core_power(&k.kernel, c.freq_khz);
            }
        }
        w
    }

    fn effective_uncore_khz(&self, pkg: usize) -> u64 {
        let base = self.pkgs[pkg].uncore_khz;
        let excess = self.package_power(pkg) - self.p.package_tdp_w;
        if excess <= 0.0 || self.p.uncore_w_per_ratio <= 0.0 {
            return base;
        }
        let cut = (excess / self.p.uncore_w_per_ratio).ceil() as u64;
        base.saturating_sub(ratio_khz(cut))
            .max(ratio_khz(self.p.uncore_min_ratio as u64))
    }

    // ---- events -------------------------------------------------------

    fn next_event(&self, cpu: Cpu) -> Option<(u64, Event)> {
        let mut best: Option<(u64, Event)> = None;
        let mut consider = |t: u64, e: Event| {
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, e));
            }
        };
        if let Some((&(at, ticket), _)) = self.actions.iter().next() {
            consider(at + self.write_overhead, Event::Action(at, ticket));
        }
        let c = &self.cpus[cpu];
        if let Some((at, _)) = c.pending_freq {
            consider(at, Event::CoreFrequency);
        }
        let pk = &self.pkgs[c.package];
        if let Some((at, _)) = pk.artifact {
            consider(at, Event::Artifact);
        }
        if let Some(s) = pk.pending {
            consider(s.at, Event::Switch);
        }
        if let Some((t, khz)) = self.auto_decision(c.package) {
            consider(t, Event::Decision(khz));
        }
        best
    }

    fn apply(&mut self, cpu: Cpu, t: u64, event: Event) {
        let pkg = self.cpus[cpu].package;
        match event {
            Event::Action(at, ticket) => {
                let action = self
                    .actions
                    .remove(&(at, ticket))
                    .expect("event refers to a queued action");
                let returned = at + self.write_overhead;
                let result = match action {
                    Action::WriteMsr { cpu: c, address, value } => self
                        .fault(FaultOp::WriteMsr)
                        .and_then(|_| self.write_msr_at(c, address, value, returned)),
                    Action::SetCoreFrequency { cpu: c, khz } => self
                        .fault(FaultOp::SetCoreFrequency)
                        .and_then(|_| self.set_frequency_at(c, khz, returned)),
                };
                self.outcomes.insert(
                    ticket,
                    result.map(|_| ActionOutcome {
                        issued_cycles: at,
                        returned_cycles: returned,
                    }),
                );
            }
            Event::CoreFrequency => {
                let c = &mut self.cpus[cpu];
                if let Some((_, khz)) = c.pending_freq.take() {
                    c.freq_khz = khz;
                }
            }
            Event::Artifact => {
                let pk = &mut self.pkgs[pkg];
                if let Some((_, gap)) = pk.artifact.take() {
                    pk.stall = Some(Stall { expire: t + gap, gap });
                }
            }
            Event::Switch => {
                let pk = &mut self.pkgs[pkg];
                if let Some(s) = pk.pending.take() {
                    pk.uncore_khz = s.khz;
                    pk.artifact = None;
                    pk.stall = Some(Stall {
                        expire: t + s.gap,
                        gap: s.gap,
                    });
                }
            }
            Event::Decision(khz) => self.schedule_switch(pkg, t, khz),
        }
    }

    /// Applies every event due at or before `t` as seen from `cpu`.
    fn settle(&mut self, cpu: Cpu, t: u64) {
        while let Some((at, e)) = self.next_event(cpu) {
            if at > t {
                break;
            }
            self.apply(cpu, at, e);
        }
    }

    fn drop_expired_stall(&mut self, cpu: Cpu) {
        let c = &self.cpus[cpu];
        let pk = &mut self.pkgs[c.package];
        if pk.stall.is_some_and(|s| c.clock >= s.expire) {
            pk.stall = None;
        }
    }

    // ---- frequency and registers -------------------------------------

    fn set_frequency_at(&mut self, cpu: Cpu, khz: u64, t: u64) -> Result<()> {
        self.check_cpu(cpu)?;
        if !self.p.core_frequencies().contains(&khz) {
            return Err(Error::UnsupportedFrequency { cpu, khz });
        }
        let interval = self.pstate_interval;
        let c = &mut self.cpus[cpu];
        if c.governor != "userspace" {
            return Err(Error::GovernorUnavailable {
                cpu,
                reason: format!("governor is {:?}, not userspace", c.governor),
            });
        }
        c.requested_khz = khz;
        c.pending_freq = (khz != c.freq_khz).then(|| (tick(t, interval), khz));
        Ok(())
    }

    fn read_msr(&mut self, cpu: Cpu, address: u32) -> Result<u64> {
        self.check_cpu(cpu)?;
        let r = &self.regs;
        let c = &self.cpus[cpu];
        Ok(if address == r.uncore_ratio_limit {
            self.pkgs[c.package].ratio_limit
        } else if address == r.uncore_perf_status {
            self.effective_uncore_khz(c.package) / 100_000
        } else if address == r.clock_modulation {
            c.clock_modulation
        } else if address == r.aperf {
            c.counters.aperf as u64
        } else if address == r.mperf {
            c.counters.mperf as u64
        } else if address == r.pperf {
            c.counters.pperf as u64
        } else if address == msr::IA32_TIME_STAMP_COUNTER {
            c.clock
        } else {
            return Err(Error::UnmodeledRegister(address));
        })
    }

    fn write_msr_at(&mut self, cpu: Cpu, address: u32, value: u64, t: u64) -> Result<()> {
        self.check_cpu(cpu)?;
        let r = self.regs.clone();
        if address == r.uncore_ratio_limit {
            let pkg = self.cpus[cpu].package;
            self.write_uncore_limit(pkg, value, t);
            Ok(())
        } else if address == r.clock_modulation {
            self.cpus[cpu].clock_modulation = value;
            Ok(())
        } else if [r.uncore_perf_status, r.aperf, r.mperf, r.pperf, msr::IA32_TIME_STAMP_COUNTER]
            .contains(&address)
        {
            Err(Error::ReadOnlyRegister(address))
        } else {
            Err(Error::UnmodeledRegister(address))
        }
    }

    fn duty(&self, cpu: Cpu) -> f64 {
        let m = ClockModulation::decode(
            self.cpus[cpu].clock_modulation,
            self.regs.extended_clock_modulation,
        );
        if m.level == 0 || self.p.tstate_unimplemented_levels.contains(&m.level) {
            return 1.0;
        }
        let floor = 1.0 / if m.extended { 16.0 } else { 8.0 };
        (m.nominal_duty() - self.p.tstate_excess_skip).max(floor)
    }

    // ---- work ---------------------------------------------------------

    fn level_of(&self, buffer: &ChaseBuffer) -> Level {
        let bytes = buffer.footprint_bytes();
        if bytes <= self.p.l1_bytes {
            Level::L1
        } else if bytes <= self.p.l2_bytes {
            Level::L2
        } else if bytes <= self.p.llc_bytes {
            Level::Llc
        } else {
            Level::Dram
        }
    }

    /// Latency of one dependent load excluding the timer overhead.
    fn raw_latency(&self, cpu: Cpu, level: Level) -> f64 {
        let c = &self.cpus[cpu];
        let core = self.tsc() as f64 / c.freq_khz as f64;
        let llc = || {
            self.p.llc_latency_cycles(self.effective_uncore_khz(c.package)) - self.overhead
        };
        let x = match level {
            Level::L1 => self.p.l1_core_cycles * core,
            Level::L2 => self.p.l2_core_cycles * core,
            Level::Llc => llc(),
            Level::Dram => llc() + self.p.dram_extra_ns * self.tsc() as f64 / 1e6,
        };
        clean(x).max(1.0)
    }

    fn productive_fraction(&self, cpu: Cpu, level: Level, lat: f64) -> f64 {
        if self.p.pperf_counts_stalled_cycles || matches!(level, Level::L1) {
            return 1.0;
        }
        let core = self.tsc() as f64 / self.cpus[cpu].freq_khz as f64;
        (self.p.l1_core_cycles * core / lat).min(1.0)
    }

    /// Advances `cpu` by `cycles` TSC cycles of busy time.
    fn busy(&mut self, cpu: Cpu, cycles: f64, productive: f64) {
        let tsc = self.tsc() as f64;
        let c = &mut self.cpus[cpu];
        let total = c.frac + cycles;
        let whole = total.floor();
        c.frac = total - whole;
        c.clock += whole as u64;
        let core = whole * c.freq_khz as f64 / tsc;
        c.counters.aperf += core;
        c.counters.mperf += whole;
        c.counters.pperf += core * productive;
    }

    /// Runs up to `n` loads; stops early once the clock reaches `deadline`.
    fn run_accesses(&mut self, cpu: Cpu, level: Level, n: u64, deadline: Option<u64>) -> u64 {
        let mut done = 0;
        while done < n {
            let clock = self.cpus[cpu].clock;
            if deadline.is_some_and(|d| clock >= d) {
                break;
            }
            // Events that fall inside the next access take effect for it.
            let ahead = self.raw_latency(cpu, level).ceil() as u64;
            self.settle(cpu, clock + ahead);
            let pkg = self.cpus[cpu].package;
            if level >= Level::Llc {
                if let Some(s) = self.pkgs[pkg].stall.take() {
                    if clock < s.expire {
                        self.cpus[cpu].clock += s.gap;
                    }
                }
            }
            let lat = self.raw_latency(cpu, level);
            let mut m = n - done;
            let now = self.cpus[cpu].clock;
            if let Some((t, _)) = self.next_event(cpu) {
                let room = t.saturating_sub(now) as f64 / lat;
                m = m.min((room.floor() as u64).max(1));
            }
            if let Some(d) = deadline {
                let room = d.saturating_sub(now) as f64 / lat;
                m = m.min((room.ceil() as u64).max(1));
            }
            let productive = self.productive_fraction(cpu, level, lat);
            self.busy(cpu, m as f64 * lat, productive);
            done += m;
        }
        done
    }

    fn chase(
        &mut self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        entries: usize,
        per_entry: usize,
        out: &mut Vec<TraceEntry>,
    ) -> usize {
        let level = self.level_of(buffer);
        let pkg = self.cpus[cpu].package;
        let now = self.cpus[cpu].clock;
        self.note_demand(pkg, level >= Level::Llc, now);
        out.reserve(entries);
        let overhead = self.overhead;
        let mut horizon = 0u64;
        let mut fast_lat = 0.0;
        for _ in 0..entries {
            let begin = self.cpus[cpu].clock;
            let span = per_entry as f64 * fast_lat + overhead;
            if begin as f64 + 2.0 * (span + fast_lat + 1.0) < horizon as f64 {
                // No event can fall inside this entry.
                let productive = self.productive_fraction(cpu, level, fast_lat);
                self.busy(cpu, span, productive);
            } else {
                self.run_accesses(cpu, level, per_entry as u64, None);
                self.busy(cpu, overhead, 1.0);
                fast_lat = self.raw_latency(cpu, level);
                horizon = self
                    .next_event(cpu)
                    .map_or(u64::MAX, |(t, _)| t)
                    .min(if self.pkgs[pkg].stall.is_some() { 0 } else { u64::MAX });
            }
            let end = self.cpus[cpu].clock;
            out.push(TraceEntry {
                timestamp_cycles: end,
                duration_cycles: (end - begin).max(1),
            });
        }
        buffer.advance(start, entries as u64 * per_entry as u64)
    }

    /// Busy non-memory work until `deadline`; returns completed core cycles.
    fn compute_to(&mut self, cpu: Cpu, deadline: u64) -> f64 {
        let tsc = self.tsc() as f64;
        let mut active = 0.0;
        loop {
            let clock = self.cpus[cpu].clock;
            self.settle(cpu, clock);
            if clock >= deadline {
                break;
            }
            let next = self.next_event(cpu).map_or(deadline, |(t, _)| t.min(deadline));
            let dt = next.max(clock + 1) - clock;
            let duty = self.duty(cpu);
            let c = &mut self.cpus[cpu];
            let core = dt as f64 * c.freq_khz as f64 / tsc * duty;
            c.counters.aperf += core;
            c.counters.mperf += dt as f64 * duty;
            c.counters.pperf += core;
            c.clock += dt;
            active += core;
        }
        self.drop_expired_stall(cpu);
        active
    }

    fn idle_to(&mut self, cpu: Cpu, deadline: u64) {
        loop {
            let clock = self.cpus[cpu].clock;
            self.settle(cpu, clock);
            if clock >= deadline {
                break;
            }
            let next = self.next_event(cpu).map_or(deadline, |(t, _)| t.min(deadline));
            self.cpus[cpu].clock = next.max(clock + 1);
        }
        self.drop_expired_stall(cpu);
    }

    fn advance_kernels_to(&mut self, t: u64) {
        let busy: Vec<Cpu> = (0..self.cpus.len())
            .filter(|&c| self.cpus[c].kernel.is_some() && self.cpus[c].clock < t)
            .collect();
        for cpu in busy {
            let work = self.compute_to(cpu, t) / self.p.compute_cycles_per_iteration;
            self.cpus[cpu].kernel_work += work;
        }
    }

    fn observer_clock(&self) -> u64 {
        match self.pinned.get(&std::thread::current().id()) {
            Some(&c) => self.cpus[c].clock,
            None => self.cpus[0].clock,
        }
    }

    // ---- AVX license ----------------------------------------------------

    fn license_phase(&mut self, cpu: Cpu, kind: PhaseKind, deadline: u64) {
        let clock = self.cpus[cpu].clock;
        self.settle(cpu, clock);
        let start = self.cpus[cpu].clock;
        if start >= deadline {
            return;
        }
        let tsc = self.tsc() as f64;
        let throttle_range = self.p.avx_throttle_us_range;
        let residency = self.p.avx_license_residency_us_range;
        let relax = self.us(self.p.avx_license_relax_us) as f64;
        let lic_khz = self.p.avx512_license_khz;
        let tsc_khz = self.tsc();
        let c = &mut self.cpus[cpu];
        let f0 = c.freq_khz as f64;
        let fl = c.freq_khz.min(lic_khz) as f64;
        let span = (deadline - start) as f64;
        match kind {
            PhaseKind::High => {
                if let Some(d) = c.license.drop_at.filter(|&d| c.license.high && d <= start) {
                    c.license.high = false;
                    c.license.last_downgrade = Some(d);
                }
                let mut rest = span;
                if !c.license.high {
                    let theta = us_to_cycles(draw(&mut c.rng, throttle_range), tsc_khz) as f64;
                    let theta = theta.min(span);
                    c.counters.throttle += theta * f0 / tsc;
                    c.counters.aperf += theta * f0 / tsc;
                    c.counters.pperf += theta * f0 / tsc;
                    c.license.high = true;
                    c.license.gap_at_acquisition = c.license.last_downgrade.map(|d| start - d);
                    rest = span - theta;
                }
                c.counters.aperf += rest * fl / tsc;
                c.counters.pperf += rest * fl / tsc;
                c.counters.license2 += rest * fl / tsc;
                // Residency shrinks toward the upper bound when the license
                // was re-acquired shortly after it was last released.
                let relaxed = c
                    .license
                    .gap_at_acquisition
                    .map_or(1.0, |g| (g as f64 / relax).min(1.0));
                let hi = residency[1];
                let lo = hi - (hi - residency[0]) * relaxed;
                let r = us_to_cycles(draw(&mut c.rng, [lo, hi]), tsc_khz);
                c.license.drop_at = Some(deadline + r);
            }
            PhaseKind::Low => {
                let mut at_license = 0.0;
                if c.license.high {
                    let d = c.license.drop_at.unwrap_or(deadline);
                    if d >= deadline {
                        at_license = span;
                    } else {
                        at_license = d.saturating_sub(start) as f64;
                        c.license.high = false;
                        c.license.drop_at = None;
                        c.license.last_downgrade = Some(d.max(start));
                    }
                }
                let normal = span - at_license;
                c.counters.aperf += at_license * fl / tsc + normal * f0 / tsc;
                c.counters.pperf += at_license * fl / tsc + normal * f0 / tsc;
                c.counters.license2 += at_license * fl / tsc;
            }
        }
        c.counters.mperf += span;
        c.clock = deadline;
    }

    // ---- idle states ----------------------------------------------------

    fn wake(&mut self, caller: Cpu, callee: Cpu, idle: u64, mode: WakeMode) -> (u64, u64) {
        let t0 = self.cpus[caller].clock.max(self.cpus[callee].clock);
        let t_sig = t0 + idle;
        self.idle_to(caller, t_sig);
        self.idle_to(callee, t_sig);
        let latency_us = match mode {
            WakeMode::Poll => self.p.signal_delivery_us,
            WakeMode::Block => {
                let disabled = self.cpus[callee].idle_disabled;
                let mut state = (STATE_C1..=STATE_C6).rev().find(|&s| !disabled[s]).unwrap_or(0);
                let demote: f64 = self.cpus[callee].rng.random();
                if state > STATE_C1 && demote < self.p.cstate_demotion_prob {
                    state -= 1;
                }
                let idle_us = idle as f64 * 1000.0 / self.tsc() as f64;
                self.cpus[callee].residency_us[state] += idle_us;
                self.wake_latency_us(caller, callee, state)
            }
        };
        let lat = self.us(latency_us).max(1);
        self.cpus[caller].clock = t_sig;
        self.cpus[callee].clock = t_sig + lat;
        (t_sig, t_sig + lat)
    }

    fn wake_latency_us(&mut self, caller: Cpu, callee: Cpu, state: usize) -> f64 {
        let p = &self.p;
        if state == 0 {
            return p.signal_delivery_us;
        }
        let (nominal, minfreq) = match state {
            STATE_C1 => (p.c1_wake_us_nominal, p.c1_wake_us_minfreq),
            2 => (p.c1e_wake_us_nominal, p.c1e_wake_us_minfreq),
            _ => (p.c6_wake_us_nominal, p.c6_wake_us_minfreq),
        };
        let (a, b) = two_point(p.nominal_core_khz, nominal, p.core_min_khz, minfreq);
        let pkg = self.cpus[callee].package;
        let remote = self.cpus[caller].package != pkg;
        let package_busy = self
            .cpus
            .iter()
            .enumerate()
            .any(|(i, c)| i != callee && c.package == pkg && c.kernel.is_some());
        let jitter = p.wake_jitter_us;
        let (range, tail, tail_p, extra) = (
            p.c6_wake_us_remote_idle_range,
            p.c6_remote_idle_tail_us,
            p.c6_remote_idle_tail_prob,
            p.remote_idle_extra_us,
        );
        let f = self.cpus[callee].freq_khz as f64 / 1e6;
        let rng = &mut self.cpus[callee].rng;
        let jittered = |rng: &mut ChaCha8Rng| a + b / f + jitter * (2.0 * rng.random::<f64>() - 1.0);
        if remote && !package_busy {
            if state == STATE_C6 {
                if rng.random::<f64>() < tail_p {
                    tail
                } else {
                    draw(rng, range)
                }
            } else {
                jittered(rng) + extra
            }
        } else {
            jittered(rng)
        }
        .max(p.signal_delivery_us)
    }

    fn power_w(&mut self) -> f64 {
        let mut w = self.p.power_idle_w;
        for c in &self.cpus {
            if let Some(k) = c.kernel.and_then(|id| self.kernels.get(&id)) {
                w += self.per_core_power(&k.kernel, c.freq_khz);
            }
        }
        if self.p.power_noise_w > 0.0 {
            let n = Normal::new(0.0, self.p.power_noise_w).expect("noise validated");
            w += n.sample(&mut self.power_rng);
        }
        w.max(0.0)
    }
}

impl SimBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let p = config.sim.clone();
        p.validate()?;
        let seed = config.seed;
        let n = p.cpu_count();
        let boot_limit = msr::encode_uncore_ratio_limit(p.uncore_min_ratio, p.uncore_max_ratio);
        let cpus = (0..n)
            .map(|cpu| SimCpu {
                package: cpu / p.cores_per_package,
                clock: 0,
                frac: 0.0,
                requested_khz: p.nominal_core_khz,
                freq_khz: p.nominal_core_khz,
                pending_freq: None,
                governor: "userspace".into(),
                counters: Counters::default(),
                clock_modulation: 0,
                idle_disabled: [false; 4],
                residency_us: [0.0; 4],
                license: License::default(),
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + cpu as u64)),
                kernel: None,
                kernel_work: 0.0,
            })
            .collect();
        let pkgs = (0..p.packages)
            .map(|pkg| SimPackage {
                ratio_limit: boot_limit,
                uncore_khz: p.ufs_low_khz,
                pending: None,
                artifact: None,
                stall: None,
                demand_high: false,
                demand_since: 0,
                mode_since: 0,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2000 + pkg as u64)),
            })
            .collect();
        let external_power = match &config.power_source {
            PowerSource::ExternalFile(path) => Some(ExternalFileSource::open(path)?),
            PowerSource::Rapl => {
                return Err(Error::Config(
                    "the simulation backend cannot read RAPL; use simulated or file:PATH".into(),
                ))
            }
            PowerSource::Simulated => None,
        };
        let tsc_khz = p.tsc_khz;
        let state = SimState {
            pstate_interval: us_to_cycles(p.pstate_update_interval_us, tsc_khz).max(1),
            ufs_interval: us_to_cycles(p.ufs_update_interval_us, tsc_khz).max(1),
            controlloop: us_to_cycles(p.ufs_controlloop_ms * 1000.0, tsc_khz),
            write_overhead: p.control_write_overhead_cycles,
            overhead: p.timer_overhead_cycles as f64,
            regs: config.registers.clone(),
            cpus,
            pkgs,
            actions: BTreeMap::new(),
            outcomes: HashMap::new(),
            next_ticket: 0,
            kernels: HashMap::new(),
            next_kernel: 0,
            pinned: HashMap::new(),
            power_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3000)),
            external_power,
            faults: HashMap::new(),
            p: p.clone(),
        };
        Ok(SimBackend {
            state: Mutex::new(state),
            registers: config.registers,
            tsc_khz,
            timer_overhead: p.timer_overhead_cycles,
            uncore_range: (p.uncore_min_ratio, p.uncore_max_ratio),
            cpu_count: n,
            cores_per_package: p.cores_per_package,
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(BackendConfig::simulation(seed)).expect("default parameters are valid")
    }

    pub fn with_parameters(params: SimParameters, seed: u64) -> Result<Self> {
        Self::new(BackendConfig {
            sim: params,
            ..BackendConfig::simulation(seed)
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn parameters(&self) -> SimParameters {
        self.lock().p.clone()
    }

    /// Makes the call of `op` after `after` successful calls fail once.
    pub fn inject_fault(&self, op: FaultOp, after: u64) {
        self.lock().faults.insert(op, after);
    }

    pub fn clear_faults(&self) {
        self.lock().faults.clear();
    }

    pub fn snapshot(&self) -> SimSnapshot {
        let st = self.lock();
        SimSnapshot {
            knobs: SimKnobs {
                requested_khz: st.cpus.iter().map(|c| c.requested_khz).collect(),
                governors: st.cpus.iter().map(|c| c.governor.clone()).collect(),
                uncore_ratio_limits: st.pkgs.iter().map(|p| p.ratio_limit).collect(),
                clock_modulation: st.cpus.iter().map(|c| c.clock_modulation).collect(),
                idle_disabled: st.cpus.iter().map(|c| c.idle_disabled).collect(),
            },
            clocks: st.cpus.iter().map(|c| c.clock).collect(),
            counters: st
                .cpus
                .iter()
                .map(|c| {
                    let k = &c.counters;
                    [
                        k.aperf as u64,
                        k.mperf as u64,
                        k.pperf as u64,
                        k.throttle as u64,
                        k.license2 as u64,
                    ]
                })
                .collect(),
        }
    }

    /// Frequency the core currently runs at, as opposed to the request.
    pub fn effective_core_khz(&self, cpu: Cpu) -> Result<u64> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        Ok(st.cpus[cpu].freq_khz)
    }

    pub fn effective_uncore_khz(&self, package: usize) -> Result<u64> {
        let st = self.lock();
        if package >= st.pkgs.len() {
            return Err(Error::Invalid(format!("no package {package}")));
        }
        Ok(st.effective_uncore_khz(package))
    }

    /// Advances `cpu` by `cycles` without doing work.
    pub fn advance(&self, cpu: Cpu, cycles: u64) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        let t = st.cpus[cpu].clock + cycles;
        st.idle_to(cpu, t);
        Ok(())
    }
}

impl Backend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulation
    }

    fn tsc_khz(&self) -> u64 {
        self.tsc_khz
    }

    fn timer_overhead_cycles(&self) -> u64 {
        self.timer_overhead
    }

    fn cpus(&self) -> Vec<Cpu> {
        (0..self.cpu_count).collect()
    }

    fn package_of(&self, cpu: Cpu) -> Result<usize> {
        if cpu < self.cpu_count {
            Ok(cpu / self.cores_per_package)
        } else {
            Err(Error::InvalidCpu(cpu))
        }
    }

    fn registers(&self) -> &PlatformRegisters {
        &self.registers
    }

    fn uncore_ratio_range(&self) -> (u32, u32) {
        self.uncore_range
    }

    fn now_cycles(&self, cpu: Cpu) -> Result<u64> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        Ok(st.cpus[cpu].clock)
    }

    fn read_msr(&self, cpu: Cpu, address: u32) -> Result<u64> {
        self.lock().read_msr(cpu, address)
    }

    fn write_msr(&self, cpu: Cpu, address: u32, value: u64) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::WriteMsr)?;
        let t = st.observer_clock().max(st.cpus[cpu].clock);
        st.settle(cpu, t);
        st.write_msr_at(cpu, address, value, t)
    }

    fn available_frequencies(&self, cpu: Cpu) -> Result<Vec<u64>> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        Ok(st.p.core_frequencies())
    }

    fn core_frequency(&self, cpu: Cpu) -> Result<u64> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        Ok(st.cpus[cpu].requested_khz)
    }

    fn set_core_frequency(&self, cpu: Cpu, khz: u64) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::SetCoreFrequency)?;
        let t = st.observer_clock().max(st.cpus[cpu].clock);
        st.settle(cpu, t);
        st.set_frequency_at(cpu, khz, t)
    }

    fn governor(&self, cpu: Cpu) -> Result<String> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        Ok(st.cpus[cpu].governor.clone())
    }

    fn set_governor(&self, cpu: Cpu, governor: &str) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        if !GOVERNORS.contains(&governor) {
            return Err(Error::GovernorUnavailable {
                cpu,
                reason: format!("unknown governor {governor:?}"),
            });
        }
        st.cpus[cpu].governor = governor.to_string();
        Ok(())
    }

    fn read_counter(&self, cpu: Cpu, event: CounterEvent) -> Result<u64> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::ReadCounter)?;
        let k = &st.cpus[cpu].counters;
        Ok(match event {
            CounterEvent::Throttle => k.throttle,
            CounterEvent::License2 => k.license2,
            CounterEvent::Aperf => k.aperf,
            CounterEvent::Pperf => k.pperf,
        } as u64)
    }

    fn sample_power(&self) -> Result<PowerSample> {
        let mut st = self.lock();
        st.fault(FaultOp::SamplePower)?;
        if let Some(src) = st.external_power.as_mut() {
            return src.next_sample();
        }
        let t = st.observer_clock();
        st.advance_kernels_to(t);
        let w = st.power_w();
        PowerSample::new(
            crate::model::cycles_to_ns(t, st.p.tsc_khz),
            w,
            PowerSourceKind::Simulated,
        )
    }

    fn pin_to_cpu(&self, cpu: Cpu) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.pinned.insert(std::thread::current().id(), cpu);
        Ok(())
    }

    fn current_cpu(&self) -> Result<Cpu> {
        Ok(self
            .lock()
            .pinned
            .get(&std::thread::current().id())
            .copied()
            .unwrap_or(0))
    }

    fn schedule(&self, at_cycles: u64, action: Action) -> Result<ActionTicket> {
        let mut st = self.lock();
        let target = match action {
            Action::WriteMsr { cpu, .. } | Action::SetCoreFrequency { cpu, .. } => cpu,
        };
        st.check_cpu(target)?;
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.actions.insert((at_cycles, ticket), action);
        Ok(ActionTicket(ticket))
    }

    fn await_action(&self, ticket: ActionTicket) -> Result<ActionOutcome> {
        let mut st = self.lock();
        if let Some(r) = st.outcomes.remove(&ticket.0) {
            return r;
        }
        let Some((&key, _)) = st.actions.iter().find(|(k, _)| k.1 == ticket.0) else {
            return Err(Error::Invalid(format!("unknown action ticket {}", ticket.0)));
        };
        // Nobody reached the action's time yet: run the queue up to it.
        let overhead = st.write_overhead;
        let target = match st.actions[&key] {
            Action::WriteMsr { cpu, .. } | Action::SetCoreFrequency { cpu, .. } => cpu,
        };
        while let Some((&(at, t), _)) = st.actions.iter().next() {
            if (at, t) > key {
                break;
            }
            st.apply(target, at + overhead, Event::Action(at, t));
        }
        st.outcomes
            .remove(&ticket.0)
            .unwrap_or_else(|| Err(Error::Invalid(format!("action {} was lost", ticket.0))))
    }

    fn chase(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        entries: usize,
        accesses_per_entry: usize,
        out: &mut Vec<TraceEntry>,
    ) -> Result<usize> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::Chase)?;
        if accesses_per_entry == 0 {
            return Err(Error::Invalid("an entry needs at least one access".into()));
        }
        Ok(st.chase(cpu, buffer, start, entries, accesses_per_entry, out))
    }

    fn chase_until(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        deadline_cycles: u64,
    ) -> Result<(usize, u64)> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::Chase)?;
        let level = st.level_of(buffer);
        let pkg = st.cpus[cpu].package;
        let now = st.cpus[cpu].clock;
        st.note_demand(pkg, level >= Level::Llc, now);
        let n = st.run_accesses(cpu, level, u64::MAX, Some(deadline_cycles));
        Ok((buffer.advance(start, n), n))
    }

    fn compute_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<u64> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::ComputeUntil)?;
        let pkg = st.cpus[cpu].package;
        let now = st.cpus[cpu].clock;
        st.note_demand(pkg, false, now);
        let cycles = st.compute_to(cpu, deadline_cycles);
        Ok((cycles / st.p.compute_cycles_per_iteration) as u64)
    }

    fn license_phase_until(
        &self,
        cpu: Cpu,
        kind: PhaseKind,
        deadline_cycles: u64,
        _memory: bool,
    ) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        st.fault(FaultOp::LicensePhase)?;
        st.license_phase(cpu, kind, deadline_cycles);
        Ok(())
    }

    fn start_kernel(&self, cpus: &[Cpu], kernel: Kernel) -> Result<KernelHandle> {
        let mut st = self.lock();
        st.fault(FaultOp::StartKernel)?;
        for &c in cpus {
            st.check_cpu(c)?;
            if st.cpus[c].kernel.is_some() {
                return Err(Error::Invalid(format!("cpu {c} already runs a kernel")));
            }
        }
        let id = st.next_kernel;
        st.next_kernel += 1;
        let mut started = Vec::with_capacity(cpus.len());
        for &c in cpus {
            let cpu = &mut st.cpus[c];
            cpu.kernel = Some(id);
            cpu.kernel_work = 0.0;
            started.push(cpu.clock);
        }
        st.kernels.insert(
            id,
            SimKernel {
                cpus: cpus.to_vec(),
                kernel,
                started,
            },
        );
        Ok(KernelHandle(id))
    }

    fn stop_kernel(&self, handle: KernelHandle) -> Result<Vec<KernelStats>> {
        let mut st = self.lock();
        if !st.kernels.contains_key(&handle.0) {
            return Err(Error::Invalid(format!("unknown kernel {}", handle.0)));
        }
        let t = st.observer_clock();
        st.advance_kernels_to(t);
        let k = st.kernels.remove(&handle.0).expect("checked above");
        Ok(k.cpus
            .iter()
            .zip(&k.started)
            .map(|(&c, &s)| {
                let cpu = &mut st.cpus[c];
                cpu.kernel = None;
                KernelStats {
                    cpu: c,
                    iterations: cpu.kernel_work as u64,
                    elapsed_cycles: cpu.clock - s,
                }
            })
            .collect())
    }

    fn sleep_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        if st.cpus[cpu].kernel.is_some() {
            let work = st.compute_to(cpu, deadline_cycles) / st.p.compute_cycles_per_iteration;
            st.cpus[cpu].kernel_work += work;
        } else {
            let pkg = st.cpus[cpu].package;
            let now = st.cpus[cpu].clock;
            st.note_demand(pkg, false, now);
            st.idle_to(cpu, deadline_cycles);
        }
        st.advance_kernels_to(deadline_cycles);
        Ok(())
    }

    fn idle_states(&self, cpu: Cpu) -> Result<Vec<IdleState>> {
        let st = self.lock();
        st.check_cpu(cpu)?;
        let c = &st.cpus[cpu];
        Ok(IDLE_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| IdleState {
                index: i,
                name: name.to_string(),
                disabled: c.idle_disabled[i],
                residency_us: c.residency_us[i] as u64,
            })
            .collect())
    }

    fn set_idle_state_disabled(&self, cpu: Cpu, index: usize, disabled: bool) -> Result<()> {
        let mut st = self.lock();
        st.check_cpu(cpu)?;
        if index >= IDLE_NAMES.len() {
            return Err(Error::CstateUnavailable(format!("state{index} on cpu {cpu}")));
        }
        st.cpus[cpu].idle_disabled[index] = disabled;
        Ok(())
    }

    fn wake_probe(
        &self,
        caller: Cpu,
        callee: Cpu,
        idle_cycles: u64,
        mode: WakeMode,
    ) -> Result<WakeObservation> {
        let mut st = self.lock();
        st.check_cpu(caller)?;
        st.check_cpu(callee)?;
        st.fault(FaultOp::WakeProbe)?;
        if caller == callee {
            return Err(Error::Invalid("caller and callee must differ".into()));
        }
        let (signal_cycles, wake_cycles) = st.wake(caller, callee, idle_cycles, mode);
        Ok(WakeObservation {
            signal_cycles,
            wake_cycles,
        })
    }
}
