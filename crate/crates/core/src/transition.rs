//! Frequency transition experiments: detection of the stall a switch leaves
//! in a latency trace, core P-state transition times and uncore transition
//! delays, either forced through the ratio limits or triggered by the
//! hardware control loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::build_histogram_fixed;
use crate::chase::{build_chase, mean_duration, ChaseBuffer, ChasePreset, CACHE_LINE_BYTES};
use crate::error::{Error, Result};
use crate::hwif::{
    self, msr, set_uncore_range, uncore_ratio_for_khz, Action, Backend,
};
use crate::model::{cycles_to_us, us_to_cycles, Cpu, Histogram, LatencyTrace, TraceEntry, TransitionMeasurement};

pub const DEFAULT_THRESHOLD_CYCLES: u64 = 20_000;
/// Baseline latency above which the gap threshold grows proportionally.
pub const THRESHOLD_BASELINE_CYCLES: f64 = 2_000.0;

/// First access slow enough to be a frequency switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEvent {
    pub index: usize,
    pub gap_cycles: u64,
    pub gap_us: f64,
}

/// Returns the first entry whose duration exceeds `threshold_cycles`.
pub fn detect_transition(trace: &LatencyTrace, threshold_cycles: u64) -> Option<GapEvent> {
    let index = find_gap(trace.entries(), 0, threshold_cycles)?;
    let gap_cycles = trace.entries()[index].duration_cycles;
    Some(GapEvent {
        index,
        gap_cycles,
        gap_us: cycles_to_us(gap_cycles as f64, trace.tsc_khz()),
    })
}

fn find_gap(entries: &[TraceEntry], from: usize, threshold: u64) -> Option<usize> {
    entries
        .get(from..)?
        .iter()
        .position(|e| e.duration_cycles > threshold)
        .map(|i| i + from)
}

/// Gap threshold for a chase whose steady-state latency is `baseline_cycles`.
pub fn scaled_threshold(baseline_cycles: f64) -> u64 {
    if baseline_cycles > THRESHOLD_BASELINE_CYCLES {
        (DEFAULT_THRESHOLD_CYCLES as f64 * baseline_cycles / THRESHOLD_BASELINE_CYCLES).round() as u64
    } else {
        DEFAULT_THRESHOLD_CYCLES
    }
}

/// Splits samples by whether both latencies lie within `tol_fraction` of
/// the expectations. Each returned sample carries the matching `valid` flag.
pub fn filter_invalid(
    samples: &[TransitionMeasurement],
    expected_before: f64,
    expected_after: f64,
    tol_fraction: f64,
) -> (Vec<TransitionMeasurement>, Vec<TransitionMeasurement>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for s in samples {
        let valid = s.matches(expected_before, expected_after, tol_fraction);
        let s = TransitionMeasurement { valid, ..*s };
        if valid {
            accepted.push(s);
        } else {
            rejected.push(s);
        }
    }
    (accepted, rejected)
}

// ---- core P-states ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Request at a random time after the previous transition.
    Random,
    /// Request right after the previous transition was observed.
    Immediate,
}

impl std::str::FromStr for Trigger {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Trigger::Random),
            "immediate" => Ok(Trigger::Immediate),
            other => Err(Error::Config(format!("unknown trigger {other:?} (random|immediate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreTransitionConfig {
    pub cpu: Cpu,
    pub from_khz: u64,
    pub to_khz: u64,
    pub trigger: Trigger,
    pub reps: usize,
    pub seed: u64,
    /// Dependent loads per timed block.
    pub block_accesses: usize,
    /// A block reflects a frequency when its mean is this close to the
    /// calibrated latency.
    pub tolerance: f64,
    /// Upper bound of the random wait before a request.
    pub random_wait_us: f64,
    pub settle_us: f64,
    /// A rep gives up when no transition shows within this time.
    pub timeout_us: f64,
    pub histogram_bin_us: f64,
    pub histogram_max_us: f64,
}

impl Default for CoreTransitionConfig {
    fn default() -> Self {
        CoreTransitionConfig {
            cpu: 0,
            from_khz: 2_400_000,
            to_khz: 3_000_000,
            trigger: Trigger::Random,
            reps: 1000,
            seed: 0,
            block_accesses: 64,
            tolerance: 0.05,
            random_wait_us: 5_000.0,
            settle_us: 2_000.0,
            timeout_us: 20_000.0,
            histogram_bin_us: 25.0,
            histogram_max_us: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTransitionResult {
    pub config: CoreTransitionConfig,
    pub tsc_khz: u64,
    /// Request return to the end of the first block at the new frequency.
    pub samples_cycles: Vec<u64>,
    pub histogram: Option<Histogram>,
    pub undetected: usize,
    pub from_block_cycles: f64,
    pub to_block_cycles: f64,
    /// Detection resolution: two blocks at the target frequency.
    pub resolution_us: f64,
}

impl CoreTransitionResult {
    pub fn samples_us(&self) -> Vec<f64> {
        self.samples_cycles
            .iter()
            .map(|&c| cycles_to_us(c as f64, self.tsc_khz))
            .collect()
    }
}

struct Prober<'a> {
    backend: &'a dyn Backend,
    cpu: Cpu,
    buffer: &'a ChaseBuffer,
    slot: usize,
    scratch: Vec<TraceEntry>,
}

impl<'a> Prober<'a> {
    fn new(backend: &'a dyn Backend, cpu: Cpu, buffer: &'a ChaseBuffer) -> Self {
        Prober {
            backend,
            cpu,
            buffer,
            slot: 0,
            scratch: Vec::new(),
        }
    }

    fn now(&self) -> Result<u64> {
        self.backend.now_cycles(self.cpu)
    }

    fn chase_for(&mut self, cycles: u64) -> Result<u64> {
        let deadline = self.now()? + cycles;
        let (slot, n) = self.backend.chase_until(self.cpu, self.buffer, self.slot, deadline)?;
        self.slot = slot;
        Ok(n)
    }

    fn record(&mut self, entries: usize, per_entry: usize, out: &mut Vec<TraceEntry>) -> Result<()> {
        self.slot = self
            .backend
            .chase(self.cpu, self.buffer, self.slot, entries, per_entry, out)?;
        Ok(())
    }

    fn mean_block(&mut self, blocks: usize, per_entry: usize) -> Result<f64> {
        let mut out = std::mem::take(&mut self.scratch);
        out.clear();
        self.record(blocks, per_entry, &mut out)?;
        let m = mean_duration(&out, 0, out.len());
        self.scratch = out;
        m
    }

    /// Blocks until one lies within `tol` of `target`; returns its end.
    fn until_block(&mut self, target: f64, tol: f64, per_entry: usize, deadline: u64) -> Result<Option<u64>> {
        let mut out = std::mem::take(&mut self.scratch);
        let found = loop {
            out.clear();
            self.record(256, per_entry, &mut out)?;
            if let Some(e) = out
                .iter()
                .find(|e| crate::model::within(e.duration_cycles as f64, target, tol))
            {
                break Some(e.timestamp_cycles);
            }
            if out.last().is_some_and(|e| e.timestamp_cycles >= deadline) {
                break None;
            }
        };
        self.scratch = out;
        Ok(found)
    }
}

fn check_frequency(backend: &dyn Backend, cpu: Cpu, khz: u64) -> Result<()> {
    if backend.available_frequencies(cpu)?.contains(&khz) {
        Ok(())
    } else {
        Err(Error::UnsupportedFrequency { cpu, khz })
    }
}

/// Calibrated block latency at `khz`.
fn calibrate_block(p: &mut Prober, khz: u64, settle: u64, per_entry: usize) -> Result<f64> {
    p.backend.set_core_frequency(p.cpu, khz)?;
    p.chase_for(settle)?;
    p.mean_block(200, per_entry)
}

/// Time from a P-state request until the probe runs at the new frequency.
pub fn measure_core_transition(
    backend: &dyn Backend,
    config: &CoreTransitionConfig,
) -> Result<CoreTransitionResult> {
    let c = config;
    let cpu = c.cpu;
    if c.block_accesses == 0 || !(c.tolerance > 0.0) {
        return Err(Error::Config("block_accesses and tolerance must be positive".into()));
    }
    check_frequency(backend, cpu, c.from_khz)?;
    check_frequency(backend, cpu, c.to_khz)?;
    backend.pin_to_cpu(cpu)?;
    let tsc = backend.tsc_khz();
    let buffer = build_chase(ChasePreset::L1.default_lines(), CACHE_LINE_BYTES, c.seed)?;
    let mut p = Prober::new(backend, cpu, &buffer);
    let settle = us_to_cycles(c.settle_us, tsc);
    let per = c.block_accesses;

    let from_block = calibrate_block(&mut p, c.from_khz, settle, per)?;
    let to_block = calibrate_block(&mut p, c.to_khz, settle, per)?;
    let timeout = us_to_cycles(c.timeout_us, tsc);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut samples = Vec::with_capacity(c.reps);
    let mut undetected = 0;

    for _ in 0..c.reps {
        if crate::interrupt::requested() {
            break;
        }
        backend.set_core_frequency(cpu, c.from_khz)?;
        let deadline = p.now()? + timeout;
        if p.until_block(from_block, c.tolerance, per, deadline)?.is_none() {
            undetected += 1;
            continue;
        }
        if c.trigger == Trigger::Random {
            let wait = rng.random_range(0.0..c.random_wait_us.max(f64::MIN_POSITIVE));
            p.chase_for(us_to_cycles(wait, tsc))?;
        }
        backend.set_core_frequency(cpu, c.to_khz)?;
        let returned = p.now()?;
        match p.until_block(to_block, c.tolerance, per, returned + timeout)? {
            Some(end) => samples.push(end.saturating_sub(returned)),
            None => undetected += 1,
        }
    }

    let us: Vec<f64> = samples.iter().map(|&s| cycles_to_us(s as f64, tsc)).collect();
    let bins = (c.histogram_max_us / c.histogram_bin_us).round().max(1.0) as usize;
    let histogram = if us.is_empty() {
        None
    } else {
        Some(build_histogram_fixed(&us, c.histogram_bin_us, 0.0, bins)?)
    };
    Ok(CoreTransitionResult {
        config: c.clone(),
        tsc_khz: tsc,
        samples_cycles: samples,
        histogram,
        undetected,
        from_block_cycles: from_block,
        to_block_cycles: to_block,
        resolution_us: 2.0 * cycles_to_us(to_block, tsc),
    })
}

// ---- uncore ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncoreForcedConfig {
    pub cpu: Cpu,
    pub low_khz: u64,
    pub high_khz: u64,
    pub reps: usize,
    pub seed: u64,
    /// Estimated update interval of the uncore frequency mechanism.
    pub interval_us: f64,
    pub settle_us: f64,
    /// Time between scheduling the write and its execution.
    pub lead_us: f64,
    pub pre_entries: usize,
    /// Entries averaged on either side of the gap.
    pub window: usize,
    pub chunk: usize,
    pub tolerance: f64,
    /// Overrides the scaled default gap threshold.
    pub threshold_cycles: Option<u64>,
}

impl Default for UncoreForcedConfig {
    fn default() -> Self {
        UncoreForcedConfig {
            cpu: 0,
            low_khz: 1_400_000,
            high_khz: 2_400_000,
            reps: 1000,
            seed: 0,
            interval_us: 1_500.0,
            settle_us: 4_000.0,
            lead_us: 50.0,
            pre_entries: 600,
            window: 512,
            chunk: 4096,
            tolerance: 0.10,
            threshold_cycles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncoreForcedResult {
    pub config: UncoreForcedConfig,
    pub tsc_khz: u64,
    pub expected_before_cycles: f64,
    pub expected_after_cycles: f64,
    pub threshold_cycles: u64,
    pub samples: Vec<TransitionMeasurement>,
    /// Reps in which no gap showed up.
    pub missed: usize,
    /// Duration of each ratio-limit write as seen by the coordinator.
    pub write_overhead_cycles: Vec<u64>,
}

impl UncoreForcedResult {
    pub fn accepted(&self) -> impl Iterator<Item = &TransitionMeasurement> {
        self.samples.iter().filter(|s| s.valid)
    }

    pub fn rejected_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| !s.valid).count() as f64 / self.samples.len() as f64
    }
}

fn llc_buffer(seed: u64) -> Result<ChaseBuffer> {
    build_chase(ChasePreset::Llc.default_lines(), CACHE_LINE_BYTES, seed)
}

fn pin_uncore(backend: &dyn Backend, khz: u64) -> Result<()> {
    let r = uncore_ratio_for_khz(khz);
    set_uncore_range(backend, r, r)
}

/// Steady-state LLC access latency with the uncore pinned to `khz`.
fn calibrate_uncore(p: &mut Prober, khz: u64, settle: u64) -> Result<f64> {
    pin_uncore(p.backend, khz)?;
    p.chase_for(settle)?;
    p.mean_block(2000, 1)
}

struct Located {
    index: usize,
    before: f64,
    after: f64,
    gap: u64,
}

/// Records until a gap with `window` entries on both sides shows up or the
/// clock passes `deadline`.
fn locate_gap(
    p: &mut Prober,
    trace: &mut Vec<TraceEntry>,
    window: usize,
    chunk: usize,
    threshold: u64,
    deadline: u64,
) -> Result<Option<Located>> {
    let mut searched = 0;
    let mut found: Option<usize> = None;
    loop {
        if found.is_none() {
            found = find_gap(trace, searched, threshold).filter(|&i| i >= window);
            searched = trace.len();
        }
        if let Some(i) = found {
            if trace.len() > i + window {
                let after = mean_duration(trace, i + 1, i + 1 + window)?;
                return Ok(Some(Located {
                    index: i,
                    before: mean_duration(trace, i - window, i)?,
                    after,
                    gap: trace[i].duration_cycles.saturating_sub(after.round() as u64),
                }));
            }
        } else if trace.last().is_some_and(|e| e.timestamp_cycles >= deadline) {
            return Ok(None);
        }
        p.record(chunk, 1, trace)?;
    }
}

fn gap_threshold(configured: Option<u64>, baseline: f64) -> u64 {
    configured.unwrap_or_else(|| scaled_threshold(baseline))
}

/// Forced uncore transitions: the ratio limits are switched from `low_khz`
/// to `high_khz` at a random time while an LLC chase runs.
pub fn measure_uncore_forced(
    backend: &dyn Backend,
    config: &UncoreForcedConfig,
) -> Result<UncoreForcedResult> {
    let c = config;
    let cpu = c.cpu;
    if c.window == 0 || c.chunk == 0 {
        return Err(Error::Config("window and chunk must be positive".into()));
    }
    backend.pin_to_cpu(cpu)?;
    let tsc = backend.tsc_khz();
    let buffer = llc_buffer(c.seed)?;
    let mut p = Prober::new(backend, cpu, &buffer);
    let settle = us_to_cycles(c.settle_us, tsc);
    let interval = us_to_cycles(c.interval_us, tsc).max(1);
    let lead = us_to_cycles(c.lead_us, tsc);

    let after_expected = calibrate_uncore(&mut p, c.high_khz, settle)?;
    let before_expected = calibrate_uncore(&mut p, c.low_khz, settle)?;
    let threshold = gap_threshold(c.threshold_cycles, before_expected.max(after_expected));

    let leader = hwif::package_leaders(backend)?
        .into_iter()
        .find(|&l| backend.package_of(l).ok() == backend.package_of(cpu).ok())
        .unwrap_or(cpu);
    let address = backend.registers().uncore_ratio_limit;
    let high = uncore_ratio_for_khz(c.high_khz);

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut samples = Vec::with_capacity(c.reps);
    let mut overheads = Vec::with_capacity(c.reps);
    let mut missed = 0;
    let mut trace = Vec::new();
    for _ in 0..c.reps {
        if crate::interrupt::requested() {
            break;
        }
        pin_uncore(backend, c.low_khz)?;
        p.chase_for(settle)?;
        p.chase_for(rng.random_range(0..2 * interval))?;
        trace.clear();
        p.record(c.pre_entries.max(c.window), 1, &mut trace)?;
        let current = backend.read_msr(leader, address)?;
        let at = p.now()? + lead;
        let ticket = backend.schedule(
            at,
            Action::WriteMsr {
                cpu: leader,
                address,
                value: msr::with_uncore_ratios(current, high, high),
            },
        )?;
        let deadline = at + 4 * interval;
        let located = locate_gap(&mut p, &mut trace, c.window, c.chunk, threshold, deadline)?;
        let outcome = backend.await_action(ticket)?;
        overheads.push(outcome.returned_cycles.saturating_sub(outcome.issued_cycles));
        let Some(g) = located else {
            missed += 1;
            continue;
        };
        let m = TransitionMeasurement {
            t_delay_cycles: trace[g.index].start_cycles().saturating_sub(outcome.returned_cycles),
            t_gap_cycles: g.gap,
            tsc_khz: tsc,
            latency_before_cycles: g.before,
            latency_after_cycles: g.after,
            valid: false,
        };
        samples.push(TransitionMeasurement {
            valid: m.matches(before_expected, after_expected, c.tolerance),
            ..m
        });
    }
    Ok(UncoreForcedResult {
        config: c.clone(),
        tsc_khz: tsc,
        expected_before_cycles: before_expected,
        expected_after_cycles: after_expected,
        threshold_cycles: threshold,
        samples,
        missed,
        write_overhead_cycles: overheads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlLoopConfig {
    pub cpu: Cpu,
    pub reps: usize,
    pub seed: u64,
    /// Uncore frequency the mechanism picks for a core-bound workload.
    pub low_khz: u64,
    /// Uncore frequency the mechanism picks for a memory-bound workload.
    pub high_khz: u64,
    pub interval_us: f64,
    pub settle_us: f64,
    pub train_min_ms: f64,
    pub train_min_laps: u64,
    pub window: usize,
    pub chunk: usize,
    pub tolerance: f64,
    /// A rep gives up when no gap shows within this time.
    pub timeout_ms: f64,
    pub threshold_cycles: Option<u64>,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        ControlLoopConfig {
            cpu: 0,
            reps: 100,
            seed: 0,
            low_khz: 1_400_000,
            high_khz: 2_400_000,
            interval_us: 1_500.0,
            settle_us: 4_000.0,
            train_min_ms: 25.0,
            train_min_laps: 1000,
            window: 512,
            chunk: 4096,
            tolerance: 0.10,
            timeout_ms: 100.0,
            threshold_cycles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLoopResult {
    pub config: ControlLoopConfig,
    pub tsc_khz: u64,
    pub expected_before_cycles: f64,
    pub expected_after_cycles: f64,
    pub threshold_cycles: u64,
    /// `t_delay` runs from the workload switch to the gap and so includes
    /// the control loop.
    pub samples: Vec<TransitionMeasurement>,
    pub missed: usize,
}

impl ControlLoopResult {
    pub fn valid_us(&self) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| s.valid)
            .map(|s| s.t_delay_us())
            .collect()
    }
}

/// Uncore transitions driven by the hardware: an L1-bound phase lets the
/// uncore clock down, then a switch to an LLC-bound chase makes it clock up.
pub fn measure_uncore_controlloop(
    backend: &dyn Backend,
    config: &ControlLoopConfig,
) -> Result<ControlLoopResult> {
    let c = config;
    let cpu = c.cpu;
    if c.window == 0 || c.chunk == 0 {
        return Err(Error::Config("window and chunk must be positive".into()));
    }
    backend.pin_to_cpu(cpu)?;
    let tsc = backend.tsc_khz();
    let llc = llc_buffer(c.seed)?;
    let l1 = build_chase(ChasePreset::L1.default_lines(), CACHE_LINE_BYTES, c.seed ^ 1)?;
    let settle = us_to_cycles(c.settle_us, tsc);
    let interval = us_to_cycles(c.interval_us, tsc).max(1);
    let train = us_to_cycles(c.train_min_ms * 1000.0, tsc);
    let timeout = us_to_cycles(c.timeout_ms * 1000.0, tsc);

    let mut p = Prober::new(backend, cpu, &llc);
    let (before_expected, after_expected) = if c.reps == 0 {
        (0.0, 0.0)
    } else {
        let after = calibrate_uncore(&mut p, c.high_khz, settle)?;
        (calibrate_uncore(&mut p, c.low_khz, settle)?, after)
    };
    let threshold = gap_threshold(c.threshold_cycles, before_expected.max(after_expected));
    if c.reps > 0 {
        let (lo, hi) = backend.uncore_ratio_range();
        set_uncore_range(backend, lo, hi)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut samples = Vec::with_capacity(c.reps);
    let mut missed = 0;
    let mut trace = Vec::new();
    for _ in 0..c.reps {
        if crate::interrupt::requested() {
            break;
        }
        let mut trainer = Prober::new(backend, cpu, &l1);
        let mut laps = 0;
        let t0 = trainer.now()?;
        while laps < c.train_min_laps * l1.num_lines() as u64 || trainer.now()? < t0 + train {
            laps += trainer.chase_for(train / 4 + 1)?;
        }
        trainer.chase_for(rng.random_range(0..2 * interval))?;

        let switched = p.now()?;
        trace.clear();
        match locate_gap(&mut p, &mut trace, c.window, c.chunk, threshold, switched + timeout)? {
            Some(g) => {
                let m = TransitionMeasurement {
                    t_delay_cycles: trace[g.index].start_cycles().saturating_sub(switched),
                    t_gap_cycles: g.gap,
                    tsc_khz: tsc,
                    latency_before_cycles: g.before,
                    latency_after_cycles: g.after,
                    valid: false,
                };
                samples.push(TransitionMeasurement {
                    valid: m.matches(before_expected, after_expected, c.tolerance),
                    ..m
                });
            }
            None => missed += 1,
        }
    }
    if c.reps > 0 && !samples.iter().any(|s| s.valid) {
        return Err(Error::Verification(format!(
            "no rep showed the expected latencies ({before_expected:.1} -> {after_expected:.1} cycles)"
        )));
    }
    Ok(ControlLoopResult {
        config: c.clone(),
        tsc_khz: tsc,
        expected_before_cycles: before_expected,
        expected_after_cycles: after_expected,
        threshold_cycles: threshold,
        samples,
        missed,
    })
}
