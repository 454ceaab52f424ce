//! Shared value objects.
//!
//! Every type validates its invariants on construction and on
//! deserialization, so a value that exists is a value that is valid. Durations
//! are kept in TSC cycles next to the `tsc_khz` needed to convert them;
//! microsecond values are always derived.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical CPU number as used by the operating system.
pub type Cpu = usize;

/// Converts TSC cycles to microseconds.
pub fn cycles_to_us(cycles: f64, tsc_khz: u64) -> f64 {
    cycles * 1000.0 / tsc_khz as f64
}

/// Converts microseconds to TSC cycles, rounded to the nearest cycle.
pub fn us_to_cycles(us: f64, tsc_khz: u64) -> u64 {
    (us * tsc_khz as f64 / 1000.0).round().max(0.0) as u64
}

pub fn cycles_to_ns(cycles: u64, tsc_khz: u64) -> u64 {
    ((cycles as u128 * 1_000_000) / tsc_khz as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyDomain {
    Core,
    Uncore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrequencyLevelRepr")]
pub struct FrequencyLevel {
    pub khz: u64,
    pub domain: FrequencyDomain,
}

#[derive(Deserialize)]
struct FrequencyLevelRepr {
    khz: u64,
    domain: FrequencyDomain,
}

impl TryFrom<FrequencyLevelRepr> for FrequencyLevel {
    type Error = Error;
    fn try_from(r: FrequencyLevelRepr) -> Result<Self> {
        FrequencyLevel::new(r.khz, r.domain)
    }
}

impl FrequencyLevel {
    pub fn new(khz: u64, domain: FrequencyDomain) -> Result<Self> {
        if khz == 0 {
            return Err(Error::Invalid("frequency must be positive".into()));
        }
        Ok(FrequencyLevel { khz, domain })
    }

    /// Like [`FrequencyLevel::new`], additionally requiring `khz` to lie in
    /// the inclusive selectable range reported by a backend.
    pub fn within(khz: u64, domain: FrequencyDomain, range: (u64, u64)) -> Result<Self> {
        let level = Self::new(khz, domain)?;
        if khz < range.0 || khz > range.1 {
            return Err(Error::RangeViolation(format!(
                "{khz} kHz outside selectable {:?} range {}..={} kHz",
                domain, range.0, range.1
            )));
        }
        Ok(level)
    }

    pub fn ghz(&self) -> f64 {
        self.khz as f64 / 1e6
    }
}

/// One timed access: the TSC value read after the access and the cycles
/// it took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub timestamp_cycles: u64,
    pub duration_cycles: u64,
}

impl TraceEntry {
    pub fn start_cycles(&self) -> u64 {
        self.timestamp_cycles - self.duration_cycles
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LatencyTraceRepr")]
pub struct LatencyTrace {
    entries: Vec<TraceEntry>,
    tsc_khz: u64,
}

#[derive(Deserialize)]
struct LatencyTraceRepr {
    entries: Vec<TraceEntry>,
    tsc_khz: u64,
}

impl TryFrom<LatencyTraceRepr> for LatencyTrace {
    type Error = Error;
    fn try_from(r: LatencyTraceRepr) -> Result<Self> {
        LatencyTrace::new(r.entries, r.tsc_khz)
    }
}

/// True iff timestamps strictly increase, every duration is positive and
/// the conversion factor is positive.
pub fn validate_trace(entries: &[TraceEntry], tsc_khz: u64) -> bool {
    tsc_khz > 0
        && entries.iter().all(|e| e.duration_cycles > 0)
        && entries
            .windows(2)
            .all(|w| w[0].timestamp_cycles < w[1].timestamp_cycles)
}

impl LatencyTrace {
    pub fn new(entries: Vec<TraceEntry>, tsc_khz: u64) -> Result<Self> {
        if !validate_trace(&entries, tsc_khz) {
            return Err(Error::Invalid(
                "latency trace needs increasing timestamps, positive durations and tsc_khz > 0"
                    .into(),
            ));
        }
        Ok(LatencyTrace { entries, tsc_khz })
    }

    pub fn empty(tsc_khz: u64) -> Result<Self> {
        Self::new(Vec::new(), tsc_khz)
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn tsc_khz(&self) -> u64 {
        self.tsc_khz
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn durations(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.duration_cycles)
    }
}

/// One observed frequency switch of the probe workload.
///
/// `t_delay` runs from the return of the request to the first stalled access,
/// `t_gap` is the stall itself with the post-switch access latency removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMeasurement {
    pub t_delay_cycles: u64,
    pub t_gap_cycles: u64,
    pub tsc_khz: u64,
    pub latency_before_cycles: f64,
    pub latency_after_cycles: f64,
    pub valid: bool,
}

impl TransitionMeasurement {
    pub fn t_delay_us(&self) -> f64 {
        cycles_to_us(self.t_delay_cycles as f64, self.tsc_khz)
    }

    pub fn t_gap_us(&self) -> f64 {
        cycles_to_us(self.t_gap_cycles as f64, self.tsc_khz)
    }

    /// Whether both latencies lie within `tol_fraction` of the expected
    /// before/after values.
    pub fn matches(&self, expected_before: f64, expected_after: f64, tol_fraction: f64) -> bool {
        within(self.latency_before_cycles, expected_before, tol_fraction)
            && within(self.latency_after_cycles, expected_after, tol_fraction)
    }
}

pub(crate) fn within(value: f64, expected: f64, tol_fraction: f64) -> bool {
    value.is_finite() && (value - expected).abs() <= tol_fraction * expected.abs()
}

/// Fixed-width histogram. Bin `i` covers `[origin + i*w, origin + (i+1)*w)`.
/// Samples outside the covered range are clamped into the first or last bin
/// and additionally counted in `overflow`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramRepr")]
pub struct Histogram {
    pub origin: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub n: u64,
    pub overflow: u64,
}

#[derive(Deserialize)]
struct HistogramRepr {
    origin: f64,
    bin_width: f64,
    counts: Vec<u64>,
    n: u64,
    #[serde(default)]
    overflow: u64,
}

impl TryFrom<HistogramRepr> for Histogram {
    type Error = Error;
    fn try_from(r: HistogramRepr) -> Result<Self> {
        let h = Histogram::from_parts(r.origin, r.bin_width, r.counts, r.overflow)?;
        if h.n != r.n {
            return Err(Error::Invalid(format!("histogram n {} differs from the count sum {}", r.n, h.n)));
        }
        Ok(h)
    }
}

impl Histogram {
    pub fn from_parts(origin: f64, bin_width: f64, counts: Vec<u64>, overflow: u64) -> Result<Self> {
        if !(bin_width > 0.0) || !bin_width.is_finite() {
            return Err(Error::Invalid("histogram bin_width must be > 0".into()));
        }
        let n = counts.iter().sum();
        if overflow > n {
            return Err(Error::Invalid("histogram overflow exceeds n".into()));
        }
        Ok(Histogram {
            origin,
            bin_width,
            counts,
            n,
            overflow,
        })
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.origin + (i as f64 + 0.5) * self.bin_width
    }

    pub fn upper_edge(&self) -> f64 {
        self.origin + self.counts.len() as f64 * self.bin_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSourceKind {
    Rapl,
    ExternalFile,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PowerSampleRepr")]
pub struct PowerSample {
    pub t_ns: u64,
    pub watts: f64,
    pub source: PowerSourceKind,
}

#[derive(Deserialize)]
struct PowerSampleRepr {
    t_ns: u64,
    watts: f64,
    source: PowerSourceKind,
}

impl TryFrom<PowerSampleRepr> for PowerSample {
    type Error = Error;
    fn try_from(r: PowerSampleRepr) -> Result<Self> {
        PowerSample::new(r.t_ns, r.watts, r.source)
    }
}

impl PowerSample {
    pub fn new(t_ns: u64, watts: f64, source: PowerSourceKind) -> Result<Self> {
        if !(watts >= 0.0) || !watts.is_finite() {
            return Err(Error::Invalid(format!("power sample {watts} W is negative")));
        }
        Ok(PowerSample {
            t_ns,
            watts,
            source,
        })
    }
}

/// Checks that all samples of one run come from one source.
pub fn single_source(samples: &[PowerSample]) -> bool {
    samples.windows(2).all(|w| w[0].source == w[1].source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    High,
    Low,
}

impl std::fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseKind::High => "High",
            PhaseKind::Low => "Low",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LicensePhaseRecordRepr")]
pub struct LicensePhaseRecord {
    pub kind: PhaseKind,
    pub cycles_total: u64,
    pub cycles_throttled: u64,
    pub cycles_license2: u64,
    pub wall_ns: u64,
}

#[derive(Deserialize)]
struct LicensePhaseRecordRepr {
    kind: PhaseKind,
    cycles_total: u64,
    cycles_throttled: u64,
    cycles_license2: u64,
    wall_ns: u64,
}

impl TryFrom<LicensePhaseRecordRepr> for LicensePhaseRecord {
    type Error = Error;
    fn try_from(r: LicensePhaseRecordRepr) -> Result<Self> {
        LicensePhaseRecord::new(
            r.kind,
            r.cycles_total,
            r.cycles_throttled,
            r.cycles_license2,
            r.wall_ns,
        )
    }
}

impl LicensePhaseRecord {
    pub fn new(
        kind: PhaseKind,
        cycles_total: u64,
        cycles_throttled: u64,
        cycles_license2: u64,
        wall_ns: u64,
    ) -> Result<Self> {
        if cycles_throttled > cycles_total || cycles_license2 > cycles_total {
            return Err(Error::Invalid(format!(
                "phase counters exceed total cycles ({cycles_throttled}/{cycles_license2} > {cycles_total})"
            )));
        }
        Ok(LicensePhaseRecord {
            kind,
            cycles_total,
            cycles_throttled,
            cycles_license2,
            wall_ns,
        })
    }

    pub fn throttle_fraction(&self) -> f64 {
        ratio(self.cycles_throttled, self.cycles_total)
    }

    pub fn license_fraction(&self) -> f64 {
        ratio(self.cycles_license2, self.cycles_total)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Linear model `intercept + sum(coef[k] * x_k)`.
///
/// For the data-dependent power model the intercept is in W and the
/// coefficients are in mW per unit of the named predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegressionFitRepr")]
pub struct RegressionFit {
    pub intercept_w: f64,
    pub coef: BTreeMap<String, f64>,
    pub rss: f64,
    pub n: usize,
}

#[derive(Deserialize)]
struct RegressionFitRepr {
    intercept_w: f64,
    coef: BTreeMap<String, f64>,
    rss: f64,
    n: usize,
}

impl TryFrom<RegressionFitRepr> for RegressionFit {
    type Error = Error;
    fn try_from(r: RegressionFitRepr) -> Result<Self> {
        RegressionFit::new(r.intercept_w, r.coef, r.rss, r.n)
    }
}

impl RegressionFit {
    pub fn new(intercept_w: f64, coef: BTreeMap<String, f64>, rss: f64, n: usize) -> Result<Self> {
        if n < coef.len() + 1 {
            return Err(Error::Invalid(format!(
                "regression with {} predictors needs at least {} observations, got {n}",
                coef.len(),
                coef.len() + 1
            )));
        }
        if !(rss >= 0.0) {
            return Err(Error::Invalid("negative residual sum of squares".into()));
        }
        Ok(RegressionFit {
            intercept_w,
            coef,
            rss,
            n,
        })
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coef.get(name).copied()
    }
}
