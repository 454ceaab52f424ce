//! Command-line front end: argument parsing, backend selection, running one
//! experiment with every touched setting restored, and writing the reports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{chi_square_uniform, median, summarize};
use crate::auxiliary::{
    measure_pperf_ratio, measure_tstate, sweep_tstates, PperfConfig, PperfWorkload, TstateConfig,
};
use crate::avx::{run_high_low, summarize_license, HighLowConfig};
use crate::chase::{average_access_cycles, build_chase, run_chase, ChasePreset, CACHE_LINE_BYTES};
use crate::cstate::{sweep_wakeup, CState, Relation, WakeupConfig, WakeupSample};
use crate::datapower::{
    fit_power_model, grid_sweep, parse_sweep, point_power, run_sweep, SweepEntry, XorRunConfig,
};
use crate::error::{Error, Result};
use crate::hwif::{
    parse_cpu_list, with_restored_knobs, Backend, BackendConfig, BackendKind, HardwareBackend,
    PlatformRegisters, PowerSource, SimBackend, SimParameters,
};
use crate::interrupt;
use crate::model::{Cpu, Histogram, TransitionMeasurement};
use crate::report::{self, ExperimentReport};
use crate::transition::{
    measure_core_transition, measure_uncore_controlloop, measure_uncore_forced, ControlLoopConfig,
    CoreTransitionConfig, Trigger, UncoreForcedConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EXPERIMENT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Measures frequency transitions, idle wake-ups, AVX licenses and
/// data-dependent power on x86 servers.
#[derive(Debug, Parser)]
#[command(name = "eeprobe", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// hw or sim.
    #[arg(long, global = true, env = "EEPROBE_BACKEND")]
    pub backend: Option<String>,
    /// MSR device path template; `{cpu}` is replaced by the CPU number.
    #[arg(long, global = true, env = "EEPROBE_MSR_PATH")]
    pub msr_path: Option<String>,
    /// rapl, simulated or file:PATH.
    #[arg(long, global = true)]
    pub power_source: Option<String>,
    #[arg(long, global = true, default_value = "eeprobe-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// CPU list such as `0-17,36`.
    #[arg(long, global = true)]
    pub cpus: Option<String>,
    /// Print the report JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Run even though the frequency governor is not userspace; it is
    /// switched for the run and restored afterwards.
    #[arg(long, global = true)]
    pub force: bool,
    /// Platform file written by `calibrate`.
    #[arg(long, global = true)]
    pub platform: Option<PathBuf>,
    /// JSON file overriding simulation parameters.
    #[arg(long, global = true)]
    pub sim_params: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Core frequency transition delay.
    Pstate {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value_t = 2_400_000)]
        from: u64,
        #[arg(long, default_value_t = 3_000_000)]
        to: u64,
        /// random or immediate.
        #[arg(long, default_value = "random")]
        trigger: Trigger,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
    },
    /// Uncore transition forced through the ratio limit register.
    UfsForced {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value_t = 1_400_000)]
        low: u64,
        #[arg(long, default_value_t = 2_400_000)]
        high: u64,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
    },
    /// Uncore reaction to a switch from core-bound to memory-bound work.
    UfsLoop {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value_t = 1_400_000)]
        low: u64,
        #[arg(long, default_value_t = 2_400_000)]
        high: u64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Minimum passes over the L1 chase before each switch.
        #[arg(long, default_value_t = 1000)]
        train_laps: u64,
    },
    /// Wake-up latencies from idle states.
    Cstate {
        #[arg(long, value_delimiter = ',', default_value = "C1,C1E,C6")]
        cstates: Vec<CState>,
        /// Core frequencies in kHz; four spread over the available range by default.
        #[arg(long, value_delimiter = ',')]
        freqs: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "local")]
        relations: Vec<Relation>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        callee: Cpu,
        #[arg(long, default_value_t = 1000.0)]
        idle_ms: f64,
    },
    /// Alternating AVX-512 and scalar phases on all selected CPUs.
    Avx {
        /// Share of each period spent in the Low phase, in percent.
        #[arg(short = 'l', long, default_value_t = 50)]
        low_pct: u32,
        /// Period in µs.
        #[arg(short = 'p', long, default_value_t = 2_000_000)]
        period_us: u64,
        /// Run time in s.
        #[arg(short = 't', long, default_value_t = 30)]
        duration_s: u64,
        #[arg(long)]
        memory: bool,
        #[arg(long, default_value_t = 3_000_000)]
        core_khz: u64,
        #[arg(long, default_value_t = 2_700_000)]
        license_khz: u64,
    },
    /// Package power against operand popcounts of an XOR kernel.
    Datapower {
        /// JSON list of `[popcnt_v1, popcnt_v2, khz, duration_s]`.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Popcount step of the default grid.
        #[arg(long, default_value_t = 128)]
        step: u32,
        #[arg(long, value_delimiter = ',', default_value = "2400000,3000000")]
        freqs: Vec<u64>,
        #[arg(long, default_value_t = 5.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 100.0)]
        interval_ms: f64,
    },
    /// Effective duty cycle under clock modulation.
    Tstate {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        /// One level; every encodable level when omitted.
        #[arg(long)]
        level: Option<u32>,
        #[arg(long, default_value_t = 1.0)]
        duration_s: f64,
        #[arg(long)]
        core_khz: Option<u64>,
    },
    /// PPERF to APERF ratio of a workload.
    Pperf {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value = "stall_chase")]
        workload: PperfWorkload,
        #[arg(long, default_value_t = 1.0)]
        duration_s: f64,
        /// Chase footprint in cache lines.
        #[arg(long)]
        lines: Option<usize>,
    },
    /// Access latency of every chase preset.
    ChaseCalibrate {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value_t = 100_000)]
        accesses: usize,
    },
    /// Writes a platform file for later runs.
    Calibrate {
        #[arg(long, default_value_t = 0)]
        cpu: Cpu,
        #[arg(long, default_value_t = 100_000)]
        accesses: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pstate { .. } => "pstate",
            Command::UfsForced { .. } => "ufs-forced",
            Command::UfsLoop { .. } => "ufs-loop",
            Command::Cstate { .. } => "cstate",
            Command::Avx { .. } => "avx",
            Command::Datapower { .. } => "datapower",
            Command::Tstate { .. } => "tstate",
            Command::Pperf { .. } => "pperf",
            Command::ChaseCalibrate { .. } => "chase-calibrate",
            Command::Calibrate { .. } => "calibrate",
        }
    }

    /// `(msr, cpufreq, perf)` access the experiment needs on hardware.
    fn needs(&self) -> (bool, bool, bool) {
        match self {
            Command::Pstate { .. } | Command::Cstate { .. } => (false, true, false),
            Command::UfsForced { .. } | Command::UfsLoop { .. } => (true, true, false),
            Command::Avx { .. } => (true, true, true),
            Command::Datapower { .. } | Command::Tstate { .. } | Command::Pperf { .. } => {
                (true, true, false)
            }
            Command::ChaseCalibrate { .. } | Command::Calibrate { .. } => (false, false, false),
        }
    }
}

/// Chase footprints and baselines measured by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Platform {
    pub backend: BackendKind,
    pub tsc_khz: u64,
    pub timer_overhead_cycles: u64,
    pub cpus: Vec<Cpu>,
    pub packages: Vec<usize>,
    pub core_frequencies_khz: Vec<u64>,
    pub uncore_ratio_range: (u32, u32),
    pub idle_states: Vec<String>,
    pub registers: PlatformRegisters,
    pub chase_lines: BTreeMap<ChasePreset, usize>,
    /// Mean timed entry per preset, timer overhead included.
    pub chase_baseline_cycles: BTreeMap<ChasePreset, f64>,
}

impl Platform {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("platform file {}: {e}", path.display())))
    }
}

/// Everything that determines a run's results. Its hash goes into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Pstate(CoreTransitionConfig),
    UfsForced(UncoreForcedConfig),
    UfsLoop(ControlLoopConfig),
    Cstate {
        cstates: Vec<CState>,
        frequencies: Vec<u64>,
        relations: Vec<Relation>,
        base: WakeupConfig,
    },
    Avx(HighLowConfig),
    Datapower {
        entries: Vec<SweepEntry>,
        run: XorRunConfig,
        seed: u64,
    },
    Tstate {
        levels: Option<u32>,
        config: TstateConfig,
    },
    Pperf {
        workload: PperfWorkload,
        config: PperfConfig,
    },
    ChaseCalibrate {
        cpu: Cpu,
        accesses: usize,
        lines: BTreeMap<ChasePreset, usize>,
        seed: u64,
    },
    Calibrate {
        cpu: Cpu,
        accesses: usize,
        lines: BTreeMap<ChasePreset, usize>,
        seed: u64,
    },
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Pstate(_) => "pstate",
            ExperimentConfig::UfsForced(_) => "ufs-forced",
            ExperimentConfig::UfsLoop(_) => "ufs-loop",
            ExperimentConfig::Cstate { .. } => "cstate",
            ExperimentConfig::Avx(_) => "avx",
            ExperimentConfig::Datapower { .. } => "datapower",
            ExperimentConfig::Tstate { .. } => "tstate",
            ExperimentConfig::Pperf { .. } => "pperf",
            ExperimentConfig::ChaseCalibrate { .. } => "chase-calibrate",
            ExperimentConfig::Calibrate { .. } => "calibrate",
        }
    }

    fn cpus_used(&self) -> Vec<Cpu> {
        match self {
            ExperimentConfig::Pstate(c) => vec![c.cpu],
            ExperimentConfig::UfsForced(c) => vec![c.cpu],
            ExperimentConfig::UfsLoop(c) => vec![c.cpu],
            ExperimentConfig::Cstate { base, .. } => vec![base.callee],
            ExperimentConfig::Avx(c) => c.cpus.clone(),
            ExperimentConfig::Datapower { run, .. } => run.cpus.clone(),
            ExperimentConfig::Tstate { config, .. } => vec![config.cpu],
            ExperimentConfig::Pperf { config, .. } => vec![config.cpu],
            ExperimentConfig::ChaseCalibrate { cpu, .. } | ExperimentConfig::Calibrate { cpu, .. } => {
                vec![*cpu]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub backend: BackendKind,
    pub seed: u64,
    /// Switch the governor to userspace instead of refusing to run.
    pub force: bool,
}

/// A file produced by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
    /// Append to an existing file, keeping its CSV header.
    pub append: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: ExperimentReport,
    pub files: Vec<OutputFile>,
}

fn csv_text<T: Serialize>(rows: &[T], header: bool) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

fn file(name: String, contents: String) -> OutputFile {
    OutputFile {
        name,
        contents,
        append: false,
    }
}

fn stats_json(values: &[f64]) -> Value {
    summarize(values).map_or(Value::Null, |s| json!(s))
}

fn default_lines(platform: Option<&Platform>) -> BTreeMap<ChasePreset, usize> {
    ChasePreset::ALL
        .iter()
        .map(|&p| {
            let lines = platform
                .and_then(|pl| pl.chase_lines.get(&p).copied())
                .unwrap_or_else(|| p.default_lines());
            (p, lines)
        })
        .collect()
}

/// Four frequencies spread over the selectable range, ends included.
fn spread_frequencies(available: &[u64]) -> Vec<u64> {
    let mut f = available.to_vec();
    f.sort_unstable();
    f.dedup();
    if f.len() <= 4 {
        return f;
    }
    let mut out: Vec<u64> = (0..4).map(|i| f[(i * (f.len() - 1) + 1) / 3]).collect();
    out.dedup();
    out
}

/// Translates parsed arguments into a run description.
pub fn build_run_config(
    global: &GlobalArgs,
    command: &Command,
    backend: &dyn Backend,
    platform: Option<&Platform>,
) -> Result<RunConfig> {
    let seed = global.seed;
    let cpus = match &global.cpus {
        Some(s) => parse_cpu_list(s).map_err(|e| Error::Config(e.to_string()))?,
        None => Vec::new(),
    };
    let experiment = match command.clone() {
        Command::Pstate {
            cpu,
            from,
            to,
            trigger,
            reps,
        } => ExperimentConfig::Pstate(CoreTransitionConfig {
            cpu,
            from_khz: from,
            to_khz: to,
            trigger,
            reps,
            seed,
            ..Default::default()
        }),
        Command::UfsForced { cpu, low, high, reps } => ExperimentConfig::UfsForced(UncoreForcedConfig {
            cpu,
            low_khz: low,
            high_khz: high,
            reps,
            seed,
            ..Default::default()
        }),
        Command::UfsLoop { cpu, low, high, reps, train_laps } => ExperimentConfig::UfsLoop(ControlLoopConfig {
            cpu,
            low_khz: low,
            high_khz: high,
            reps,
            train_min_laps: train_laps,
            seed,
            ..Default::default()
        }),
        Command::Cstate {
            cstates,
            freqs,
            relations,
            reps,
            callee,
            idle_ms,
        } => {
            let frequencies = if freqs.is_empty() {
                spread_frequencies(&backend.available_frequencies(callee)?)
            } else {
                freqs
            };
            ExperimentConfig::Cstate {
                cstates,
                frequencies,
                relations,
                base: WakeupConfig {
                    reps,
                    callee,
                    idle_ms,
                    ..Default::default()
                },
            }
        }
        Command::Avx {
            low_pct,
            period_us,
            duration_s,
            memory,
            core_khz,
            license_khz,
        } => ExperimentConfig::Avx(HighLowConfig {
            period_us,
            low_fraction_pct: low_pct,
            duration_s,
            cpus: cpus.clone(),
            core_khz,
            license_khz,
            memory,
        }),
        Command::Datapower {
            sweep,
            step,
            freqs,
            duration_s,
            interval_ms,
        } => {
            let entries = match sweep {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::Config(format!("sweep file {}: {e}", path.display())))?;
                    parse_sweep(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => grid_sweep(step, &freqs, duration_s),
            };
            ExperimentConfig::Datapower {
                entries,
                run: XorRunConfig {
                    cpus: cpus.clone(),
                    sample_interval_ms: interval_ms,
                    ..Default::default()
                },
                seed,
            }
        }
        Command::Tstate {
            cpu,
            level,
            duration_s,
            core_khz,
        } => ExperimentConfig::Tstate {
            levels: level,
            config: TstateConfig {
                cpu,
                duration_s,
                core_khz,
            },
        },
        Command::Pperf {
            cpu,
            workload,
            duration_s,
            lines,
        } => ExperimentConfig::Pperf {
            workload,
            config: PperfConfig {
                cpu,
                duration_s,
                chase_lines: lines.unwrap_or(default_lines(platform)[&ChasePreset::Dram]),
                seed,
            },
        },
        Command::ChaseCalibrate { cpu, accesses } => ExperimentConfig::ChaseCalibrate {
            cpu,
            accesses,
            lines: default_lines(platform),
            seed,
        },
        Command::Calibrate { cpu, accesses } => ExperimentConfig::Calibrate {
            cpu,
            accesses,
            lines: default_lines(platform),
            seed,
        },
    };
    let known = backend.cpus();
    for cpu in experiment.cpus_used().into_iter().chain(cpus.iter().copied()) {
        if !known.contains(&cpu) {
            return Err(Error::InvalidCpu(cpu));
        }
    }
    Ok(RunConfig {
        experiment,
        backend: backend.kind(),
        seed,
        force: global.force,
    })
}

fn check_governors(backend: &dyn Backend, cpus: &[Cpu], force: bool) -> Result<()> {
    for &cpu in cpus {
        let g = backend.governor(cpu)?;
        if g == "userspace" {
            continue;
        }
        if !force {
            return Err(Error::GovernorUnavailable {
                cpu,
                reason: format!("governor is {g:?}; select userspace or pass --force"),
            });
        }
        backend.set_governor(cpu, "userspace")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DelayRow {
    rep: usize,
    delay_us: f64,
}

#[derive(Serialize)]
struct TransitionRow {
    rep: usize,
    t_delay_us: f64,
    t_gap_us: f64,
    latency_before_cycles: f64,
    latency_after_cycles: f64,
    valid: bool,
}

fn transition_rows(samples: &[TransitionMeasurement]) -> Vec<TransitionRow> {
    samples
        .iter()
        .enumerate()
        .map(|(rep, s)| TransitionRow {
            rep,
            t_delay_us: s.t_delay_us(),
            t_gap_us: s.t_gap_us(),
            latency_before_cycles: s.latency_before_cycles,
            latency_after_cycles: s.latency_after_cycles,
            valid: s.valid,
        })
        .collect()
}

fn histogram_file(name: &str, hist: Option<&Histogram>, header: &str) -> Option<OutputFile> {
    hist.map(|h| file(format!("{name}_hist.dat"), report::histogram_gnuplot(h, header)))
}

#[derive(Serialize)]
struct WakeRow {
    cstate: CState,
    relation: Relation,
    core_khz: u64,
    latency_us: f64,
    flagged: bool,
}

#[derive(Serialize)]
struct PhaseRow {
    cpu: Cpu,
    phase_index: u64,
    kind: crate::model::PhaseKind,
    cycles_total: u64,
    cycles_throttled: u64,
    cycles_license2: u64,
    wall_ns: u64,
    overrun: bool,
}

#[derive(Serialize)]
struct PointRow {
    point_id: usize,
    popcnt_v1: u32,
    popcnt_v2: u32,
    core_khz: u64,
    mean_w: f64,
    stdev_w: f64,
    n_trimmed: usize,
    flagged: bool,
}

/// Shared by the T-state and PPERF runs, which append to one file.
#[derive(Serialize)]
struct AuxRow {
    experiment: &'static str,
    level: Option<u32>,
    nominal_duty: Option<f64>,
    effective_duty: Option<f64>,
    workload: Option<PperfWorkload>,
    ratio: Option<f64>,
}

const AUX_CSV: &str = "aux.csv";

fn chase_baselines(
    backend: &dyn Backend,
    cpu: Cpu,
    accesses: usize,
    lines: &BTreeMap<ChasePreset, usize>,
    seed: u64,
) -> Result<BTreeMap<ChasePreset, f64>> {
    backend.pin_to_cpu(cpu)?;
    let mut out = BTreeMap::new();
    for (&preset, &n) in lines {
        let buffer = build_chase(n, CACHE_LINE_BYTES, seed)?;
        let trace = run_chase(&buffer, accesses.max(1), backend, cpu)?;
        out.insert(preset, average_access_cycles(&trace, 0, trace.len())?);
    }
    Ok(out)
}

fn calibrate(backend: &dyn Backend, cpu: Cpu, accesses: usize, lines: &BTreeMap<ChasePreset, usize>, seed: u64) -> Result<Platform> {
    let cpus = backend.cpus();
    let packages = cpus.iter().map(|&c| backend.package_of(c)).collect::<Result<_>>()?;
    let mut freqs = backend.available_frequencies(cpu)?;
    freqs.sort_unstable();
    let idle_states = backend
        .idle_states(cpu)
        .map(|v| v.into_iter().map(|s| s.name).collect())
        .unwrap_or_default();
    Ok(Platform {
        backend: backend.kind(),
        tsc_khz: backend.tsc_khz(),
        timer_overhead_cycles: backend.timer_overhead_cycles(),
        cpus,
        packages,
        core_frequencies_khz: freqs,
        uncore_ratio_range: backend.uncore_ratio_range(),
        idle_states,
        registers: backend.registers().clone(),
        chase_lines: lines.clone(),
        chase_baseline_cycles: chase_baselines(backend, cpu, accesses, lines, seed)?,
    })
}

fn run_experiment(backend: &dyn Backend, run: &RunConfig, report: &mut ExperimentReport) -> Result<Vec<OutputFile>> {
    let name = run.experiment.name();
    let mut files = Vec::new();
    match &run.experiment {
        ExperimentConfig::Pstate(c) => {
            let r = measure_core_transition(backend, c)?;
            let us = r.samples_us();
            let rows: Vec<DelayRow> = us.iter().enumerate().map(|(rep, &delay_us)| DelayRow { rep, delay_us }).collect();
            report.summary = json!({
                "delay_us": stats_json(&us),
                "undetected": r.undetected,
                "resolution_us": r.resolution_us,
                "chi_square_uniform": r.histogram.as_ref().map(chi_square_uniform),
            });
            files.push(file(format!("{name}_samples.csv"), csv_text(&rows, true)?));
            files.extend(histogram_file(name, r.histogram.as_ref(), "delay_us count"));
            report.results = serde_json::to_value(&r)?;
        }
        ExperimentConfig::UfsForced(c) => {
            let r = measure_uncore_forced(backend, c)?;
            let gaps: Vec<f64> = r.accepted().map(|s| s.t_gap_us()).collect();
            let delays: Vec<f64> = r.accepted().map(|s| s.t_delay_us()).collect();
            report.summary = json!({
                "t_gap_us": stats_json(&gaps),
                "t_delay_us": stats_json(&delays),
                "missed": r.missed,
                "rejected_fraction": if r.samples.is_empty() { Value::Null } else { json!(r.rejected_fraction()) },
            });
            files.push(file(format!("{name}_samples.csv"), csv_text(&transition_rows(&r.samples), true)?));
            let hist = crate::analysis::build_histogram(&delays, 50.0, 0.0).ok();
            files.extend(histogram_file(name, hist.as_ref(), "t_delay_us count"));
            report.results = serde_json::to_value(&r)?;
        }
        ExperimentConfig::UfsLoop(c) => {
            let r = measure_uncore_controlloop(backend, c)?;
            let valid = r.valid_us();
            report.summary = json!({
                "t_delay_us": stats_json(&valid),
                "missed": r.missed,
                "invalid": r.samples.len() - valid.len(),
            });
            files.push(file(format!("{name}_samples.csv"), csv_text(&transition_rows(&r.samples), true)?));
            let hist = crate::analysis::build_histogram(&valid, 250.0, 0.0).ok();
            files.extend(histogram_file(name, hist.as_ref(), "t_delay_us count"));
            report.results = serde_json::to_value(&r)?;
        }
        ExperimentConfig::Cstate {
            cstates,
            frequencies,
            relations,
            base,
        } => {
            let mut samples: Vec<WakeupSample> = Vec::new();
            for &relation in relations {
                samples.extend(sweep_wakeup(
                    backend,
                    cstates,
                    frequencies,
                    &WakeupConfig { relation, ..base.clone() },
                )?);
            }
            let mut cells: BTreeMap<(CState, Relation, u64), Vec<&WakeupSample>> = BTreeMap::new();
            for s in &samples {
                cells.entry((s.cstate, s.relation, s.core_khz)).or_default().push(s);
            }
            let summary: Vec<Value> = cells
                .iter()
                .map(|(&(cstate, relation, core_khz), v)| {
                    let lat: Vec<f64> = v.iter().map(|s| s.latency_us).collect();
                    json!({
                        "cstate": cstate,
                        "relation": relation,
                        "core_khz": core_khz,
                        "n": v.len(),
                        "median_us": median(&lat).ok(),
                        "flagged": v.iter().filter(|s| s.flagged).count(),
                    })
                })
                .collect();
            report.summary = json!({ "cells": summary });
            let rows: Vec<WakeRow> = samples
                .iter()
                .map(|s| WakeRow {
                    cstate: s.cstate,
                    relation: s.relation,
                    core_khz: s.core_khz,
                    latency_us: s.latency_us,
                    flagged: s.flagged,
                })
                .collect();
            files.push(file(format!("{name}_samples.csv"), csv_text(&rows, true)?));
            report.results = serde_json::to_value(&samples)?;
        }
        ExperimentConfig::Avx(c) => {
            let phases = run_high_low(backend, c)?;
            let summary = summarize_license(&phases, c.core_khz, c.license_khz)?;
            report.summary = json!({
                "license": summary,
                "phases": phases.len(),
                "overruns": phases.iter().filter(|p| p.overrun).count(),
            });
            let rows: Vec<PhaseRow> = phases
                .iter()
                .map(|p| PhaseRow {
                    cpu: p.cpu,
                    phase_index: p.phase_index,
                    kind: p.record.kind,
                    cycles_total: p.record.cycles_total,
                    cycles_throttled: p.record.cycles_throttled,
                    cycles_license2: p.record.cycles_license2,
                    wall_ns: p.record.wall_ns,
                    overrun: p.overrun,
                })
                .collect();
            files.push(file(format!("{name}_phases.csv"), csv_text(&rows, true)?));
            report.results = serde_json::to_value(&phases)?;
        }
        ExperimentConfig::Datapower { entries, run: xor, seed } => {
            let points = run_sweep(backend, entries, xor, *seed)?;
            let cores = if xor.cpus.is_empty() {
                backend.cpus().len()
            } else {
                xor.cpus.len()
            } as u32;
            let mut rows = Vec::with_capacity(points.len());
            for (point_id, p) in points.iter().enumerate() {
                let (mean_w, stdev_w, n_trimmed) = point_power(p)?;
                rows.push(PointRow {
                    point_id,
                    popcnt_v1: p.popcnt_v1,
                    popcnt_v2: p.popcnt_v2,
                    core_khz: p.core_khz,
                    mean_w,
                    stdev_w,
                    n_trimmed,
                    flagged: p.flagged,
                });
            }
            let fits = if points.is_empty() {
                Value::Null
            } else {
                json!(fit_power_model(&points, cores)?)
            };
            report.summary = json!({
                "fits_mw_per_bit": fits,
                "active_cores": cores,
                "xor_unroll": crate::hwif::XOR_UNROLL,
                "flagged_points": points.iter().filter(|p| p.flagged).count(),
            });
            files.push(file(format!("{name}_points.csv"), csv_text(&rows, true)?));
            report.results = serde_json::to_value(&points)?;
        }
        ExperimentConfig::Tstate { levels, config } => {
            let results = match levels {
                Some(l) => vec![measure_tstate(backend, *l, config)?],
                None => sweep_tstates(backend, config)?,
            };
            let rows: Vec<AuxRow> = results
                .iter()
                .map(|r| AuxRow {
                    experiment: "tstate",
                    level: Some(r.level),
                    nominal_duty: Some(r.nominal_duty),
                    effective_duty: Some(r.effective_duty),
                    workload: None,
                    ratio: None,
                })
                .collect();
            report.summary = json!({
                "unimplemented_levels": results.iter().filter(|r| !r.implemented).map(|r| r.level).collect::<Vec<_>>(),
            });
            files.push(aux_rows(&rows)?);
            report.results = serde_json::to_value(&results)?;
        }
        ExperimentConfig::Pperf { workload, config } => {
            let r = measure_pperf_ratio(backend, *workload, config)?;
            report.summary = json!({ "ratio": r.ratio });
            files.push(aux_rows(&[AuxRow {
                experiment: "pperf",
                level: None,
                nominal_duty: None,
                effective_duty: None,
                workload: Some(r.workload),
                ratio: Some(r.ratio),
            }])?);
            report.results = serde_json::to_value(r)?;
        }
        ExperimentConfig::ChaseCalibrate { cpu, accesses, lines, seed } => {
            let b = chase_baselines(backend, *cpu, *accesses, lines, *seed)?;
            report.summary = json!({ "access_cycles": b });
            report.results = json!({ "lines": lines, "access_cycles": b });
        }
        ExperimentConfig::Calibrate { cpu, accesses, lines, seed } => {
            let p = calibrate(backend, *cpu, *accesses, lines, *seed)?;
            let mut text = serde_json::to_string_pretty(&p)?;
            text.push('\n');
            files.push(file("platform.json".into(), text));
            report.summary = json!({ "tsc_khz": p.tsc_khz, "access_cycles": p.chase_baseline_cycles });
            report.results = serde_json::to_value(&p)?;
        }
    }
    Ok(files)
}

fn aux_rows(rows: &[AuxRow]) -> Result<OutputFile> {
    Ok(OutputFile {
        name: AUX_CSV.into(),
        contents: csv_text(rows, true)?,
        append: true,
    })
}

/// Runs one experiment and restores every setting it touched, also when it
/// fails.
pub fn execute(backend: &dyn Backend, run: &RunConfig) -> Result<Outcome> {
    let mut report = ExperimentReport::new(run.experiment.name(), run.backend, run.seed, run, backend.tsc_khz())?;
    let files = with_restored_knobs(backend, || {
        let mut cpus = run.experiment.cpus_used();
        if cpus.is_empty() {
            cpus = backend.cpus();
        }
        check_governors(backend, &cpus, run.force)?;
        run_experiment(backend, run, &mut report)
    })?;
    report.truncated = interrupt::requested();
    Ok(Outcome { report, files })
}

/// Writes the report and every output file into `dir`.
pub fn write_outcome(dir: &Path, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    report::ensure_dir(dir)?;
    let mut written = vec![outcome.report.write(dir)?];
    for f in &outcome.files {
        let path = dir.join(&f.name);
        if f.append && std::fs::metadata(&path).is_ok_and(|m| m.len() > 0) {
            let body: String = f.contents.lines().skip(1).map(|l| format!("{l}\n")).collect();
            use std::io::Write;
            let mut h = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            h.write_all(body.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
        } else {
            report::write_gnuplot(&path, &f.contents)?;
        }
        written.push(path);
    }
    Ok(written)
}

fn backend_config(global: &GlobalArgs, platform: Option<&Platform>) -> Result<BackendConfig> {
    let mut config = BackendConfig::simulation(global.seed);
    config.apply_overrides(global.backend.as_deref(), global.msr_path.as_deref())?;
    if let Some(src) = &global.power_source {
        config.power_source = src.parse::<PowerSource>()?;
    }
    if let Some(path) = &global.sim_params {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("simulation parameters {}: {e}", path.display())))?;
        config.sim = serde_json::from_str::<SimParameters>(&text)
            .map_err(|e| Error::Config(format!("simulation parameters {}: {e}", path.display())))?;
    }
    if let Some(p) = platform {
        config.registers = p.registers.clone();
        config.uncore_ratio_range = p.uncore_ratio_range;
    }
    Ok(config)
}

fn run_cli(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    let platform = g.platform.as_deref().map(Platform::load).transpose()?;
    let config = backend_config(g, platform.as_ref())?;
    report::ensure_dir(&g.out).map_err(|e| Error::Config(format!("output directory: {e}")))?;
    let outcome = match config.kind {
        BackendKind::Simulation => {
            let backend = SimBackend::new(config)?;
            let run = build_run_config(g, &cli.command, &backend, platform.as_ref())?;
            execute(&backend, &run)?
        }
        BackendKind::Hardware => {
            let backend = HardwareBackend::open(config)?;
            let run = build_run_config(g, &cli.command, &backend, platform.as_ref())?;
            let (msr, cpufreq, perf) = cli.command.needs();
            let mut cpus = run.experiment.cpus_used();
            if cpus.is_empty() {
                cpus = backend.cpus();
            }
            backend.preflight(&cpus, msr, cpufreq, perf)?;
            execute(&backend, &run)?
        }
    };
    Ok(outcome)
}

/// Parses `args`, runs the experiment and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    interrupt::install_sigint_handler();
    match run_cli(&cli) {
        Ok(outcome) => match write_outcome(&cli.global.out, &outcome) {
            Ok(paths) => {
                if cli.global.json {
                    print!("{}", outcome.report.to_json().unwrap_or_default());
                } else {
                    for p in paths {
                        println!("wrote {}", p.display());
                    }
                }
                if outcome.report.truncated {
                    eprintln!("eeprobe: interrupted; partial results written");
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("eeprobe: {e}");
                EXIT_EXPERIMENT
            }
        },
        Err(e) => {
            eprintln!("eeprobe: {e}");
            if e.is_configuration() {
                EXIT_CONFIG
            } else {
                EXIT_EXPERIMENT
            }
        }
    }
}
