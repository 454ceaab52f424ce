//! Acceptance run against the simulation backend. Prints one line per
//! criterion and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use clap::Parser;
use eeprobe::analysis::{chi_square_uniform, least_squares, median};
use eeprobe::avx::{run_high_low, summarize_license, HighLowConfig};
use eeprobe::chase::build_chase;
use eeprobe::cli::{build_run_config, execute, Cli, RunConfig};
use eeprobe::cstate::*;
use eeprobe::datapower::*;
use eeprobe::hwif::msr::encode_uncore_ratio_limit;
use eeprobe::model::{LatencyTrace, TraceEntry};
use eeprobe::hwif::{Backend, FaultOp, SimBackend, SimParameters};
use eeprobe::transition::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn chase_cycles() -> Outcome {
    let t = Instant::now();
    for n in 1..=1024usize {
        for seed in 0..10u64 {
            let b = ok(build_chase(n, 64, seed))?;
            let mut seen = vec![false; n];
            let mut s = 0;
            for _ in 0..n {
                ensure!(!seen[s], "n={n} seed={seed}: slot {s} visited twice");
                seen[s] = true;
                s = b.next(s);
            }
            ensure!(s == 0, "n={n} seed={seed}: walk did not close");
        }
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(10), "took {el:?}");
    Ok(format!("10240 chases, {el:.2?}"))
}

fn gap_detector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = SimParameters::default();
    let quantum = params.timer_overhead_cycles;
    let mut worst = 0u64;
    for i in 0..1000 {
        let len = 2000;
        let at = rng.random_range(0..len);
        let gap = rng.random_range(25_000..=100_000u64);
        let mut ts = 1_000_000;
        let entries = (0..len)
            .map(|j| {
                let d = if j == at { gap } else { 143 + rng.random_range(0..quantum) };
                ts += d;
                TraceEntry { timestamp_cycles: ts, duration_cycles: d }
            })
            .collect();
        let t = ok(LatencyTrace::new(entries, params.tsc_khz))?;
        let e = detect_transition(&t, DEFAULT_THRESHOLD_CYCLES).ok_or(format!("trace {i}: no gap"))?;
        ensure!(e.index == at, "trace {i}: index {} != {at}", e.index);
        let err = e.gap_cycles.abs_diff(gap);
        ensure!(err <= quantum, "trace {i}: size off by {err}");
        worst = worst.max(err);
    }
    Ok(format!("1000/1000 indices exact, worst size error {worst} cycles"))
}

fn pstate_distribution() -> Outcome {
    let sim = SimBackend::with_seed(3);
    let cfg = CoreTransitionConfig {
        from_khz: 1_500_000,
        to_khz: 2_600_000,
        reps: 10_000,
        seed: 3,
        ..Default::default()
    };
    let r = ok(measure_core_transition(&sim, &cfg))?;
    ensure!(r.samples_cycles.len() == 10_000, "{} detected", r.samples_cycles.len());
    let us = r.samples_us();
    let max = us.iter().copied().fold(f64::MIN, f64::max);
    ensure!(max <= 500.0 + r.resolution_us, "max {max} µs");
    ensure!(us.iter().all(|&d| d >= 0.0), "negative delay");
    let h = r.histogram.ok_or("no histogram")?;
    let chi2 = chi_square_uniform(&h);
    let df = (h.counts.len() - 1) as f64;
    let p = 1.0 - ok(ChiSquared::new(df))?.cdf(chi2);
    ensure!(p > 0.01, "chi2 {chi2:.1} on {df} df, p {p:.4}");
    Ok(format!("max {max:.2} µs, chi2 {chi2:.1} on {df} df, p {p:.3}"))
}

fn uncore_pipeline() -> Outcome {
    let sim = SimBackend::with_seed(4);
    let params = sim.parameters();
    ensure!((params.ufs_artifact_rate - 0.20).abs() < 1e-12, "artifact rate {}", params.ufs_artifact_rate);
    let r = ok(measure_uncore_forced(&sim, &UncoreForcedConfig { reps: 1000, seed: 4, ..Default::default() }))?;
    ensure!(r.missed == 0, "{} missed", r.missed);
    let (accepted, rejected) =
        filter_invalid(&r.samples, r.expected_before_cycles, r.expected_after_cycles, r.config.tolerance);
    for s in &accepted {
        ensure!((14.5..=16.0).contains(&s.t_gap_us()), "accepted gap {} µs", s.t_gap_us());
        ensure!((0.0..=1500.0).contains(&s.t_delay_us()), "accepted delay {} µs", s.t_delay_us());
    }
    let frac = rejected.len() as f64 / r.samples.len() as f64;
    ensure!((frac - 0.20).abs() <= 0.03, "rejected {frac:.3}");
    let delay = accepted.iter().map(|s| s.t_delay_us()).sum::<f64>() / accepted.len() as f64;

    let sim = SimBackend::with_seed(5);
    let cl = ok(measure_uncore_controlloop(&sim, &ControlLoopConfig { reps: 200, seed: 5, ..Default::default() }))?;
    let v = cl.valid_us();
    ensure!(!v.is_empty(), "no valid control-loop samples");
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let want = params.ufs_controlloop_ms * 1000.0 + delay;
    let rel = (mean - want).abs() / want;
    ensure!(rel <= 0.02, "control loop {mean:.0} µs vs {want:.0} µs");
    Ok(format!(
        "rejected {:.1} %, mean t_delay {delay:.0} µs, control loop {mean:.0} µs ({:.2} % off)",
        frac * 100.0,
        rel * 100.0
    ))
}

fn cstate_sweep() -> Outcome {
    let sim = SimBackend::with_seed(6);
    let params = sim.parameters();
    let states = [CState::C1, CState::C1E, CState::C6];
    let freqs = [1_200_000, 1_800_000, 2_400_000, 3_000_000];
    let base = WakeupConfig { reps: 100, ..Default::default() };
    let samples = ok(sweep_wakeup(&sim, &states, &freqs, &base))?;
    let cell = |c: CState, khz: u64| -> Vec<f64> {
        samples.iter().filter(|s| s.cstate == c && s.core_khz == khz).map(|s| s.latency_us).collect()
    };
    for c in states {
        for f in freqs {
            let n = cell(c, f).len();
            ensure!(n == 100, "{c:?} at {f} kHz has {n} samples");
        }
    }
    let nominal = ok(median(&cell(CState::C6, 3_000_000)))?;
    let minf = ok(median(&cell(CState::C6, 1_200_000)))?;
    ensure!((nominal / 33.0 - 1.0).abs() <= 0.01, "C6 nominal median {nominal}");
    ensure!((minf / 42.0 - 1.0).abs() <= 0.01, "C6 min-frequency median {minf}");

    let remote = ok(measure_wakeup(
        &sim,
        &WakeupConfig { relation: Relation::RemoteIdle, reps: 100, ..Default::default() },
    ))?;
    let q = 0.1;
    let tail = params.c6_remote_idle_tail_us;
    let mut tails = 0;
    for s in &remote {
        let body = (46.0 - q..=48.0 + q).contains(&s.latency_us);
        let in_tail = (s.latency_us - tail).abs() <= q;
        ensure!(body || in_tail, "remote-idle sample {} µs", s.latency_us);
        tails += in_tail as usize;
    }
    Ok(format!("1200 samples, C6 medians {nominal:.2}/{minf:.2} µs, {tails} remote tail samples"))
}

fn avx_license() -> Outcome {
    let sim = SimBackend::with_seed(7);
    let t = Instant::now();
    let cfg = HighLowConfig { duration_s: 30, cpus: sim.cpus(), ..Default::default() };
    let phases = ok(run_high_low(&sim, &cfg))?;
    let s = ok(summarize_license(&phases, cfg.core_khz, cfg.license_khz))?;
    ensure!(s.per_cpu.len() == 36, "{} threads", s.per_cpu.len());
    for (cpu, st) in &s.per_cpu {
        let th = &st.throttle_us_per_transition;
        let li = &st.low_license_us;
        ensure!(th.min >= 62.0 && th.max <= 75.0, "cpu {cpu}: throttle [{}, {}] µs", th.min, th.max);
        ensure!(li.min >= 555.0 && li.max <= 704.0, "cpu {cpu}: license [{}, {}] µs", li.min, li.max);
    }
    let worst = HighLowConfig {
        period_us: 1000,
        low_fraction_pct: 80,
        duration_s: 30,
        cpus: sim.cpus(),
        ..Default::default()
    };
    let phases = ok(run_high_low(&sim, &worst))?;
    let w = ok(summarize_license(&phases, worst.core_khz, worst.license_khz))?;
    for (cpu, st) in &w.per_cpu {
        let (thr, lic) = (st.throttle_fraction_high_total, st.license_fraction_low_total);
        ensure!(thr > 0.30, "cpu {cpu}: throttle fraction {thr}");
        ensure!(lic > 0.85, "cpu {cpu}: license fraction {lic}");
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(60), "took {el:?}");
    Ok(format!(
        "throttle {:.1}-{:.1} µs, license {:.0}-{:.0} µs; worst case {:.2}/{:.2}; {el:.2?}",
        s.all.throttle_us_per_transition.min,
        s.all.throttle_us_per_transition.max,
        s.all.low_license_us.min,
        s.all.low_license_us.max,
        w.all.throttle_fraction_high_total,
        w.all.license_fraction_low_total
    ))
}

fn power_model() -> Outcome {
    let want = [(2_400_000u64, 1.69, 0.46), (3_000_000, 3.13, 0.80)];
    let freqs: Vec<u64> = want.iter().map(|w| w.0).collect();
    let entries = grid_sweep(128, &freqs, 5.0);
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let sim = SimBackend::with_seed(seed);
        let cores = sim.cpus().len() as u32;
        let points = ok(run_sweep(&sim, &entries, &XorRunConfig::default(), seed))?;
        for p in &points {
            ensure!(p.samples.len() == 50, "{} samples", p.samples.len());
        }
        let fits = ok(fit_power_model(&points, cores))?;
        for (khz, v1, v2) in want {
            let f = &fits[&khz];
            let e1 = rel(f.coefficient(COEF_V1).ok_or("missing")?, v1);
            let e2 = rel(f.coefficient(COEF_V2).ok_or("missing")?, v2);
            ensure!(e1 <= 0.05 && e2 <= 0.05, "seed {seed} {khz} kHz: {f:?}");
            worst = worst.max(e1).max(e2);
        }
    }
    let quiet = SimParameters { power_noise_w: 0.0, ..Default::default() };
    let sim = ok(SimBackend::with_parameters(quiet, 0))?;
    let points = ok(run_sweep(&sim, &entries, &XorRunConfig::default(), 0))?;
    let fits = ok(fit_power_model(&points, sim.cpus().len() as u32))?;
    let mut exact = 0.0f64;
    for (khz, v1, v2) in want {
        let f = &fits[&khz];
        exact = exact.max(rel(f.coefficient(COEF_V1).ok_or("missing")?, v1));
        exact = exact.max(rel(f.coefficient(COEF_V2).ok_or("missing")?, v2));
    }
    ensure!(exact <= 1e-9, "noiseless error {exact:e}");
    let samples: Vec<_> = points[0].samples.clone();
    let trimmed = ok(trim_samples(&samples, TRIM_HEAD, TRIM_TAIL))?;
    ensure!(samples.len() == 50 && trimmed.len() == 35, "trim {} -> {}", samples.len(), trimmed.len());
    Ok(format!("20 seeds, worst error {:.2} %, noiseless {exact:.1e}", worst * 100.0))
}

fn regression_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = rng.random_range(1..=4);
        let n = rng.random_range(k + 10..=80);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let truth: Vec<f64> = (0..=k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| truth[0] + r.iter().zip(&truth[1..]).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.1..0.1))
            .collect();
        let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let fit = ok(least_squares(&refs, &x, &y))?;
        let rows: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
        let beta = common::normal_equations(&rows, &y);
        let mut got = vec![fit.intercept_w];
        got.extend(refs.iter().map(|n| fit.coefficient(n).unwrap()));
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let diff = got.iter().zip(&beta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let e = diff / norm;
        ensure!(e <= 1e-9, "system {i}: relative error {e:e}");
        worst = worst.max(e);
    }
    Ok(format!("100 systems, worst relative error {worst:.1e}"))
}

const EXPERIMENTS: [(&[&str], FaultOp); 10] = [
    (&["pstate", "--reps", "30"], FaultOp::Chase),
    (&["ufs-forced", "--reps", "30"], FaultOp::Chase),
    (&["ufs-loop", "--reps", "5"], FaultOp::Chase),
    (&["cstate", "--reps", "5"], FaultOp::WakeProbe),
    (&["avx", "-t", "4", "--cpus", "0-3"], FaultOp::LicensePhase),
    (&["datapower", "--step", "512", "--freqs", "3000000"], FaultOp::SamplePower),
    (&["tstate"], FaultOp::ComputeUntil),
    (&["pperf", "--workload", "compute"], FaultOp::ReadCounter),
    (&["chase-calibrate", "--accesses", "2000"], FaultOp::Chase),
    (&["calibrate", "--accesses", "2000"], FaultOp::Chase),
];

fn run_config(sim: &SimBackend, args: &[&str]) -> Result<RunConfig, String> {
    let cli = ok(Cli::try_parse_from(std::iter::once("eeprobe").chain(args.iter().copied())))?;
    ok(build_run_config(&cli.global, &cli.command, sim, None))
}

/// Moves a few knobs off their defaults so restoration is observable.
fn perturb(sim: &SimBackend) -> Result<(), String> {
    ok(sim.set_core_frequency(0, 2_000_000))?;
    ok(sim.set_core_frequency(20, 1_300_000))?;
    let reg = sim.registers().uncore_ratio_limit;
    ok(sim.write_msr(0, reg, encode_uncore_ratio_limit(13, 22)))?;
    ok(sim.set_idle_state_disabled(1, 2, true))
}

fn state_hygiene() -> Outcome {
    let mut checked = 0;
    for (args, fault) in EXPERIMENTS {
        for after in [None, Some(0), Some(2)] {
            let sim = SimBackend::with_seed(9);
            perturb(&sim)?;
            let run = run_config(&sim, args)?;
            let before = sim.snapshot();
            if let Some(n) = after {
                sim.inject_fault(fault, n);
            }
            let result = execute(&sim, &run);
            match (after, &result) {
                (None, Err(e)) => return Err(format!("{args:?}: {e}")),
                (Some(n), Ok(_)) => return Err(format!("{args:?}: fault {fault:?} after {n} not hit")),
                _ => {}
            }
            let after_snap = sim.snapshot();
            ensure!(after_snap.knobs == before.knobs, "{args:?} fault {after:?}: knobs changed");
            if after.is_none() {
                ensure!(after_snap.clocks != before.clocks, "{args:?}: clocks did not move");
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} runs, knobs restored on success and error paths"))
}

fn determinism() -> Outcome {
    for (args, _) in EXPERIMENTS {
        let mut args: Vec<&str> = args.to_vec();
        args.extend(["--seed", "17"]);
        let report = || -> Result<String, String> {
            let sim = SimBackend::with_seed(17);
            let run = run_config(&sim, &args)?;
            let out = ok(execute(&sim, &run))?;
            ok(out.report.to_json())
        };
        let (a, b) = (report()?, report()?);
        ensure!(a == b, "{args:?}: reports differ");
    }
    Ok(format!("{} experiments byte-identical", EXPERIMENTS.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("chase cycle property", chase_cycles),
        ("gap detector fidelity", gap_detector),
        ("P-state distribution", pstate_distribution),
        ("uncore pipeline", uncore_pipeline),
        ("C-state sweep", cstate_sweep),
        ("AVX license accounting", avx_license),
        ("power model recovery", power_model),
        ("regression oracle", regression_oracle),
        ("state hygiene", state_hygiene),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let el = t.elapsed();
        match r {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg} [{el:.1?}]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg} [{el:.1?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
