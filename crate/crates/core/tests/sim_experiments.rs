use eeprobe::analysis::{median, summarize};
use eeprobe::auxiliary::*;
use eeprobe::avx::{run_high_low, summarize_license, HighLowConfig};
use eeprobe::cstate::*;
use eeprobe::datapower::*;
use eeprobe::hwif::{Backend, FaultOp, SimBackend, SimParameters};
use eeprobe::model::PhaseKind;
use eeprobe::transition::*;

fn quiet_power() -> SimParameters {
    SimParameters {
        power_noise_w: 0.0,
        ..Default::default()
    }
}

#[test]
fn pstate_delay_is_bounded_by_the_update_interval() {
    let sim = SimBackend::with_seed(1);
    let cfg = CoreTransitionConfig {
        from_khz: 1_500_000,
        to_khz: 2_600_000,
        reps: 300,
        seed: 1,
        ..Default::default()
    };
    let r = measure_core_transition(&sim, &cfg).unwrap();
    assert_eq!(r.samples_cycles.len() + r.undetected, 300);
    assert_eq!(r.undetected, 0);
    let us = r.samples_us();
    let s = summarize(&us).unwrap();
    assert!(s.max <= 500.0 + r.resolution_us, "{s:?}");
    assert!(s.min >= 0.0);
    assert!(s.mean > 200.0 && s.mean < 300.0, "{s:?}");
    let h = r.histogram.unwrap();
    assert_eq!(h.n, 300);
    assert!(h.upper_edge() <= 500.0);
}

#[test]
fn immediate_trigger_also_stays_within_one_interval() {
    let sim = SimBackend::with_seed(2);
    let cfg = CoreTransitionConfig {
        trigger: Trigger::Immediate,
        reps: 50,
        ..Default::default()
    };
    let r = measure_core_transition(&sim, &cfg).unwrap();
    assert!(r.samples_us().iter().all(|&d| d <= 500.0 + r.resolution_us));
}

#[test]
fn same_seed_same_transition_samples() {
    let cfg = CoreTransitionConfig {
        reps: 40,
        seed: 9,
        ..Default::default()
    };
    let a = measure_core_transition(&SimBackend::with_seed(9), &cfg).unwrap();
    let b = measure_core_transition(&SimBackend::with_seed(9), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forced_uncore_transitions() {
    let sim = SimBackend::with_seed(3);
    let r = measure_uncore_forced(&sim, &UncoreForcedConfig { reps: 150, seed: 3, ..Default::default() }).unwrap();
    assert_eq!(r.missed, 0);
    assert_eq!(r.expected_before_cycles.round(), 119.0);
    assert_eq!(r.expected_after_cycles.round(), 83.0);
    let accepted: Vec<_> = r.accepted().collect();
    assert!(!accepted.is_empty());
    for s in &accepted {
        assert!((14.5..=16.0).contains(&s.t_gap_us()), "{}", s.t_gap_us());
        assert!((0.0..=1500.0).contains(&s.t_delay_us()), "{}", s.t_delay_us());
    }
    for s in r.samples.iter().filter(|s| !s.valid) {
        assert!(s.t_gap_us() < 14.5);
    }
}

#[test]
fn control_loop_adds_to_the_delay() {
    let sim = SimBackend::with_seed(4);
    let r = measure_uncore_controlloop(&sim, &ControlLoopConfig { reps: 40, seed: 4, ..Default::default() }).unwrap();
    let v = r.valid_us();
    assert!(v.len() >= 20);
    let s = summarize(&v).unwrap();
    assert!(s.min >= 9_800.0 && s.max <= 9_800.0 + 1_500.0 + 50.0, "{s:?}");
}

#[test]
fn c6_wakeups_depend_on_core_frequency() {
    let sim = SimBackend::with_seed(5);
    let base = WakeupConfig { reps: 40, ..Default::default() };
    let samples = sweep_wakeup(&sim, &[CState::C6], &[1_200_000, 3_000_000], &base).unwrap();
    let at = |khz| {
        let v: Vec<f64> = samples.iter().filter(|s| s.core_khz == khz).map(|s| s.latency_us).collect();
        median(&v).unwrap()
    };
    assert!((at(3_000_000) / 33.0 - 1.0).abs() < 0.01);
    assert!((at(1_200_000) / 42.0 - 1.0).abs() < 0.01);
}

#[test]
fn remote_idle_c6_is_slower() {
    let sim = SimBackend::with_seed(6);
    let cfg = WakeupConfig {
        relation: Relation::RemoteIdle,
        reps: 60,
        ..Default::default()
    };
    let s = measure_wakeup(&sim, &cfg).unwrap();
    let inside = s.iter().filter(|w| (46.0..=48.0).contains(&w.latency_us)).count();
    assert!(inside * 10 >= s.len() * 8, "{inside} of {}", s.len());
    assert!(s.iter().all(|w| w.latency_us >= 46.0));
}

#[test]
fn shallow_states_and_baseline() {
    let sim = SimBackend::with_seed(7);
    let c1 = measure_wakeup(&sim, &WakeupConfig { cstate: CState::C1, reps: 20, ..Default::default() }).unwrap();
    let poll = measure_wakeup(&sim, &WakeupConfig { cstate: CState::C0Poll, reps: 20, ..Default::default() }).unwrap();
    let m = |v: &[WakeupSample]| median(&v.iter().map(|s| s.latency_us).collect::<Vec<_>>()).unwrap();
    assert!(m(&poll) < m(&c1));
    assert!(m(&c1) < 10.0);
    assert!(poll.iter().all(|s| !s.flagged));
    let base = wakeup_baseline(&sim, 0, Relation::Local, 20).unwrap();
    assert!(base > 0.0 && base <= m(&poll) + 1e-9);
}

#[test]
fn remote_relations_need_a_second_package() {
    let sim = SimBackend::with_parameters(
        SimParameters {
            packages: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let cfg = WakeupConfig {
        relation: Relation::RemoteIdle,
        reps: 1,
        ..Default::default()
    };
    assert!(measure_wakeup(&sim, &cfg).unwrap_err().is_configuration());
}

#[test]
fn avx_license_accounting_on_two_cpus() {
    let sim = SimBackend::with_seed(8);
    let cfg = HighLowConfig {
        duration_s: 10,
        cpus: vec![0, 1],
        ..Default::default()
    };
    let phases = run_high_low(&sim, &cfg).unwrap();
    assert_eq!(phases.len(), 2 * 5 * 2);
    assert!(phases.iter().all(|p| !p.overrun));
    let s = summarize_license(&phases, cfg.core_khz, cfg.license_khz).unwrap();
    for (_, st) in &s.per_cpu {
        assert!(st.throttle_us_per_transition.min >= 62.0 && st.throttle_us_per_transition.max <= 75.0);
        assert!(st.low_license_us.min >= 555.0 && st.low_license_us.max <= 704.0);
    }
    let low = phases.iter().find(|p| p.record.kind == PhaseKind::Low).unwrap();
    assert_eq!(low.record.cycles_throttled, 0);
}

#[test]
fn avx_rejects_bad_fractions() {
    let sim = SimBackend::with_seed(0);
    let cfg = HighLowConfig { low_fraction_pct: 120, ..Default::default() };
    assert!(run_high_low(&sim, &cfg).unwrap_err().is_configuration());
}

#[test]
fn noiseless_power_fit_is_exact() {
    let sim = SimBackend::with_parameters(quiet_power(), 0).unwrap();
    let cores = sim.cpus().len() as u32;
    let entries = grid_sweep(256, &[2_400_000, 3_000_000], 5.0);
    let points = run_sweep(&sim, &entries, &XorRunConfig::default(), 0).unwrap();
    let fits = fit_power_model(&points, cores).unwrap();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    for (khz, v1, v2) in [(2_400_000, 1.69, 0.46), (3_000_000, 3.13, 0.80)] {
        let f = &fits[&khz];
        assert!(rel(f.coefficient(COEF_V1).unwrap(), v1) <= 1e-9, "{f:?}");
        assert!(rel(f.coefficient(COEF_V2).unwrap(), v2) <= 1e-9, "{f:?}");
    }
    let top = predict_power(&fits[&3_000_000], 512, 512, cores);
    let bottom = predict_power(&fits[&3_000_000], 0, 0, cores);
    assert!((bottom - 362.0).abs() < 1.0, "{bottom}");
    assert!((top - 420.0).abs() < 2.0, "{top}");
}

#[test]
fn xor_point_needs_fifty_samples() {
    let sim = SimBackend::with_seed(0);
    let op = make_operand(1, 512, 0).unwrap();
    let err = run_xor_point(&sim, op, op, 3_000_000, 4.9, &XorRunConfig::default()).unwrap_err();
    assert!(matches!(err, eeprobe::error::Error::TooFewSamples { .. }));
    let p = run_xor_point(&sim, op, op, 3_000_000, 5.0, &XorRunConfig::default()).unwrap();
    assert_eq!(p.samples.len(), 50);
    assert_eq!(trim_samples(&p.samples, TRIM_HEAD, TRIM_TAIL).unwrap().len(), 35);
    assert!(!p.flagged);
    assert!(p.iteration_rate > 0.0);
}

#[test]
fn tstate_duty_shrinks_with_depth() {
    let sim = SimBackend::with_seed(0);
    let r = sweep_tstates(&sim, &TstateConfig::default()).unwrap();
    assert_eq!(r.len(), 16);
    assert!((r[0].effective_duty - 1.0).abs() < 1e-9);
    let implemented: Vec<_> = r.iter().filter(|t| t.implemented && t.level > 0).collect();
    assert!(implemented.windows(2).all(|w| w[1].effective_duty <= w[0].effective_duty));
    assert!(implemented.iter().all(|t| t.effective_duty < t.nominal_duty));
    let deepest = r.iter().find(|t| t.level == 1).unwrap();
    assert!(!deepest.implemented);
    assert_eq!(sim.snapshot().knobs.clock_modulation, vec![0; sim.cpus().len()]);
}

#[test]
fn tstate_restores_the_register_after_a_fault() {
    let sim = SimBackend::with_seed(0);
    sim.inject_fault(FaultOp::ComputeUntil, 1);
    assert!(measure_tstate(&sim, 8, &TstateConfig::default()).is_err());
    assert_eq!(sim.snapshot().knobs.clock_modulation[0], 0);
}

#[test]
fn pperf_counts_stalled_cycles() {
    let sim = SimBackend::with_seed(0);
    let cfg = PperfConfig {
        chase_lines: 1 << 20,
        ..Default::default()
    };
    for w in [PperfWorkload::StallChase, PperfWorkload::Compute] {
        let r = measure_pperf_ratio(&sim, w, &cfg).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-9, "{r:?}");
    }
}
