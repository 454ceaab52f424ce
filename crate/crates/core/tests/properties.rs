mod common;

use std::collections::BTreeMap;

use eeprobe::analysis::{build_histogram, least_squares};
use eeprobe::chase::build_chase;
use eeprobe::datapower::*;
use eeprobe::hwif::{Backend, CounterEvent, SimBackend, SimParameters};
use eeprobe::model::{PhaseKind, TransitionMeasurement};
use eeprobe::transition::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chase_is_one_cycle(n in 1usize..3000, seed in any::<u64>()) {
        let b = build_chase(n, 64, seed).unwrap();
        let mut seen = vec![false; n];
        let mut s = 0;
        for _ in 0..n {
            prop_assert!(!seen[s]);
            seen[s] = true;
            s = b.next(s);
        }
        prop_assert_eq!(s, 0);
    }

    #[test]
    fn advance_matches_walking(n in 1usize..500, seed in any::<u64>(), start in 0usize..500, hops in 0u64..2000) {
        let b = build_chase(n, 128, seed).unwrap();
        let start = start % n;
        let mut s = start;
        for _ in 0..hops {
            s = b.next(s);
        }
        prop_assert_eq!(b.advance(start, hops), s);
    }

    #[test]
    fn single_gap_is_recovered(len in 2usize..2000, at in 0usize..2000, gap in 20_001u64..200_000, base in 1u64..20_000) {
        let at = at % len;
        let t = common::trace_with_gap(len, base, Some((at, gap)), 3_000_000);
        let e = detect_transition(&t, DEFAULT_THRESHOLD_CYCLES).unwrap();
        prop_assert_eq!(e.index, at);
        prop_assert_eq!(e.gap_cycles, gap);
    }

    #[test]
    fn no_gap_below_threshold(len in 0usize..500, base in 1u64..=20_000) {
        let t = common::trace_with_gap(len, base, None, 3_000_000);
        prop_assert!(detect_transition(&t, DEFAULT_THRESHOLD_CYCLES).is_none());
    }

    #[test]
    fn filtering_partitions(lat in prop::collection::vec((50.0f64..200.0, 50.0f64..200.0), 0..100), tol in 0.0f64..0.5) {
        let samples: Vec<TransitionMeasurement> = lat
            .iter()
            .map(|&(b, a)| TransitionMeasurement {
                t_delay_cycles: 1,
                t_gap_cycles: 1,
                tsc_khz: 1,
                latency_before_cycles: b,
                latency_after_cycles: a,
                valid: false,
            })
            .collect();
        let (acc, rej) = filter_invalid(&samples, 119.0, 83.0, tol);
        prop_assert_eq!(acc.len() + rej.len(), samples.len());
        prop_assert!(acc.iter().all(|s| s.valid && s.matches(119.0, 83.0, tol)));
        prop_assert!(rej.iter().all(|s| !s.valid && !s.matches(119.0, 83.0, tol)));
    }

    #[test]
    fn trimming_drops_fifteen(n in 16usize..500) {
        let v: Vec<usize> = (0..n).collect();
        let t = trim_samples(&v, TRIM_HEAD, TRIM_TAIL).unwrap();
        prop_assert_eq!(t.len(), n - 15);
        prop_assert_eq!(t[0], 10);
    }

    #[test]
    fn operand_popcount(p in 0u32..=512, seed in any::<u64>()) {
        let a = make_operand(p, 512, seed).unwrap();
        prop_assert_eq!(a.popcount(), p);
        prop_assert_eq!(a, make_operand(p, 512, seed).unwrap());
    }

    #[test]
    fn histogram_counts_every_sample(v in prop::collection::vec(-1e4f64..1e4, 1..300), w in 0.1f64..100.0) {
        let h = build_histogram(&v, w, 0.0).unwrap();
        prop_assert_eq!(h.n as usize, v.len());
        prop_assert_eq!(h.counts.iter().sum::<u64>() as usize, v.len());
    }

    #[test]
    fn least_squares_agrees_with_normal_equations(seed in any::<u64>(), k in 1usize..5, extra in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = k + 1 + extra;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let names: Vec<String> = (0..k).map(|i| format!("x{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let fit = least_squares(&refs, &x, &y).unwrap();
        let rows: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
        let beta = common::normal_equations(&rows, &y);
        let scale = beta.iter().map(|b| b.abs()).fold(1.0, f64::max);
        prop_assert!((fit.intercept_w - beta[0]).abs() <= 1e-9 * scale);
        for (i, name) in refs.iter().enumerate() {
            prop_assert!((fit.coefficient(name).unwrap() - beta[i + 1]).abs() <= 1e-9 * scale);
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Freq(usize),
    Compute(u64),
    License(bool, u64),
    Sleep(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..19).prop_map(Op::Freq),
        (1u64..3_000_000).prop_map(Op::Compute),
        (any::<bool>(), 1u64..6_000_000).prop_map(|(h, c)| Op::License(h, c)),
        (1u64..3_000_000).prop_map(Op::Sleep),
    ]
}

fn apply(sim: &SimBackend, ops: &[Op]) -> Vec<[u64; 5]> {
    let cpu = 0;
    let freqs = sim.available_frequencies(cpu).unwrap();
    let events = [CounterEvent::Aperf, CounterEvent::Pperf, CounterEvent::Throttle, CounterEvent::License2];
    let mut out = Vec::new();
    for o in ops {
        let now = sim.now_cycles(cpu).unwrap();
        match *o {
            Op::Freq(i) => sim.set_core_frequency(cpu, freqs[i % freqs.len()]).unwrap(),
            Op::Compute(c) => {
                sim.compute_until(cpu, now + c).unwrap();
            }
            Op::License(h, c) => {
                let kind = if h { PhaseKind::High } else { PhaseKind::Low };
                sim.license_phase_until(cpu, kind, now + c, false).unwrap();
            }
            Op::Sleep(c) => sim.sleep_until(cpu, now + c).unwrap(),
        }
        let mut row = [sim.now_cycles(cpu).unwrap(); 5];
        for (i, e) in events.iter().enumerate() {
            row[i + 1] = sim.read_counter(cpu, *e).unwrap();
        }
        out.push(row);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sim_counters_never_decrease(seed in any::<u64>(), ops in prop::collection::vec(op(), 1..40)) {
        let rows = apply(&SimBackend::with_seed(seed), &ops);
        for w in rows.windows(2) {
            for i in 0..5 {
                prop_assert!(w[1][i] >= w[0][i], "column {} went from {} to {}", i, w[0][i], w[1][i]);
            }
        }
    }

    #[test]
    fn sim_is_deterministic(seed in any::<u64>(), ops in prop::collection::vec(op(), 1..40)) {
        prop_assert_eq!(apply(&SimBackend::with_seed(seed), &ops), apply(&SimBackend::with_seed(seed), &ops));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noiseless_fit_recovers_any_coefficients(c1 in 0.1f64..5.0, c2 in 0.0f64..2.0) {
        let khz = 3_000_000;
        let params = SimParameters {
            power_noise_w: 0.0,
            power_coef_v1_mw: BTreeMap::from([(khz, c1)]),
            power_coef_v2_mw: BTreeMap::from([(khz, c2)]),
            ..Default::default()
        };
        let sim = SimBackend::with_parameters(params, 0).unwrap();
        let cores = sim.cpus().len() as u32;
        let points = run_sweep(&sim, &grid_sweep(256, &[khz], 5.0), &XorRunConfig::default(), 0).unwrap();
        let fit = &fit_power_model(&points, cores).unwrap()[&khz];
        prop_assert!((fit.coefficient(COEF_V1).unwrap() - c1).abs() <= 1e-9 * c1);
        prop_assert!((fit.coefficient(COEF_V2).unwrap() - c2).abs() <= 1e-9 * c1.max(c2));
    }
}
