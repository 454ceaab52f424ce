//! Values checked against independent reference computations and then
//! frozen.

mod common;

use eeprobe::analysis::least_squares;
use eeprobe::chase::build_chase;
use eeprobe::datapower::make_operand;
use eeprobe::hwif::SimBackend;
use eeprobe::transition::*;

#[test]
fn chase_matches_reference_shuffle() {
    for n in [1, 2, 3, 8, 100, 1000] {
        for seed in 0..20 {
            let b = build_chase(n, 64, seed).unwrap();
            let next = common::reference_successors(n, seed);
            assert!((0..n).all(|s| b.next(s) == next[s]), "n={n} seed={seed}");
        }
    }
}

#[test]
fn eight_line_chase_seed_7() {
    let b = build_chase(8, 64, 7).unwrap();
    let mut order = vec![0];
    let mut s = b.next(0);
    while s != 0 {
        order.push(s);
        s = b.next(s);
    }
    assert_eq!(order, vec![0, 2, 1, 3, 4, 5, 6, 7]);
}

#[test]
fn gap_at_37() {
    let t = common::trace_with_gap(100, 143, Some((37, 45_000)), 3_000_000);
    let e = detect_transition(&t, DEFAULT_THRESHOLD_CYCLES).unwrap();
    assert_eq!((e.index, e.gap_cycles), (37, 45_000));
    assert!((e.gap_us - 15.0).abs() < 1e-12);
}

#[test]
fn operands_with_256_bits() {
    let a = make_operand(256, 512, 1).unwrap();
    let b = make_operand(256, 512, 2).unwrap();
    for op in [a, b] {
        let bits: u32 = op.words().iter().map(|w| (0..64).filter(|i| w >> i & 1 == 1).count() as u32).sum();
        assert_eq!(bits, 256);
    }
    assert!(a.to_hex().starts_with("ef162bedaefd38f5"));
    assert!(b.to_hex().starts_with("d11bb61dac01642f"));
}

#[test]
fn regression_matches_normal_equations() {
    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, r)| 1.5 + 2.0 * r[0] - 0.5 * r[1] + ((i % 3) as f64 - 1.0) * 0.1).collect();
    let fit = least_squares(&["a", "b"], &x, &y).unwrap();
    let rows: Vec<Vec<f64>> = x.iter().map(|r| vec![1.0, r[0], r[1]]).collect();
    let beta = common::normal_equations(&rows, &y);
    assert!((fit.intercept_w - beta[0]).abs() < 1e-10);
    assert!((fit.coefficient("a").unwrap() - beta[1]).abs() < 1e-10);
    assert!((fit.coefficient("b").unwrap() - beta[2]).abs() < 1e-10);
}

#[test]
fn artifact_rejections_seed_11() {
    let sim = SimBackend::with_seed(11);
    let r = measure_uncore_forced(&sim, &UncoreForcedConfig { reps: 200, seed: 11, ..Default::default() }).unwrap();
    let short = r.samples.iter().filter(|s| s.t_gap_us() < 14.5).count();
    let invalid = r.samples.iter().filter(|s| !s.valid).count();
    assert_eq!(short, invalid);
    assert_eq!(invalid, 31);
    assert!((r.rejected_fraction() - 0.155).abs() < 1e-12);
}
