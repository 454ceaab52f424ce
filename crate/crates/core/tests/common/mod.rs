#![allow(dead_code)]

use eeprobe::model::{LatencyTrace, TraceEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Successor table from a direct Sattolo shuffle.
pub fn reference_successors(num_lines: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next: Vec<u32> = (0..num_lines as u32).collect();
    for i in (1..num_lines).rev() {
        let j = rng.random_range(0..i);
        next.swap(i, j);
    }
    next.into_iter().map(|s| s as usize).collect()
}

/// Solves `(XᵀX) b = Xᵀy` by Gauss-Jordan elimination with partial pivoting.
/// `rows` already contain the intercept column.
pub fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = rows[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, &yi) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * yi;
        }
    }
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

/// Constant-latency trace with one entry replaced by `gap` cycles.
pub fn trace_with_gap(len: usize, base: u64, gap_at: Option<(usize, u64)>, tsc_khz: u64) -> LatencyTrace {
    let mut t = 1_000_000;
    let entries = (0..len)
        .map(|i| {
            let d = match gap_at {
                Some((at, g)) if at == i => g,
                _ => base,
            };
            t += d;
            TraceEntry {
                timestamp_cycles: t,
                duration_cycles: d,
            }
        })
        .collect();
    LatencyTrace::new(entries, tsc_khz).unwrap()
}
