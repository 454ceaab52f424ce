//! Statistics shared by the experiments: histograms, summary statistics and
//! linear least squares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Histogram, RegressionFit};

/// Builds a histogram whose bins are aligned to the grid
/// `origin + k * bin_width` and cover exactly the bins from the one holding
/// the smallest sample to the one holding the largest.
pub fn build_histogram(samples: &[f64], bin_width: f64, origin: f64) -> Result<Histogram> {
    check_width(bin_width)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let index = |x: f64| ((x - origin) / bin_width).floor() as i64;
    let lo = samples.iter().map(|&x| index(x)).min().unwrap();
    let hi = samples.iter().map(|&x| index(x)).max().unwrap();
    let mut counts = vec![0u64; (hi - lo + 1) as usize];
    for &x in samples {
        counts[(index(x) - lo) as usize] += 1;
    }
    Histogram::from_parts(origin + lo as f64 * bin_width, bin_width, counts, 0)
}

/// Builds a histogram with a fixed number of bins starting at `origin`.
/// Samples below the first or beyond the last bin are clamped into it and
/// counted in `overflow`.
pub fn build_histogram_fixed(
    samples: &[f64],
    bin_width: f64,
    origin: f64,
    bins: usize,
) -> Result<Histogram> {
    check_width(bin_width)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0u64; bins];
    let mut overflow = 0;
    for &x in samples {
        let i = ((x - origin) / bin_width).floor();
        let clamped = i.clamp(0.0, (bins - 1) as f64);
        if clamped != i {
            overflow += 1;
        }
        counts[clamped as usize] += 1;
    }
    Histogram::from_parts(origin, bin_width, counts, overflow)
}

fn check_width(bin_width: f64) -> Result<()> {
    if bin_width > 0.0 && bin_width.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("bin width {bin_width} must be > 0")))
    }
}

/// Pearson chi-square statistic of a histogram against equal expected
/// counts in every bin.
pub fn chi_square_uniform(hist: &Histogram) -> f64 {
    let expected = hist.n as f64 / hist.counts.len() as f64;
    hist.counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub stdev: f64,
    pub min: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Summary statistics with nearest-rank percentiles and the sample (n-1)
/// standard deviation. A single sample has stdev 0.
pub fn summarize(samples: &[f64]) -> Result<SummaryStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let stdev = if n > 1 {
        (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SummaryStats {
        n,
        mean,
        stdev,
        min: sorted[0],
        p50: nearest_rank(&sorted, 50.0),
        p95: nearest_rank(&sorted, 95.0),
        max: sorted[n - 1],
    })
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn median(samples: &[f64]) -> Result<f64> {
    summarize(samples).map(|s| s.p50)
}

/// Dense row-major matrix, just big enough for regression design matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged design matrix".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) * v[c]).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c) * v[r]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub beta: Vec<f64>,
    pub rss: f64,
}

/// Solves `min ||X b - y||` by Householder QR on unit-norm columns.
pub fn solve_least_squares(x: &Matrix, y: &[f64]) -> Result<LeastSquares> {
    let (m, n) = (x.rows(), x.cols());
    if y.len() != m {
        return Err(Error::Invalid(format!(
            "design matrix has {m} rows but response has {} entries",
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("design matrix has no columns".into()));
    }
    if m < n {
        return Err(Error::RankDeficient { rank: m, cols: n });
    }

    let mut scale = vec![0.0; n];
    let mut a = x.clone();
    for c in 0..n {
        let norm = (0..m).map(|r| a.get(r, c).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient { rank: n - 1, cols: n });
        }
        scale[c] = norm;
        for r in 0..m {
            a.set(r, c, a.get(r, c) / norm);
        }
    }
    let mut qty = y.to_vec();

    for k in 0..n {
        let norm = (k..m).map(|r| a.get(r, k).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::RankDeficient { rank: k, cols: n });
        }
        let alpha = if a.get(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|r| a.get(r, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in k..n {
                let dot: f64 = (k..m).map(|r| v[r - k] * a.get(r, c)).sum();
                let f = 2.0 * dot / vnorm2;
                for r in k..m {
                    a.set(r, c, a.get(r, c) - f * v[r - k]);
                }
            }
            let dot: f64 = (k..m).map(|r| v[r - k] * qty[r]).sum();
            let f = 2.0 * dot / vnorm2;
            for r in k..m {
                qty[r] -= f * v[r - k];
            }
        }
    }

    let mut beta = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a.get(k, c) * beta[c]).sum();
        beta[k] = (qty[k] - s) / a.get(k, k);
    }
    for (b, s) in beta.iter_mut().zip(&scale) {
        *b /= s;
    }
    let fitted = x.mul_vec(&beta);
    let rss = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(LeastSquares { beta, rss })
}

/// Fits `y = intercept + sum(coef_k * x_k)` over the named predictors.
/// `predictors[i]` holds the predictor values of observation `i`.
pub fn least_squares(
    names: &[&str],
    predictors: &[Vec<f64>],
    y: &[f64],
) -> Result<RegressionFit> {
    if predictors.len() != y.len() {
        return Err(Error::Invalid("predictor rows and responses differ in length".into()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<Vec<f64>> = predictors
        .iter()
        .map(|p| {
            let mut row = Vec::with_capacity(p.len() + 1);
            row.push(1.0);
            row.extend_from_slice(p);
            row
        })
        .collect();
    let design = Matrix::from_rows(&rows)?;
    if design.cols() != names.len() + 1 {
        return Err(Error::Invalid(format!(
            "{} predictor names for {} predictor columns",
            names.len(),
            design.cols() - 1
        )));
    }
    let sol = solve_least_squares(&design, y)?;
    let coef: BTreeMap<String, f64> = names
        .iter()
        .zip(&sol.beta[1..])
        .map(|(n, b)| (n.to_string(), *b))
        .collect();
    RegressionFit::new(sol.beta[0], coef, sol.rss, y.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_examples() {
        let h = build_histogram(&[1.0, 1.0, 1.0], 1.0, 0.0).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.origin, 1.0);
        let h = build_histogram(&[0.5, 1.5, 2.5], 1.0, 0.0).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1]);
        assert_eq!(h.n, 3);
        assert!(matches!(build_histogram(&[], 1.0, 0.0), Err(Error::EmptyInput)));
        assert!(build_histogram(&[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn fixed_histogram_clamps_out_of_range() {
        let h = build_histogram_fixed(&[-1.0, 0.5, 9.0, 25.0], 5.0, 0.0, 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.overflow, 2);
        assert_eq!(h.n, 4);
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[5.0]).unwrap();
        assert_eq!((s.n, s.mean, s.stdev, s.min, s.p50, s.p95, s.max), (1, 5.0, 0.0, 5.0, 5.0, 5.0, 5.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize(&v).unwrap();
        assert_eq!(s.p50, 50.0);
        assert_eq!(s.p95, 95.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 100.0);
        assert!(matches!(summarize(&[]), Err(Error::EmptyInput)));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.stdev - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn line_fit_is_exact() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 1.0).collect();
        let fit = least_squares(&["x"], &xs, &ys).unwrap();
        assert!((fit.coef["x"] - 2.0).abs() < 1e-12);
        assert!((fit.intercept_w - 1.0).abs() < 1e-12);
        assert!(fit.rss < 1e-20);

        let flat = vec![4.0; 10];
        let fit = least_squares(&["x"], &xs, &flat).unwrap();
        assert!(fit.coef["x"].abs() < 1e-12);
        assert!((fit.intercept_w - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let ys: Vec<f64> = (0..5).map(|i| i as f64).collect();
        assert!(matches!(
            least_squares(&["a", "b"], &xs, &ys),
            Err(Error::RankDeficient { .. })
        ));
        let zero: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0]).collect();
        assert!(matches!(
            least_squares(&["a", "b"], &zero, &ys),
            Err(Error::RankDeficient { .. })
        ));
        let few = vec![vec![1.0, 2.0]];
        assert!(least_squares(&["a", "b"], &few, &[1.0]).is_err());
    }

    #[test]
    fn chi_square_of_flat_histogram_is_zero() {
        let h = Histogram::from_parts(0.0, 1.0, vec![5, 5, 5, 5], 0).unwrap();
        assert_eq!(chi_square_uniform(&h), 0.0);
    }
}
