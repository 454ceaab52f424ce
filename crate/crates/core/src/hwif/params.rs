use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Behavior of the simulated machine. Times are in µs unless the name says
/// otherwise; frequencies in kHz; power in W and mW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParameters {
    pub tsc_khz: u64,
    pub packages: usize,
    pub cores_per_package: usize,
    pub core_min_khz: u64,
    pub core_max_khz: u64,
    pub core_step_khz: u64,
    pub nominal_core_khz: u64,
    pub timer_overhead_cycles: u64,
    /// Time the coordinator needs for one control write.
    pub control_write_overhead_cycles: u64,

    pub pstate_update_interval_us: f64,

    pub uncore_min_ratio: u32,
    pub uncore_max_ratio: u32,
    /// Uncore frequency the control loop picks for core-bound workloads.
    pub ufs_low_khz: u64,
    pub ufs_update_interval_us: f64,
    pub ufs_controlloop_ms: f64,
    pub ufs_gap_us_range: [f64; 2],
    pub ufs_llc_cycles_low: f64,
    pub ufs_llc_cycles_high: f64,
    pub ufs_artifact_rate: f64,
    pub ufs_artifact_gap_us_range: [f64; 2],

    pub l1_core_cycles: f64,
    pub l2_core_cycles: f64,
    pub dram_extra_ns: f64,
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub llc_bytes: usize,

    pub c1_wake_us_nominal: f64,
    pub c1_wake_us_minfreq: f64,
    pub c1e_wake_us_nominal: f64,
    pub c1e_wake_us_minfreq: f64,
    pub c6_wake_us_nominal: f64,
    pub c6_wake_us_minfreq: f64,
    pub c6_wake_us_remote_idle_range: [f64; 2],
    pub c6_remote_idle_tail_us: f64,
    pub c6_remote_idle_tail_prob: f64,
    /// Added to C1 and C1E wake-ups when the callee's package is idle.
    pub remote_idle_extra_us: f64,
    pub wake_jitter_us: f64,
    pub signal_delivery_us: f64,
    /// Probability that the callee idles one state shallower than requested.
    pub cstate_demotion_prob: f64,

    pub avx_throttle_us_range: [f64; 2],
    pub avx_license_residency_us_range: [f64; 2],
    /// Idle time after a license drop that restores the full residency range.
    pub avx_license_relax_us: f64,
    pub avx512_license_khz: u64,

    pub power_idle_w: f64,
    pub power_base_w: BTreeMap<u64, f64>,
    pub power_reference_cores: usize,
    pub power_coef_v1_mw: BTreeMap<u64, f64>,
    pub power_coef_v2_mw: BTreeMap<u64, f64>,
    pub power_noise_w: f64,
    pub package_tdp_w: f64,
    pub uncore_w_per_ratio: f64,
    pub rapl_short_window_w: f64,
    pub rapl_short_window_s: f64,
    pub rapl_long_window_w: f64,
    pub rapl_long_window_s: f64,

    pub pperf_counts_stalled_cycles: bool,
    pub tstate_excess_skip: f64,
    pub tstate_unimplemented_levels: Vec<u32>,
    pub compute_cycles_per_iteration: f64,
}

impl Default for SimParameters {
    fn default() -> Self {
        SimParameters {
            tsc_khz: 3_000_000,
            packages: 2,
            cores_per_package: 18,
            core_min_khz: 1_200_000,
            core_max_khz: 3_000_000,
            core_step_khz: 100_000,
            nominal_core_khz: 3_000_000,
            timer_overhead_cycles: 24,
            control_write_overhead_cycles: 6_000,

            pstate_update_interval_us: 500.0,

            uncore_min_ratio: 12,
            uncore_max_ratio: 24,
            ufs_low_khz: 1_400_000,
            ufs_update_interval_us: 1500.0,
            ufs_controlloop_ms: 9.8,
            ufs_gap_us_range: [14.5, 16.0],
            ufs_llc_cycles_low: 119.0,
            ufs_llc_cycles_high: 83.0,
            ufs_artifact_rate: 0.20,
            ufs_artifact_gap_us_range: [7.0, 8.0],

            l1_core_cycles: 5.0,
            l2_core_cycles: 14.0,
            dram_extra_ns: 80.0,
            l1_bytes: 32 * 1024,
            l2_bytes: 1024 * 1024,
            llc_bytes: 18 * 1_441_792,

            c1_wake_us_nominal: 2.0,
            c1_wake_us_minfreq: 2.5,
            c1e_wake_us_nominal: 8.0,
            c1e_wake_us_minfreq: 10.0,
            c6_wake_us_nominal: 33.0,
            c6_wake_us_minfreq: 42.0,
            c6_wake_us_remote_idle_range: [46.0, 48.0],
            c6_remote_idle_tail_us: 55.0,
            c6_remote_idle_tail_prob: 0.05,
            remote_idle_extra_us: 10.0,
            wake_jitter_us: 0.3,
            signal_delivery_us: 1.0,
            cstate_demotion_prob: 0.0,

            avx_throttle_us_range: [62.0, 75.0],
            avx_license_residency_us_range: [555.0, 704.0],
            avx_license_relax_us: 1400.0,
            avx512_license_khz: 2_700_000,

            power_idle_w: 78.0,
            power_base_w: BTreeMap::from([(2_400_000, 310.0), (3_000_000, 362.0)]),
            power_reference_cores: 36,
            power_coef_v1_mw: BTreeMap::from([(2_400_000, 1.69), (3_000_000, 3.13)]),
            power_coef_v2_mw: BTreeMap::from([(2_400_000, 0.46), (3_000_000, 0.80)]),
            power_noise_w: 0.5,
            package_tdp_w: 200.0,
            uncore_w_per_ratio: 2.0,
            rapl_short_window_w: 240.0,
            rapl_short_window_s: 1.0,
            rapl_long_window_w: 200.0,
            rapl_long_window_s: 100.0,

            pperf_counts_stalled_cycles: true,
            tstate_excess_skip: 0.03,
            tstate_unimplemented_levels: vec![1],
            compute_cycles_per_iteration: 4.0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name}: range [{}, {}] is not ordered", r[0], r[1])));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{name} must be > 0, got {v}")));
    }
    Ok(())
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl SimParameters {
    pub fn validate(&self) -> Result<()> {
        check_positive("pstate_update_interval_us", self.pstate_update_interval_us)?;
        check_positive("ufs_update_interval_us", self.ufs_update_interval_us)?;
        check_positive("avx_license_relax_us", self.avx_license_relax_us)?;
        check_positive("ufs_llc_cycles_low", self.ufs_llc_cycles_low)?;
        check_positive("ufs_llc_cycles_high", self.ufs_llc_cycles_high)?;
        check_positive("compute_cycles_per_iteration", self.compute_cycles_per_iteration)?;
        check_positive("signal_delivery_us", self.signal_delivery_us)?;
        if !(self.ufs_controlloop_ms >= 0.0) {
            return Err(Error::Config("ufs_controlloop_ms must be >= 0".into()));
        }
        for (name, r) in [
            ("ufs_gap_us_range", self.ufs_gap_us_range),
            ("ufs_artifact_gap_us_range", self.ufs_artifact_gap_us_range),
            ("c6_wake_us_remote_idle_range", self.c6_wake_us_remote_idle_range),
            ("avx_throttle_us_range", self.avx_throttle_us_range),
            ("avx_license_residency_us_range", self.avx_license_residency_us_range),
        ] {
            check_range(name, r)?;
        }
        check_probability("ufs_artifact_rate", self.ufs_artifact_rate)?;
        check_probability("c6_remote_idle_tail_prob", self.c6_remote_idle_tail_prob)?;
        check_probability("cstate_demotion_prob", self.cstate_demotion_prob)?;
        if self.tsc_khz == 0 || self.packages == 0 || self.cores_per_package == 0 {
            return Err(Error::Config("tsc_khz, packages and cores_per_package must be > 0".into()));
        }
        if self.core_step_khz == 0 || self.core_min_khz == 0 || self.core_min_khz > self.core_max_khz {
            return Err(Error::Config("core frequency range is empty".into()));
        }
        if self.uncore_min_ratio == 0 || self.uncore_min_ratio > self.uncore_max_ratio {
            return Err(Error::Config("uncore ratio range is empty".into()));
        }
        let uncore = (self.uncore_min_ratio as u64 * 100_000)..=(self.uncore_max_ratio as u64 * 100_000);
        if !uncore.contains(&self.ufs_low_khz) {
            return Err(Error::Config("ufs_low_khz lies outside the uncore range".into()));
        }
        for (name, m) in [
            ("power_base_w", &self.power_base_w),
            ("power_coef_v1_mw", &self.power_coef_v1_mw),
            ("power_coef_v2_mw", &self.power_coef_v2_mw),
        ] {
            if m.is_empty() {
                return Err(Error::Config(format!("{name} needs at least one frequency")));
            }
        }
        if self.power_noise_w < 0.0 || self.wake_jitter_us < 0.0 {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        Ok(())
    }

    pub fn cpu_count(&self) -> usize {
        self.packages * self.cores_per_package
    }

    pub fn core_frequencies(&self) -> Vec<u64> {
        (0..)
            .map(|i| self.core_min_khz + i * self.core_step_khz)
            .take_while(|&f| f <= self.core_max_khz)
            .collect()
    }

    /// `(a, b)` with LLC latency `a + b / f_uncore_ghz`, fitted through the
    /// low and high anchor latencies.
    pub fn llc_latency_model(&self) -> (f64, f64) {
        let f_lo = self.ufs_low_khz as f64 / 1e6;
        let f_hi = self.uncore_max_ratio as f64 / 10.0;
        if (f_hi - f_lo).abs() < 1e-12 {
            return (self.ufs_llc_cycles_high, 0.0);
        }
        let b = (self.ufs_llc_cycles_low - self.ufs_llc_cycles_high) / (1.0 / f_lo - 1.0 / f_hi);
        (self.ufs_llc_cycles_high - b / f_hi, b)
    }

    pub fn llc_latency_cycles(&self, uncore_khz: u64) -> f64 {
        let (a, b) = self.llc_latency_model();
        a + b / (uncore_khz as f64 / 1e6)
    }
}

/// Linear interpolation over a frequency-keyed table, clamped at both ends.
pub fn interpolate(table: &BTreeMap<u64, f64>, khz: u64) -> f64 {
    if let Some(v) = table.get(&khz) {
        return *v;
    }
    let below = table.range(..khz).next_back();
    let above = table.range(khz..).next();
    match (below, above) {
        (Some((&k0, &v0)), Some((&k1, &v1))) => v0 + (v1 - v0) * (khz - k0) as f64 / (k1 - k0) as f64,
        (Some((_, &v)), None) | (None, Some((_, &v))) => v,
        (None, None) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimParameters::default().validate().unwrap();
    }

    #[test]
    fn rejects_inverted_range() {
        let p = SimParameters {
            ufs_gap_us_range: [16.0, 14.5],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = SimParameters {
            pstate_update_interval_us: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn llc_anchors() {
        let p = SimParameters::default();
        assert!((p.llc_latency_cycles(1_400_000) - 119.0).abs() < 1e-9);
        assert!((p.llc_latency_cycles(2_400_000) - 83.0).abs() < 1e-9);
    }

    #[test]
    fn frequency_list() {
        let f = SimParameters::default().core_frequencies();
        assert_eq!(f.len(), 19);
        assert_eq!(f[0], 1_200_000);
        assert_eq!(*f.last().unwrap(), 3_000_000);
    }

    #[test]
    fn interpolation() {
        let t = BTreeMap::from([(2_400_000, 1.69), (3_000_000, 3.13)]);
        assert_eq!(interpolate(&t, 2_400_000), 1.69);
        assert!((interpolate(&t, 2_700_000) - 2.41).abs() < 1e-12);
        assert_eq!(interpolate(&t, 1_200_000), 1.69);
        assert_eq!(interpolate(&t, 3_500_000), 3.13);
    }

    #[test]
    fn json_round_trip_with_partial_override() {
        let p: SimParameters = serde_json::from_str(r#"{"ufs_controlloop_ms": 0.0}"#).unwrap();
        assert_eq!(p.ufs_controlloop_ms, 0.0);
        assert_eq!(p.tsc_khz, 3_000_000);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<SimParameters>(&s).unwrap(), p);
        assert!(serde_json::from_str::<SimParameters>(r#"{"bogus": 1}"#).is_err());
    }
}
