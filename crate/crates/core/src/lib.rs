//! Measurement of energy-efficiency mechanisms on Intel server processors:
//! core and uncore frequency transitions, C-state wake-up latencies, AVX
//! frequency licenses, data-dependent power and clock modulation.

pub mod analysis;
pub mod auxiliary;
pub mod chase;
pub mod cli;
pub mod datapower;
pub mod error;
pub mod hwif;
pub mod interrupt;
pub mod model;
pub mod report;
pub mod transition;
pub mod avx;
pub mod cstate;
