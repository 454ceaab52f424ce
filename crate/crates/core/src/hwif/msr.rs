//! Register addresses and field layouts.

use crate::error::{Error, Result};

pub const IA32_TIME_STAMP_COUNTER: u32 = 0x10;
pub const IA32_MPERF: u32 = 0xE7;
pub const IA32_APERF: u32 = 0xE8;
pub const IA32_CLOCK_MODULATION: u32 = 0x19A;
pub const UNCORE_RATIO_LIMIT: u32 = 0x620;
pub const UNCORE_PERF_STATUS: u32 = 0x621;
pub const MSR_PPERF: u32 = 0x64E;

const MAX_RATIO_MASK: u64 = 0x7F;
const MIN_RATIO_SHIFT: u32 = 8;
const MIN_RATIO_MASK: u64 = 0x7F << MIN_RATIO_SHIFT;

/// Packs `(min, max)` uncore ratios into the ratio-limit register layout.
pub fn encode_uncore_ratio_limit(min_ratio: u32, max_ratio: u32) -> u64 {
    ((min_ratio as u64 & 0x7F) << MIN_RATIO_SHIFT) | (max_ratio as u64 & MAX_RATIO_MASK)
}

/// Unpacks `(min, max)` uncore ratios.
pub fn decode_uncore_ratio_limit(value: u64) -> (u32, u32) {
    (
        ((value & MIN_RATIO_MASK) >> MIN_RATIO_SHIFT) as u32,
        (value & MAX_RATIO_MASK) as u32,
    )
}

/// Replaces the ratio fields of `current`, keeping all other bits.
pub fn with_uncore_ratios(current: u64, min_ratio: u32, max_ratio: u32) -> u64 {
    (current & !(MIN_RATIO_MASK | MAX_RATIO_MASK)) | encode_uncore_ratio_limit(min_ratio, max_ratio)
}

/// Current uncore ratio from the perf-status register.
pub fn decode_uncore_perf_status(value: u64) -> u32 {
    (value & MAX_RATIO_MASK) as u32
}

const MODULATION_ENABLE: u64 = 1 << 4;

/// On-demand clock modulation setting.
///
/// With the extended encoding a level `L` in 1..=15 requests a duty cycle of
/// `L/16`; otherwise `L` in 1..=7 requests `L/8`. Level 0 disables
/// modulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockModulation {
    pub extended: bool,
    pub level: u32,
}

impl ClockModulation {
    pub fn off(extended: bool) -> Self {
        ClockModulation { extended, level: 0 }
    }

    pub fn new(level: u32, extended: bool) -> Result<Self> {
        if level > Self::max_level(extended) {
            return Err(Error::RangeViolation(format!(
                "clock modulation level {level} exceeds {}",
                Self::max_level(extended)
            )));
        }
        Ok(ClockModulation { extended, level })
    }

    pub fn max_level(extended: bool) -> u32 {
        if extended {
            15
        } else {
            7
        }
    }

    fn steps(&self) -> u32 {
        if self.extended {
            16
        } else {
            8
        }
    }

    pub fn nominal_duty(&self) -> f64 {
        if self.level == 0 {
            1.0
        } else {
            self.level as f64 / self.steps() as f64
        }
    }

    pub fn encode(&self) -> u64 {
        if self.level == 0 {
            return 0;
        }
        let field = if self.extended {
            self.level as u64 & 0xF
        } else {
            (self.level as u64 & 0x7) << 1
        };
        MODULATION_ENABLE | field
    }

    pub fn decode(value: u64, extended: bool) -> Self {
        if value & MODULATION_ENABLE == 0 {
            return ClockModulation::off(extended);
        }
        let level = if extended {
            (value & 0xF) as u32
        } else {
            ((value >> 1) & 0x7) as u32
        };
        ClockModulation { extended, level }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boot_value_decodes_to_full_range() {
        let v = encode_uncore_ratio_limit(12, 24);
        assert_eq!(v, (12 << 8) | 24);
        assert_eq!(decode_uncore_ratio_limit(v), (12, 24));
    }

    #[test]
    fn ratio_update_keeps_other_bits() {
        let v = (1u64 << 40) | encode_uncore_ratio_limit(12, 24);
        let w = with_uncore_ratios(v, 24, 24);
        assert_eq!(w >> 40, 1);
        assert_eq!(decode_uncore_ratio_limit(w), (24, 24));
    }

    #[test]
    fn clock_modulation_round_trip() {
        for extended in [true, false] {
            for level in 0..=ClockModulation::max_level(extended) {
                let m = ClockModulation::new(level, extended).unwrap();
                assert_eq!(ClockModulation::decode(m.encode(), extended), m);
            }
            assert!(ClockModulation::new(ClockModulation::max_level(extended) + 1, extended).is_err());
        }
        assert_eq!(ClockModulation::new(8, true).unwrap().nominal_duty(), 0.5);
        assert_eq!(ClockModulation::new(4, false).unwrap().nominal_duty(), 0.5);
        assert_eq!(ClockModulation::off(true).encode(), 0);
    }
}
