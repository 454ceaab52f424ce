//! Pointer-chase workloads.
//!
//! A [`ChaseBuffer`] is a region of `num_lines` slots, `stride_bytes` apart,
//! where the first word of every slot holds the word offset of the next slot.
//! The successor relation is a single cycle built with Sattolo's algorithm, so
//! a traversal from any slot visits every slot before it returns, and every
//! load depends on the previous one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwif::Backend;
use crate::model::{Cpu, LatencyTrace, TraceEntry};

pub const CACHE_LINE_BYTES: usize = 64;
const WORD: usize = std::mem::size_of::<usize>();

pub struct ChaseBuffer {
    num_lines: usize,
    stride_bytes: usize,
    seed: u64,
    // Word-addressed backing store; slot `s` starts at word `base + s * words_per_slot`.
    memory: Vec<usize>,
    base: usize,
    // Slots in traversal order starting at slot 0, and the inverse mapping.
    order: Vec<u32>,
    position: Vec<u32>,
}

impl std::fmt::Debug for ChaseBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChaseBuffer")
            .field("num_lines", &self.num_lines)
            .field("stride_bytes", &self.stride_bytes)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

/// Builds a chase over `num_lines` slots with the given stride.
pub fn build_chase(num_lines: usize, stride_bytes: usize, seed: u64) -> Result<ChaseBuffer> {
    if num_lines == 0 {
        return Err(Error::Invalid("a chase needs at least one line".into()));
    }
    if num_lines > u32::MAX as usize {
        return Err(Error::Invalid(format!("{num_lines} lines exceed the slot index range")));
    }
    if stride_bytes < CACHE_LINE_BYTES || !stride_bytes.is_multiple_of(WORD) {
        return Err(Error::Invalid(format!(
            "stride {stride_bytes} B must be a multiple of {WORD} B and at least {CACHE_LINE_BYTES} B"
        )));
    }
    let words_per_slot = stride_bytes / WORD;
    let align_words = CACHE_LINE_BYTES / WORD;
    let total_words = num_lines
        .checked_mul(words_per_slot)
        .and_then(|w| w.checked_add(align_words))
        .ok_or(Error::AllocationFailure(usize::MAX))?;

    let mut memory: Vec<usize> = Vec::new();
    memory
        .try_reserve_exact(total_words)
        .map_err(|_| Error::AllocationFailure(total_words * WORD))?;
    // Touch every page now so timed runs never take first-touch faults.
    memory.resize(total_words, 0);
    let misalign = (memory.as_ptr() as usize / WORD) % align_words;
    let base = (align_words - misalign) % align_words;

    // Sattolo: swapping only with strictly lower indices yields a single cycle.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next: Vec<u32> = (0..num_lines as u32).collect();
    for i in (1..num_lines).rev() {
        let j = rng.random_range(0..i);
        next.swap(i, j);
    }
    for (slot, &succ) in next.iter().enumerate() {
        memory[base + slot * words_per_slot] = base + succ as usize * words_per_slot;
    }

    let mut order = Vec::with_capacity(num_lines);
    let mut position = vec![0u32; num_lines];
    let mut slot = 0u32;
    for k in 0..num_lines {
        order.push(slot);
        position[slot as usize] = k as u32;
        slot = next[slot as usize];
    }

    Ok(ChaseBuffer {
        num_lines,
        stride_bytes,
        seed,
        memory,
        base,
        order,
        position,
    })
}

impl ChaseBuffer {
    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn stride_bytes(&self) -> usize {
        self.stride_bytes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn footprint_bytes(&self) -> usize {
        self.num_lines * self.stride_bytes
    }

    fn words_per_slot(&self) -> usize {
        self.stride_bytes / WORD
    }

    /// Successor of `slot`, read from the encoded memory.
    pub fn next(&self, slot: usize) -> usize {
        (self.memory[self.base + slot * self.words_per_slot()] - self.base) / self.words_per_slot()
    }

    /// Slot reached after `hops` dependent loads from `slot`, without walking.
    pub fn advance(&self, slot: usize, hops: u64) -> usize {
        let n = self.num_lines as u64;
        let k = (self.position[slot] as u64 + hops % n) % n;
        self.order[k as usize] as usize
    }

    /// Successor table, `permutation()[s]` being the slot visited after `s`.
    pub fn permutation(&self) -> Vec<usize> {
        (0..self.num_lines).map(|s| self.next(s)).collect()
    }

    /// Word index into [`ChaseBuffer::words`] of the first word of `slot`.
    pub fn word_of(&self, slot: usize) -> usize {
        self.base + slot * self.words_per_slot()
    }

    pub fn slot_of_word(&self, word: usize) -> usize {
        (word - self.base) / self.words_per_slot()
    }

    /// Raw encoded memory for hardware traversal.
    pub fn words(&self) -> &[usize] {
        &self.memory
    }
}

/// Named chase sizes; footprints are overridable from a platform file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChasePreset {
    L1,
    Llc,
    Dram,
}

impl ChasePreset {
    pub const ALL: [ChasePreset; 3] = [ChasePreset::L1, ChasePreset::Llc, ChasePreset::Dram];

    /// 16 KiB, half of a 32 KiB L1D.
    pub const L1_LINES: usize = 256;
    /// 18 slices of 1.375 MiB.
    pub const LLC_LINES: usize = 405_504;
    pub const DRAM_LINES: usize = 4 * Self::LLC_LINES;

    pub fn default_lines(self) -> usize {
        match self {
            ChasePreset::L1 => Self::L1_LINES,
            ChasePreset::Llc => Self::LLC_LINES,
            ChasePreset::Dram => Self::DRAM_LINES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChasePreset::L1 => "l1",
            ChasePreset::Llc => "llc",
            ChasePreset::Dram => "dram",
        }
    }
}

impl std::str::FromStr for ChasePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(ChasePreset::L1),
            "llc" => Ok(ChasePreset::Llc),
            "dram" => Ok(ChasePreset::Dram),
            other => Err(Error::Parse(format!("unknown chase preset {other:?}"))),
        }
    }
}

/// Runs one untimed warm-up lap, then `num_accesses` individually timed
/// dependent loads on `cpu`.
pub fn run_chase(
    buffer: &ChaseBuffer,
    num_accesses: usize,
    backend: &dyn Backend,
    cpu: Cpu,
) -> Result<LatencyTrace> {
    let tsc_khz = backend.tsc_khz();
    if num_accesses == 0 {
        return LatencyTrace::empty(tsc_khz);
    }
    let mut scratch = Vec::with_capacity(1);
    let start = backend.chase(cpu, buffer, 0, 1, buffer.num_lines(), &mut scratch)?;
    let mut entries = Vec::with_capacity(num_accesses);
    backend.chase(cpu, buffer, start, num_accesses, 1, &mut entries)?;
    LatencyTrace::new(entries, tsc_khz)
}

/// Mean access duration over entries `[from, to)`.
pub fn average_access_cycles(trace: &LatencyTrace, from: usize, to: usize) -> Result<f64> {
    mean_duration(trace.entries(), from, to)
}

pub(crate) fn mean_duration(entries: &[TraceEntry], from: usize, to: usize) -> Result<f64> {
    if from >= to || to > entries.len() {
        return Err(Error::EmptyWindow { from, to });
    }
    let sum: u64 = entries[from..to].iter().map(|e| e.duration_cycles).sum();
    Ok(sum as f64 / (to - from) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(durations: &[u64]) -> LatencyTrace {
        let mut t = 0;
        let entries = durations
            .iter()
            .map(|&d| {
                t += d;
                TraceEntry {
                    timestamp_cycles: t,
                    duration_cycles: d,
                }
            })
            .collect();
        LatencyTrace::new(entries, 3_000_000).unwrap()
    }

    #[test]
    fn single_line_points_to_itself() {
        let b = build_chase(1, 64, 0).unwrap();
        assert_eq!(b.next(0), 0);
        assert_eq!(b.permutation(), vec![0]);
        assert_eq!(b.advance(0, 17), 0);
    }

    #[test]
    fn eight_lines_form_one_cycle() {
        let b = build_chase(8, 64, 7).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut slot = 0;
        for _ in 0..8 {
            assert!(seen.insert(slot));
            slot = b.next(slot);
        }
        assert_eq!(slot, 0);
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn llc_preset_footprint() {
        assert_eq!(ChasePreset::LLC_LINES * 64, 18 * 1_441_792);
        assert_eq!(ChasePreset::LLC_LINES * 64, 25_952_256);
        assert!((25_952_256f64 / (1 << 20) as f64 - 24.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_chase(0, 64, 0).is_err());
        assert!(build_chase(4, 32, 0).is_err());
        assert!(build_chase(4, 100, 0).is_err());
    }

    #[test]
    fn memory_is_line_aligned() {
        for stride in [64, 128, 4096] {
            let b = build_chase(33, stride, 3).unwrap();
            let addr = b.words().as_ptr() as usize + b.word_of(0) * WORD;
            assert_eq!(addr % CACHE_LINE_BYTES, 0);
            assert_eq!(b.slot_of_word(b.word_of(5)), 5);
        }
    }

    #[test]
    fn advance_agrees_with_walking() {
        let b = build_chase(100, 64, 11).unwrap();
        for start in [0, 13, 99] {
            let mut walked = start;
            for hops in 0..250u64 {
                assert_eq!(b.advance(start, hops), walked);
                walked = b.next(walked);
            }
        }
    }

    #[test]
    fn average_examples() {
        let t = trace(&[100; 10]);
        assert_eq!(average_access_cycles(&t, 0, 10).unwrap(), 100.0);
        let t = trace(&[80, 90, 100]);
        assert_eq!(average_access_cycles(&t, 0, 3).unwrap(), 90.0);
        assert!(matches!(
            average_access_cycles(&t, 2, 2),
            Err(Error::EmptyWindow { .. })
        ));
        assert!(average_access_cycles(&t, 0, 4).is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!("LLC".parse::<ChasePreset>().unwrap(), ChasePreset::Llc);
        assert!("l3".parse::<ChasePreset>().is_err());
    }
}
