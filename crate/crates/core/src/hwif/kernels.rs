//! Native probe workloads for the hardware backend.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::model::TraceEntry;

#[cfg(target_arch = "x86_64")]
mod arch {
    use std::arch::x86_64::{__cpuid, __rdtscp, _mm_lfence, _mm_mfence, _rdtsc};

    /// Timestamp for the start of a timed region.
    #[inline(always)]
    pub fn tsc_begin() -> u64 {
        unsafe {
            _mm_lfence();
            let t = _rdtsc();
            _mm_lfence();
            t
        }
    }

    /// Timestamp for the end of a timed region; waits for prior loads.
    #[inline(always)]
    pub fn tsc_end() -> u64 {
        let mut aux = 0u32;
        unsafe {
            let t = __rdtscp(&mut aux);
            _mm_lfence();
            t
        }
    }

    #[inline(always)]
    pub fn serialize() {
        unsafe {
            _mm_mfence();
            std::hint::black_box(__cpuid(0));
        }
    }

    pub fn has_avx512() -> bool {
        std::arch::is_x86_feature_detected!("avx512f")
    }

    /// Eight independent 512-bit FMA chains, `rounds` times.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn fma_rounds(rounds: u64) {
        let a = [1.000_000_1f64; 8];
        let b = [0.999_999_9f64; 8];
        unsafe {
            std::arch::asm!(
                "vmovupd zmm0, [{a}]",
                "vmovupd zmm1, [{b}]",
                "vmovapd zmm2, zmm0",
                "vmovapd zmm3, zmm0",
                "vmovapd zmm4, zmm0",
                "vmovapd zmm5, zmm0",
                "vmovapd zmm6, zmm0",
                "vmovapd zmm7, zmm0",
                "vmovapd zmm8, zmm0",
                "vmovapd zmm9, zmm0",
                "2:",
                "vfmadd231pd zmm2, zmm0, zmm1",
                "vfmadd231pd zmm3, zmm0, zmm1",
                "vfmadd231pd zmm4, zmm0, zmm1",
                "vfmadd231pd zmm5, zmm0, zmm1",
                "vfmadd231pd zmm6, zmm0, zmm1",
                "vfmadd231pd zmm7, zmm0, zmm1",
                "vfmadd231pd zmm8, zmm0, zmm1",
                "vfmadd231pd zmm9, zmm0, zmm1",
                "dec {n}",
                "jnz 2b",
                a = in(reg) a.as_ptr(),
                b = in(reg) b.as_ptr(),
                n = inout(reg) rounds.max(1) => _,
                out("zmm0") _, out("zmm1") _, out("zmm2") _, out("zmm3") _,
                out("zmm4") _, out("zmm5") _, out("zmm6") _, out("zmm7") _,
                out("zmm8") _, out("zmm9") _,
                options(nostack),
            );
        }
    }

    /// `zmm[8+i] ^= zmm[i]` for i in 0..8, `rounds` times, with value1 in
    /// zmm0-7 and value2 in zmm8-15.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn xor_rounds(v1: &[u64; 8], v2: &[u64; 8], rounds: u64) {
        unsafe {
            std::arch::asm!(
                "vmovdqu64 zmm0, [{v1}]",
                "vmovdqa64 zmm1, zmm0",
                "vmovdqa64 zmm2, zmm0",
                "vmovdqa64 zmm3, zmm0",
                "vmovdqa64 zmm4, zmm0",
                "vmovdqa64 zmm5, zmm0",
                "vmovdqa64 zmm6, zmm0",
                "vmovdqa64 zmm7, zmm0",
                "vmovdqu64 zmm8, [{v2}]",
                "vmovdqa64 zmm9, zmm8",
                "vmovdqa64 zmm10, zmm8",
                "vmovdqa64 zmm11, zmm8",
                "vmovdqa64 zmm12, zmm8",
                "vmovdqa64 zmm13, zmm8",
                "vmovdqa64 zmm14, zmm8",
                "vmovdqa64 zmm15, zmm8",
                "2:",
                "vpxord zmm8, zmm8, zmm0",
                "vpxord zmm9, zmm9, zmm1",
                "vpxord zmm10, zmm10, zmm2",
                "vpxord zmm11, zmm11, zmm3",
                "vpxord zmm12, zmm12, zmm4",
                "vpxord zmm13, zmm13, zmm5",
                "vpxord zmm14, zmm14, zmm6",
                "vpxord zmm15, zmm15, zmm7",
                "dec {n}",
                "jnz 2b",
                v1 = in(reg) v1.as_ptr(),
                v2 = in(reg) v2.as_ptr(),
                n = inout(reg) rounds.max(1) => _,
                out("zmm0") _, out("zmm1") _, out("zmm2") _, out("zmm3") _,
                out("zmm4") _, out("zmm5") _, out("zmm6") _, out("zmm7") _,
                out("zmm8") _, out("zmm9") _, out("zmm10") _, out("zmm11") _,
                out("zmm12") _, out("zmm13") _, out("zmm14") _, out("zmm15") _,
                options(nostack),
            );
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod arch {
    use std::sync::OnceLock;
    use std::time::Instant;

    fn nanos() -> u64 {
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }

    pub fn tsc_begin() -> u64 {
        nanos()
    }

    pub fn tsc_end() -> u64 {
        nanos()
    }

    pub fn serialize() {
        std::sync::atomic::fence(std::sync::atomic::Ordering::SeqCst);
    }

    pub fn has_avx512() -> bool {
        false
    }

    pub unsafe fn fma_rounds(_rounds: u64) {}

    pub unsafe fn xor_rounds(_v1: &[u64; 8], _v2: &[u64; 8], _rounds: u64) {}
}

pub use arch::{has_avx512, tsc_begin, tsc_end};

/// Unrolled register pairs in the XOR kernel; recorded in reports.
pub const XOR_UNROLL: usize = 8;

const CHECK_EVERY: u64 = 256;

/// Smallest observed cost of an empty timed region.
pub fn timer_overhead() -> u64 {
    (0..2000)
        .map(|_| {
            let t0 = tsc_begin();
            let t1 = tsc_end();
            t1.saturating_sub(t0)
        })
        .min()
        .unwrap_or(0)
}

/// Times `entries` groups of `per_entry` dependent loads. `word` indexes the
/// first word of the starting slot; returns the word reached.
pub fn timed_chase(
    words: &[usize],
    mut word: usize,
    entries: usize,
    per_entry: usize,
    out: &mut Vec<TraceEntry>,
) -> usize {
    out.reserve(entries);
    let base = words.as_ptr();
    for _ in 0..entries {
        let t0 = tsc_begin();
        for _ in 0..per_entry {
            // SAFETY: every stored value is an in-bounds word index written
            // by `build_chase`.
            word = unsafe { std::ptr::read_volatile(base.add(word)) };
        }
        let t1 = tsc_end();
        let t1 = match out.last() {
            Some(prev) if t1 <= prev.timestamp_cycles => prev.timestamp_cycles + 1,
            _ => t1,
        };
        out.push(TraceEntry {
            timestamp_cycles: t1,
            duration_cycles: t1.saturating_sub(t0).max(1),
        });
    }
    word
}

/// Untimed dependent loads until the TSC passes `deadline`.
pub fn chase_until(words: &[usize], mut word: usize, deadline: u64) -> (usize, u64) {
    let base = words.as_ptr();
    let mut count = 0u64;
    while tsc_begin() < deadline {
        for _ in 0..CHECK_EVERY {
            // SAFETY: see `timed_chase`.
            word = unsafe { std::ptr::read_volatile(base.add(word)) };
        }
        count += CHECK_EVERY;
    }
    (word, count)
}

#[inline(always)]
fn compute_step(x: u64) -> u64 {
    x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407) ^ (x >> 17)
}

/// Register-only integer loop; returns completed iterations.
pub fn compute_until(deadline: u64) -> u64 {
    let mut x = std::hint::black_box(0x9e37_79b9u64);
    let mut iterations = 0u64;
    while tsc_begin() < deadline {
        for _ in 0..1024 {
            x = compute_step(x);
        }
        iterations += 1024;
    }
    std::hint::black_box(x);
    iterations
}

pub fn compute_while(run: &AtomicBool) -> u64 {
    let mut x = std::hint::black_box(0x9e37_79b9u64);
    let mut iterations = 0u64;
    while run.load(Ordering::Relaxed) {
        for _ in 0..1024 {
            x = compute_step(x);
        }
        iterations += 1024;
    }
    std::hint::black_box(x);
    iterations
}

/// 512-bit FMA loop until `deadline`, optionally streaming through `memory`.
pub fn fma_until(deadline: u64, memory: Option<&[u64]>) -> Result<u64> {
    if !has_avx512() {
        return Err(Error::BackendUnavailable("AVX-512 is not supported on this CPU".into()));
    }
    let mut rounds = 0u64;
    let mut pos = 0usize;
    let mut sink = 0u64;
    loop {
        // SAFETY: AVX-512F support checked above.
        unsafe { arch::fma_rounds(CHECK_EVERY) };
        rounds += CHECK_EVERY;
        if let Some(m) = memory {
            for _ in 0..64 {
                sink = sink.wrapping_add(m[pos]);
                pos = (pos + 8) % m.len();
            }
        }
        if tsc_begin() >= deadline {
            break;
        }
    }
    std::hint::black_box(sink);
    Ok(rounds)
}

/// Serializing instructions until `deadline`.
pub fn serialize_until(deadline: u64) -> u64 {
    let mut n = 0;
    while tsc_begin() < deadline {
        arch::serialize();
        n += 1;
    }
    n
}

/// XOR kernel until `run` is cleared; returns completed rounds.
pub fn xor_while(v1: &[u64; 8], v2: &[u64; 8], run: &AtomicBool) -> Result<u64> {
    if !has_avx512() {
        return Err(Error::BackendUnavailable("AVX-512 is not supported on this CPU".into()));
    }
    let mut rounds = 0u64;
    while run.load(Ordering::Relaxed) {
        // SAFETY: AVX-512F support checked above.
        unsafe { arch::xor_rounds(v1, v2, 4096) };
        rounds += 4096;
    }
    Ok(rounds)
}
