//! Backend for the running machine: MSR device files, cpufreq and cpuidle
//! sysfs, perf events, RAPL or an external meter, and native kernels.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::kernels::{self, tsc_begin, tsc_end};
use super::power::{ExternalFileSource, RaplSource};
use super::{
    expand_template, Action, ActionOutcome, ActionTicket, Backend, BackendConfig, BackendKind,
    CounterEvent, IdleState, Kernel, KernelHandle, KernelStats, PlatformRegisters, PowerSource,
    WakeMode, WakeObservation,
};
use crate::chase::ChaseBuffer;
use crate::error::{Error, Result};
use crate::model::{Cpu, PhaseKind, PowerSample, TraceEntry};

const MSR_HINT: &str = "load the msr module (modprobe msr) and run as root or with CAP_SYS_RAWIO";
const PERF_HINT: &str = "set /proc/sys/kernel/perf_event_paranoid to 0 or run as root";
const SYSFS_HINT: &str = "cpufreq and cpuidle knobs are writable by root only";
const STREAM_BYTES: usize = 64 << 20;

enum PowerState {
    Rapl(RaplSource),
    File(ExternalFileSource),
    Unavailable(String),
}

struct RunningKernel {
    run: Arc<AtomicBool>,
    threads: Vec<(Cpu, u64, JoinHandle<Result<u64>>)>,
}

struct Inner {
    config: BackendConfig,
    cpus: Vec<Cpu>,
    packages: HashMap<Cpu, usize>,
    tsc_khz: u64,
    timer_overhead: u64,
    msr_files: Mutex<HashMap<Cpu, File>>,
    perf_files: Mutex<HashMap<(Cpu, CounterEvent), File>>,
    power: Mutex<PowerState>,
    actions: Mutex<HashMap<u64, JoinHandle<Result<ActionOutcome>>>>,
    next_id: AtomicU64,
    kernels: Mutex<HashMap<u64, RunningKernel>>,
    stream: OnceLock<Vec<u64>>,
}

pub struct HardwareBackend {
    inner: Arc<Inner>,
}

fn io_error(path: &Path, e: io::Error, hint: &str) -> Error {
    match e.kind() {
        io::ErrorKind::PermissionDenied => Error::PermissionDenied {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        },
        _ => Error::io(path.display().to_string(), e),
    }
}

fn read_trimmed(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map(|s| s.trim().to_string())
        .map_err(|e| io_error(path, e, SYSFS_HINT))
}

fn write_value(path: &Path, value: &str) -> Result<()> {
    fs::write(path, value).map_err(|e| io_error(path, e, SYSFS_HINT))
}

/// Parses a kernel CPU list such as `0-3,8,10-11`.
pub fn parse_cpu_list(s: &str) -> Result<Vec<Cpu>> {
    let mut out = Vec::new();
    for part in s.trim().split(',').filter(|p| !p.is_empty()) {
        let bad = || Error::Parse(format!("bad cpu list element {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let a: Cpu = a.trim().parse().map_err(|_| bad())?;
                let b: Cpu = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn affinity_cpus() -> Vec<Cpu> {
    // SAFETY: cpu_set_t is plain data; the kernel fills it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return vec![0];
        }
        (0..libc::CPU_SETSIZE as usize)
            .filter(|&c| libc::CPU_ISSET(c, &set))
            .collect()
    }
}

fn measure_tsc_khz() -> u64 {
    let t0 = Instant::now();
    let c0 = tsc_begin();
    std::thread::sleep(Duration::from_millis(50));
    let c1 = tsc_end();
    let ns = t0.elapsed().as_nanos().max(1);
    ((c1 - c0) as u128 * 1_000_000 / ns).max(1) as u64
}

/// Kernel ABI layout of `struct perf_event_attr` (version 5, 112 bytes).
#[repr(C)]
#[derive(Default)]
struct PerfEventAttr {
    type_: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
    config2: u64,
    branch_sample_type: u64,
    sample_regs_user: u64,
    sample_stack_user: u32,
    clockid: i32,
    sample_regs_intr: u64,
    aux_watermark: u32,
    sample_max_stack: u16,
    reserved: u16,
}

const PERF_TYPE_RAW: u32 = 4;

fn open_raw_event(cpu: Cpu, config: u64) -> Result<File> {
    use std::os::fd::FromRawFd;
    let attr = PerfEventAttr {
        type_: PERF_TYPE_RAW,
        size: std::mem::size_of::<PerfEventAttr>() as u32,
        config,
        ..Default::default()
    };
    // SAFETY: attr outlives the call; the kernel only reads it.
    let fd = unsafe {
        libc::syscall(
            libc::SYS_perf_event_open,
            &attr as *const PerfEventAttr,
            -1 as libc::pid_t,
            cpu as libc::c_int,
            -1 as libc::c_int,
            0 as libc::c_ulong,
        )
    };
    if fd < 0 {
        let e = io::Error::last_os_error();
        return Err(match e.raw_os_error() {
            Some(libc::EACCES) | Some(libc::EPERM) => Error::PermissionDenied {
                path: PathBuf::from("perf_event_open"),
                hint: PERF_HINT.into(),
            },
            _ => Error::EventUnavailable(format!("raw event 0x{config:x} on cpu {cpu}: {e}")),
        });
    }
    // SAFETY: fd is a freshly opened descriptor we own.
    Ok(unsafe { File::from_raw_fd(fd as i32) })
}

fn pin_current_thread(cpu: Cpu) -> Result<()> {
    if cpu >= libc::CPU_SETSIZE as usize {
        return Err(Error::InvalidCpu(cpu));
    }
    // SAFETY: plain data set passed by pointer.
    let rc = unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set)
    };
    if rc != 0 {
        return Err(Error::InvalidCpu(cpu));
    }
    Ok(())
}

impl Inner {
    fn check_cpu(&self, cpu: Cpu) -> Result<()> {
        if self.packages.contains_key(&cpu) {
            Ok(())
        } else {
            Err(Error::InvalidCpu(cpu))
        }
    }

    fn msr_path(&self, cpu: Cpu) -> PathBuf {
        expand_template(&self.config.msr_path_template, cpu)
    }

    fn with_msr<T>(&self, cpu: Cpu, f: impl FnOnce(&File, &Path) -> Result<T>) -> Result<T> {
        self.check_cpu(cpu)?;
        let path = self.msr_path(cpu);
        let mut files = self.msr_files.lock().unwrap_or_else(|e| e.into_inner());
        if let Entry::Vacant(slot) = files.entry(cpu) {
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .open(&path)
                .or_else(|_| OpenOptions::new().read(true).open(&path))
                .map_err(|e| match e.kind() {
                    io::ErrorKind::NotFound => Error::BackendUnavailable(format!(
                        "{} does not exist; {MSR_HINT}",
                        path.display()
                    )),
                    _ => io_error(&path, e, MSR_HINT),
                })?;
            slot.insert(file);
        }
        f(&files[&cpu], &path)
    }

    fn read_msr(&self, cpu: Cpu, address: u32) -> Result<u64> {
        self.with_msr(cpu, |file, path| {
            let mut buf = [0u8; 8];
            file.read_exact_at(&mut buf, address as u64)
                .map_err(|e| match e.kind() {
                    io::ErrorKind::UnexpectedEof => {
                        Error::RegisterUnavailable(format!("0x{address:x} on cpu {cpu}"))
                    }
                    _ => io_error(path, e, MSR_HINT),
                })?;
            Ok(u64::from_le_bytes(buf))
        })
    }

    fn write_msr(&self, cpu: Cpu, address: u32, value: u64) -> Result<()> {
        self.with_msr(cpu, |file, path| {
            file.write_all_at(&value.to_le_bytes(), address as u64)
                .map_err(|e| match e.raw_os_error() {
                    Some(libc::EBADF) => Error::PermissionDenied {
                        path: path.to_path_buf(),
                        hint: MSR_HINT.into(),
                    },
                    Some(libc::EIO) => {
                        Error::RegisterUnavailable(format!("0x{address:x} on cpu {cpu}"))
                    }
                    _ => io_error(path, e, MSR_HINT),
                })
        })
    }

    fn cpufreq(&self, cpu: Cpu, file: &str) -> PathBuf {
        expand_template(&self.config.cpufreq_path_template, cpu).join(file)
    }

    fn available_frequencies(&self, cpu: Cpu) -> Result<Vec<u64>> {
        self.check_cpu(cpu)?;
        let listed = self.cpufreq(cpu, "scaling_available_frequencies");
        let mut freqs: Vec<u64> = match fs::read_to_string(&listed) {
            Ok(s) => s
                .split_whitespace()
                .map(|f| f.parse().map_err(|_| Error::Parse(format!("{}: {f:?}", listed.display()))))
                .collect::<Result<_>>()?,
            Err(_) => {
                let lo: u64 = parse_num(&self.cpufreq(cpu, "cpuinfo_min_freq"))?;
                let hi: u64 = parse_num(&self.cpufreq(cpu, "cpuinfo_max_freq"))?;
                (0..).map(|i| lo + i * 100_000).take_while(|&f| f <= hi).collect()
            }
        };
        freqs.sort_unstable();
        freqs.dedup();
        Ok(freqs)
    }

    fn governor(&self, cpu: Cpu) -> Result<String> {
        self.check_cpu(cpu)?;
        read_trimmed(&self.cpufreq(cpu, "scaling_governor")).map_err(|e| match e {
            Error::Io { .. } => Error::GovernorUnavailable {
                cpu,
                reason: "no cpufreq driver".into(),
            },
            other => other,
        })
    }

    fn set_core_frequency(&self, cpu: Cpu, khz: u64) -> Result<()> {
        if !self.available_frequencies(cpu)?.contains(&khz) {
            return Err(Error::UnsupportedFrequency { cpu, khz });
        }
        let gov = self.governor(cpu)?;
        if gov != "userspace" {
            return Err(Error::GovernorUnavailable {
                cpu,
                reason: format!("governor is {gov:?}, not userspace"),
            });
        }
        write_value(&self.cpufreq(cpu, "scaling_setspeed"), &khz.to_string())
    }

    fn core_frequency(&self, cpu: Cpu) -> Result<u64> {
        self.check_cpu(cpu)?;
        let set = self.cpufreq(cpu, "scaling_setspeed");
        match fs::read_to_string(&set).ok().and_then(|s| s.trim().parse().ok()) {
            Some(khz) => Ok(khz),
            None => parse_num(&self.cpufreq(cpu, "scaling_cur_freq")),
        }
    }

    fn perform(&self, action: Action) -> Result<()> {
        match action {
            Action::WriteMsr { cpu, address, value } => self.write_msr(cpu, address, value),
            Action::SetCoreFrequency { cpu, khz } => self.set_core_frequency(cpu, khz),
        }
    }

    fn wait_until(&self, deadline: u64) {
        loop {
            let now = tsc_begin();
            if now >= deadline {
                return;
            }
            let ns = (deadline - now) as u128 * 1_000_000 / self.tsc_khz as u128;
            if ns > 300_000 {
                std::thread::sleep(Duration::from_nanos((ns - 200_000) as u64));
            } else {
                std::hint::spin_loop();
            }
        }
    }

    fn coordinator_cpu(&self) -> Cpu {
        self.config
            .coordinator_cpu
            .unwrap_or_else(|| *self.cpus.last().unwrap_or(&0))
    }

    fn idle_dir(&self, cpu: Cpu, index: usize) -> PathBuf {
        expand_template(&self.config.cpuidle_path_template, cpu).join(format!("state{index}"))
    }

    fn ensure_on(&self, cpu: Cpu) -> Result<()> {
        self.check_cpu(cpu)?;
        // SAFETY: no arguments.
        let current = unsafe { libc::sched_getcpu() };
        if current < 0 || current as usize != cpu {
            pin_current_thread(cpu)?;
        }
        Ok(())
    }
}

fn parse_num(path: &Path) -> Result<u64> {
    let s = read_trimmed(path)?;
    s.parse()
        .map_err(|_| Error::Parse(format!("{}: {s:?}", path.display())))
}

impl HardwareBackend {
    pub fn open(config: BackendConfig) -> Result<Self> {
        let root = config.cpu_sysfs_root.clone();
        let cpus = match fs::read_to_string(root.join("online")) {
            Ok(s) => parse_cpu_list(&s)?,
            Err(_) => affinity_cpus(),
        };
        if cpus.is_empty() {
            return Err(Error::BackendUnavailable("no online CPUs found".into()));
        }
        let packages = cpus
            .iter()
            .map(|&c| {
                let p = root.join(format!("cpu{c}/topology/physical_package_id"));
                (c, parse_num(&p).unwrap_or(0) as usize)
            })
            .collect();
        let power = match &config.power_source {
            PowerSource::Rapl => match RaplSource::open(&config.powercap_root) {
                Ok(r) => PowerState::Rapl(r),
                Err(e) => PowerState::Unavailable(e.to_string()),
            },
            PowerSource::ExternalFile(p) => PowerState::File(ExternalFileSource::open(p)?),
            PowerSource::Simulated => PowerState::Unavailable(
                "the hardware backend has no simulated power source".into(),
            ),
        };
        let inner = Inner {
            tsc_khz: measure_tsc_khz(),
            timer_overhead: kernels::timer_overhead(),
            config,
            cpus,
            packages,
            msr_files: Mutex::new(HashMap::new()),
            perf_files: Mutex::new(HashMap::new()),
            power: Mutex::new(power),
            actions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            kernels: Mutex::new(HashMap::new()),
            stream: OnceLock::new(),
        };
        Ok(HardwareBackend {
            inner: Arc::new(inner),
        })
    }

    /// Checks up front every privilege the listed needs require and reports
    /// all missing ones in a single error.
    pub fn preflight(&self, cpus: &[Cpu], msr: bool, cpufreq: bool, perf: bool) -> Result<()> {
        let inner = &self.inner;
        let mut problems = Vec::new();
        let mut first_path = None;
        for &cpu in cpus {
            inner.check_cpu(cpu)?;
        }
        let cpu = cpus.first().copied().unwrap_or(inner.cpus[0]);
        if msr {
            let path = inner.msr_path(cpu);
            if let Err(e) = OpenOptions::new().read(true).write(true).open(&path) {
                problems.push(format!("MSR access via {} failed ({e}): {MSR_HINT}", path.display()));
                first_path.get_or_insert(path);
            }
        }
        if cpufreq {
            let path = inner.cpufreq(cpu, "scaling_setspeed");
            if let Err(e) = OpenOptions::new().write(true).open(&path) {
                problems.push(format!("cpufreq control via {} failed ({e}): {SYSFS_HINT}", path.display()));
                first_path.get_or_insert(path);
            }
        }
        if perf {
            if let Err(e) = open_raw_event(cpu, inner.config.registers.throttle_event) {
                problems.push(format!("perf events unavailable ({e})"));
                first_path.get_or_insert(PathBuf::from("perf_event_open"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::PermissionDenied {
                path: first_path.unwrap_or_default(),
                hint: problems.join("; "),
            })
        }
    }

    fn stream_buffer(&self) -> &[u64] {
        self.inner
            .stream
            .get_or_init(|| vec![1u64; STREAM_BYTES / 8])
    }
}

impl Backend for HardwareBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Hardware
    }

    fn tsc_khz(&self) -> u64 {
        self.inner.tsc_khz
    }

    fn timer_overhead_cycles(&self) -> u64 {
        self.inner.timer_overhead
    }

    fn cpus(&self) -> Vec<Cpu> {
        self.inner.cpus.clone()
    }

    fn package_of(&self, cpu: Cpu) -> Result<usize> {
        self.inner.packages.get(&cpu).copied().ok_or(Error::InvalidCpu(cpu))
    }

    fn registers(&self) -> &PlatformRegisters {
        &self.inner.config.registers
    }

    fn uncore_ratio_range(&self) -> (u32, u32) {
        self.inner.config.uncore_ratio_range
    }

    fn now_cycles(&self, cpu: Cpu) -> Result<u64> {
        self.inner.check_cpu(cpu)?;
        Ok(tsc_begin())
    }

    fn read_msr(&self, cpu: Cpu, address: u32) -> Result<u64> {
        self.inner.read_msr(cpu, address)
    }

    fn write_msr(&self, cpu: Cpu, address: u32, value: u64) -> Result<()> {
        self.inner.write_msr(cpu, address, value)
    }

    fn available_frequencies(&self, cpu: Cpu) -> Result<Vec<u64>> {
        self.inner.available_frequencies(cpu)
    }

    fn core_frequency(&self, cpu: Cpu) -> Result<u64> {
        self.inner.core_frequency(cpu)
    }

    fn set_core_frequency(&self, cpu: Cpu, khz: u64) -> Result<()> {
        self.inner.set_core_frequency(cpu, khz)
    }

    fn governor(&self, cpu: Cpu) -> Result<String> {
        self.inner.governor(cpu)
    }

    fn set_governor(&self, cpu: Cpu, governor: &str) -> Result<()> {
        self.inner.check_cpu(cpu)?;
        let path = self.inner.cpufreq(cpu, "scaling_available_governors");
        if let Ok(list) = fs::read_to_string(&path) {
            if !list.split_whitespace().any(|g| g == governor) {
                return Err(Error::GovernorUnavailable {
                    cpu,
                    reason: format!("{governor:?} is not offered ({})", list.trim()),
                });
            }
        }
        write_value(&self.inner.cpufreq(cpu, "scaling_governor"), governor)
    }

    fn read_counter(&self, cpu: Cpu, event: CounterEvent) -> Result<u64> {
        let regs = &self.inner.config.registers;
        let raw = match event {
            CounterEvent::Aperf => return self.read_msr(cpu, regs.aperf),
            CounterEvent::Pperf => return self.read_msr(cpu, regs.pperf),
            CounterEvent::Throttle => regs.throttle_event,
            CounterEvent::License2 => regs.license2_event,
        };
        self.inner.check_cpu(cpu)?;
        let mut files = self.inner.perf_files.lock().unwrap_or_else(|e| e.into_inner());
        if let Entry::Vacant(slot) = files.entry((cpu, event)) {
            slot.insert(open_raw_event(cpu, raw)?);
        }
        let mut buf = [0u8; 8];
        files[&(cpu, event)]
            .read_exact_at(&mut buf, 0)
            .map_err(|e| Error::EventUnavailable(format!("{event} on cpu {cpu}: {e}")))?;
        Ok(u64::from_ne_bytes(buf))
    }

    fn sample_power(&self) -> Result<PowerSample> {
        let mut power = self.inner.power.lock().unwrap_or_else(|e| e.into_inner());
        match &mut *power {
            PowerState::Rapl(r) => r.sample(Duration::from_millis(50)),
            PowerState::File(f) => f.next_sample(),
            PowerState::Unavailable(why) => Err(Error::SourceUnavailable(why.clone())),
        }
    }

    fn pin_to_cpu(&self, cpu: Cpu) -> Result<()> {
        self.inner.check_cpu(cpu)?;
        pin_current_thread(cpu)
    }

    fn current_cpu(&self) -> Result<Cpu> {
        // SAFETY: no arguments.
        let c = unsafe { libc::sched_getcpu() };
        if c < 0 {
            return Err(Error::io("sched_getcpu", io::Error::last_os_error()));
        }
        Ok(c as Cpu)
    }

    fn schedule(&self, at_cycles: u64, action: Action) -> Result<ActionTicket> {
        let target = match action {
            Action::WriteMsr { cpu, .. } | Action::SetCoreFrequency { cpu, .. } => cpu,
        };
        self.inner.check_cpu(target)?;
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let inner = Arc::clone(&self.inner);
        let handle = std::thread::Builder::new()
            .name("eeprobe-coordinator".into())
            .spawn(move || {
                let _ = pin_current_thread(inner.coordinator_cpu());
                inner.wait_until(at_cycles);
                let issued_cycles = tsc_begin();
                inner.perform(action)?;
                let returned_cycles = tsc_end();
                Ok(ActionOutcome {
                    issued_cycles,
                    returned_cycles,
                })
            })
            .map_err(|e| Error::io("spawning coordinator", e))?;
        self.inner
            .actions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, handle);
        Ok(ActionTicket(id))
    }

    fn await_action(&self, ticket: ActionTicket) -> Result<ActionOutcome> {
        let handle = self
            .inner
            .actions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&ticket.0)
            .ok_or_else(|| Error::Invalid(format!("unknown action ticket {}", ticket.0)))?;
        handle
            .join()
            .map_err(|_| Error::Invalid("coordinator thread panicked".into()))?
    }

    fn chase(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        entries: usize,
        accesses_per_entry: usize,
        out: &mut Vec<TraceEntry>,
    ) -> Result<usize> {
        self.inner.ensure_on(cpu)?;
        if accesses_per_entry == 0 {
            return Err(Error::Invalid("an entry needs at least one access".into()));
        }
        let w = kernels::timed_chase(buffer.words(), buffer.word_of(start), entries, accesses_per_entry, out);
        Ok(buffer.slot_of_word(w))
    }

    fn chase_until(
        &self,
        cpu: Cpu,
        buffer: &ChaseBuffer,
        start: usize,
        deadline_cycles: u64,
    ) -> Result<(usize, u64)> {
        self.inner.ensure_on(cpu)?;
        let (w, n) = kernels::chase_until(buffer.words(), buffer.word_of(start), deadline_cycles);
        Ok((buffer.slot_of_word(w), n))
    }

    fn compute_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<u64> {
        self.inner.ensure_on(cpu)?;
        Ok(kernels::compute_until(deadline_cycles))
    }

    fn license_phase_until(
        &self,
        cpu: Cpu,
        kind: PhaseKind,
        deadline_cycles: u64,
        memory: bool,
    ) -> Result<()> {
        self.inner.ensure_on(cpu)?;
        match kind {
            PhaseKind::High => {
                let mem = memory.then(|| self.stream_buffer());
                kernels::fma_until(deadline_cycles, mem)?;
            }
            PhaseKind::Low => {
                kernels::serialize_until(deadline_cycles);
            }
        }
        Ok(())
    }

    fn start_kernel(&self, cpus: &[Cpu], kernel: Kernel) -> Result<KernelHandle> {
        for &c in cpus {
            self.inner.check_cpu(c)?;
        }
        if matches!(kernel, Kernel::Xor { .. }) && !kernels::has_avx512() {
            return Err(Error::BackendUnavailable("AVX-512 is not supported on this CPU".into()));
        }
        let run = Arc::new(AtomicBool::new(true));
        let mut threads = Vec::with_capacity(cpus.len());
        for &c in cpus {
            let run = Arc::clone(&run);
            let started = tsc_begin();
            let h = std::thread::Builder::new()
                .name(format!("eeprobe-kernel-{c}"))
                .spawn(move || {
                    pin_current_thread(c)?;
                    match kernel {
                        Kernel::Compute => Ok(kernels::compute_while(&run)),
                        Kernel::Xor { v1, v2 } => kernels::xor_while(v1.words(), v2.words(), &run),
                    }
                })
                .map_err(|e| Error::io("spawning kernel", e))?;
            threads.push((c, started, h));
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner
            .kernels
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, RunningKernel { run, threads });
        Ok(KernelHandle(id))
    }

    fn stop_kernel(&self, handle: KernelHandle) -> Result<Vec<KernelStats>> {
        let k = self
            .inner
            .kernels
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&handle.0)
            .ok_or_else(|| Error::Invalid(format!("unknown kernel {}", handle.0)))?;
        k.run.store(false, Ordering::Relaxed);
        let stop = tsc_begin();
        let mut stats = Vec::with_capacity(k.threads.len());
        for (cpu, started, h) in k.threads {
            let iterations = h
                .join()
                .map_err(|_| Error::Invalid("kernel thread panicked".into()))??;
            stats.push(KernelStats {
                cpu,
                iterations,
                elapsed_cycles: stop.saturating_sub(started),
            });
        }
        Ok(stats)
    }

    fn sleep_until(&self, cpu: Cpu, deadline_cycles: u64) -> Result<()> {
        self.inner.check_cpu(cpu)?;
        self.inner.wait_until(deadline_cycles);
        Ok(())
    }

    fn idle_states(&self, cpu: Cpu) -> Result<Vec<IdleState>> {
        self.inner.check_cpu(cpu)?;
        let mut out = Vec::new();
        for index in 0.. {
            let dir = self.inner.idle_dir(cpu, index);
            if !dir.is_dir() {
                break;
            }
            out.push(IdleState {
                index,
                name: read_trimmed(&dir.join("name"))?,
                disabled: read_trimmed(&dir.join("disable"))? != "0",
                residency_us: parse_num(&dir.join("time"))?,
            });
        }
        if out.is_empty() {
            return Err(Error::CstateUnavailable(format!("no cpuidle states for cpu {cpu}")));
        }
        Ok(out)
    }

    fn set_idle_state_disabled(&self, cpu: Cpu, index: usize, disabled: bool) -> Result<()> {
        self.inner.check_cpu(cpu)?;
        let dir = self.inner.idle_dir(cpu, index);
        if !dir.is_dir() {
            return Err(Error::CstateUnavailable(format!("state{index} on cpu {cpu}")));
        }
        write_value(&dir.join("disable"), if disabled { "1" } else { "0" })
    }

    fn wake_probe(
        &self,
        caller: Cpu,
        callee: Cpu,
        idle_cycles: u64,
        mode: WakeMode,
    ) -> Result<WakeObservation> {
        self.inner.check_cpu(caller)?;
        self.inner.check_cpu(callee)?;
        if caller == callee {
            return Err(Error::Invalid("caller and callee must differ".into()));
        }
        let signal = (Mutex::new(false), Condvar::new());
        let flag = AtomicBool::new(false);
        let ready = AtomicBool::new(false);
        let idle = Duration::from_nanos((idle_cycles as u128 * 1_000_000 / self.inner.tsc_khz as u128) as u64);
        std::thread::scope(|s| {
            let woke = s.spawn(|| -> Result<u64> {
                if let Err(e) = pin_current_thread(callee) {
                    ready.store(true, Ordering::Release);
                    return Err(e);
                }
                match mode {
                    WakeMode::Block => {
                        let (m, cv) = &signal;
                        let mut go = m.lock().unwrap_or_else(|e| e.into_inner());
                        ready.store(true, Ordering::Release);
                        while !*go {
                            go = cv.wait(go).unwrap_or_else(|e| e.into_inner());
                        }
                        Ok(tsc_begin())
                    }
                    WakeMode::Poll => {
                        ready.store(true, Ordering::Release);
                        while !flag.load(Ordering::Acquire) {
                            std::hint::spin_loop();
                        }
                        Ok(tsc_begin())
                    }
                }
            });
            let signaled = s.spawn(|| -> Result<u64> {
                let pinned = pin_current_thread(caller);
                while !ready.load(Ordering::Acquire) {
                    std::thread::yield_now();
                }
                std::thread::sleep(idle);
                let t = tsc_begin();
                match mode {
                    WakeMode::Block => {
                        let (m, cv) = &signal;
                        *m.lock().unwrap_or_else(|e| e.into_inner()) = true;
                        cv.notify_one();
                    }
                    WakeMode::Poll => flag.store(true, Ordering::Release),
                }
                pinned.map(|_| t)
            });
            let signal_cycles = signaled
                .join()
                .map_err(|_| Error::Invalid("caller thread panicked".into()))??;
            let wake_cycles = woke
                .join()
                .map_err(|_| Error::Invalid("callee thread panicked".into()))??;
            Ok(WakeObservation {
                signal_cycles,
                wake_cycles: wake_cycles.max(signal_cycles + 1),
            })
        })
    }
}
