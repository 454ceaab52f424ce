//! Saving and restoring the machine settings experiments touch.

use serde::{Deserialize, Serialize};

use super::{package_leaders, Backend};
use crate::error::Result;
use crate::model::Cpu;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuKnobs {
    pub cpu: Cpu,
    pub governor: Option<String>,
    pub khz: Option<u64>,
    pub clock_modulation: Option<u64>,
    /// `(state index, disabled)`.
    pub idle_disabled: Vec<(usize, bool)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedKnobs {
    pub cpus: Vec<CpuKnobs>,
    /// Uncore ratio limit register per package leader.
    pub uncore: Vec<(Cpu, u64)>,
}

impl SavedKnobs {
    /// Reads every setting the backend exposes. Unreadable settings are
    /// skipped; they cannot be changed either.
    pub fn capture(backend: &dyn Backend) -> Result<Self> {
        let regs = backend.registers();
        let cpus = backend
            .cpus()
            .into_iter()
            .map(|cpu| CpuKnobs {
                cpu,
                governor: backend.governor(cpu).ok(),
                khz: backend.core_frequency(cpu).ok(),
                clock_modulation: backend.read_msr(cpu, regs.clock_modulation).ok(),
                idle_disabled: backend
                    .idle_states(cpu)
                    .map(|v| v.into_iter().map(|s| (s.index, s.disabled)).collect())
                    .unwrap_or_default(),
            })
            .collect();
        let uncore = package_leaders(backend)?
            .into_iter()
            .filter_map(|cpu| backend.read_msr(cpu, regs.uncore_ratio_limit).ok().map(|v| (cpu, v)))
            .collect();
        Ok(SavedKnobs { cpus, uncore })
    }

    /// Writes back every changed setting. All settings are attempted; the
    /// first error is returned.
    pub fn restore(&self, backend: &dyn Backend) -> Result<()> {
        let now = SavedKnobs::capture(backend)?;
        let regs = backend.registers();
        let mut first: Option<crate::error::Error> = None;
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                first.get_or_insert(e);
            }
        };
        for (k, cur) in self.cpus.iter().zip(&now.cpus) {
            let cpu = k.cpu;
            for &(index, disabled) in &k.idle_disabled {
                if !cur.idle_disabled.contains(&(index, disabled)) {
                    note(backend.set_idle_state_disabled(cpu, index, disabled));
                }
            }
            if let Some(v) = k.clock_modulation {
                if cur.clock_modulation != Some(v) {
                    note(backend.write_msr(cpu, regs.clock_modulation, v));
                }
            }
            let userspace = k.governor.as_deref().is_none_or(|g| g == "userspace");
            if userspace {
                if let Some(g) = &k.governor {
                    if cur.governor.as_ref() != Some(g) {
                        note(backend.set_governor(cpu, g));
                    }
                }
                if let Some(khz) = k.khz {
                    if cur.khz != Some(khz) {
                        note(backend.set_core_frequency(cpu, khz));
                    }
                }
            } else if let Some(g) = &k.governor {
                if cur.governor.as_ref() != Some(g) {
                    note(backend.set_governor(cpu, g));
                }
            }
        }
        for &(cpu, v) in &self.uncore {
            if !now.uncore.contains(&(cpu, v)) {
                note(backend.write_msr(cpu, regs.uncore_ratio_limit, v));
            }
        }
        first.map_or(Ok(()), Err)
    }
}

/// Restores the captured settings when dropped unless [`KnobGuard::restore`]
/// ran first.
pub struct KnobGuard<'a> {
    backend: &'a dyn Backend,
    saved: SavedKnobs,
    done: bool,
}

impl<'a> KnobGuard<'a> {
    pub fn new(backend: &'a dyn Backend) -> Result<Self> {
        Ok(KnobGuard {
            backend,
            saved: SavedKnobs::capture(backend)?,
            done: false,
        })
    }

    pub fn saved(&self) -> &SavedKnobs {
        &self.saved
    }

    pub fn restore(mut self) -> Result<()> {
        self.done = true;
        self.saved.restore(self.backend)
    }
}

impl Drop for KnobGuard<'_> {
    fn drop(&mut self) {
        if !self.done {
            let _ = self.saved.restore(self.backend);
        }
    }
}

/// Runs `f` and restores every setting afterwards, on success and on error.
pub fn with_restored_knobs<T>(backend: &dyn Backend, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let guard = KnobGuard::new(backend)?;
    let result = f();
    let restored = guard.restore();
    let value = result?;
    restored?;
    Ok(value)
}
