//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists.

use clap::Parser;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use eeprobe::analysis;
use eeprobe::chase;
use eeprobe::cli::{build_run_config, execute, Cli};
use eeprobe::datapower;
use eeprobe::hwif::{self, Backend, FaultOp};
use eeprobe::model::{LatencyTrace, TraceEntry};
use eeprobe::transition;

fn err(e: eeprobe::error::Error) -> PyErr {
    if e.is_configuration() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Deterministic model of a two-socket server.
#[pyclass(name = "SimBackend", frozen)]
struct PySimBackend {
    inner: hwif::SimBackend,
}

#[pymethods]
impl PySimBackend {
    #[new]
    #[pyo3(signature = (seed=0, params=None))]
    fn new(py: Python<'_>, seed: u64, params: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let inner = match params {
            Some(p) => hwif::SimBackend::with_parameters(from_py(py, p)?, seed).map_err(err)?,
            None => hwif::SimBackend::with_seed(seed),
        };
        Ok(PySimBackend { inner })
    }

    #[getter]
    fn tsc_khz(&self) -> u64 {
        self.inner.tsc_khz()
    }

    fn cpus(&self) -> Vec<usize> {
        self.inner.cpus()
    }

    fn parameters(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.parameters())
    }

    fn snapshot(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.snapshot())
    }

    fn core_frequency(&self, cpu: usize) -> PyResult<u64> {
        self.inner.core_frequency(cpu).map_err(err)
    }

    fn set_core_frequency(&self, cpu: usize, khz: u64) -> PyResult<()> {
        self.inner.set_core_frequency(cpu, khz).map_err(err)
    }

    /// Makes the `after`-th following call of `op` fail once.
    fn inject_fault(&self, py: Python<'_>, op: &Bound<'_, PyAny>, after: u64) -> PyResult<()> {
        let op: FaultOp = from_py(py, op)?;
        self.inner.inject_fault(op, after);
        Ok(())
    }

    /// Runs one experiment given command-line style arguments and returns
    /// the report.
    fn run(&self, py: Python<'_>, args: Vec<String>) -> PyResult<Py<PyAny>> {
        let argv = std::iter::once("eeprobe".to_string()).chain(args);
        let cli = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let run = build_run_config(&cli.global, &cli.command, &self.inner, None).map_err(err)?;
        let outcome = py.detach(|| execute(&self.inner, &run)).map_err(err)?;
        to_py(py, &outcome.report)
    }

    fn __repr__(&self) -> String {
        format!("SimBackend(cpus={}, tsc_khz={})", self.inner.cpus().len(), self.inner.tsc_khz())
    }
}

/// Random single-cycle pointer chase.
#[pyclass(name = "ChaseBuffer", frozen)]
struct PyChaseBuffer {
    inner: chase::ChaseBuffer,
}

#[pymethods]
impl PyChaseBuffer {
    #[new]
    #[pyo3(signature = (num_lines, seed=0, stride_bytes=chase::CACHE_LINE_BYTES))]
    fn new(num_lines: usize, seed: u64, stride_bytes: usize) -> PyResult<Self> {
        let inner = chase::build_chase(num_lines, stride_bytes, seed).map_err(err)?;
        Ok(PyChaseBuffer { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.num_lines()
    }

    fn next(&self, slot: usize) -> PyResult<usize> {
        if slot >= self.inner.num_lines() {
            return Err(PyValueError::new_err(format!("slot {slot} out of range")));
        }
        Ok(self.inner.next(slot))
    }

    fn advance(&self, slot: usize, hops: u64) -> PyResult<usize> {
        if slot >= self.inner.num_lines() {
            return Err(PyValueError::new_err(format!("slot {slot} out of range")));
        }
        Ok(self.inner.advance(slot, hops))
    }

    fn permutation(&self) -> Vec<usize> {
        self.inner.permutation()
    }

    #[getter]
    fn footprint_bytes(&self) -> usize {
        self.inner.footprint_bytes()
    }
}

/// Index, size in cycles and size in µs of the largest entry above the
/// threshold, or None.
#[pyfunction]
#[pyo3(signature = (durations, tsc_khz, threshold_cycles=transition::DEFAULT_THRESHOLD_CYCLES))]
fn detect_transition(durations: Vec<u64>, tsc_khz: u64, threshold_cycles: u64) -> PyResult<Option<(usize, u64, f64)>> {
    let mut t = 0u64;
    let entries = durations
        .into_iter()
        .map(|d| {
            t += d;
            TraceEntry {
                timestamp_cycles: t,
                duration_cycles: d,
            }
        })
        .collect();
    let trace = LatencyTrace::new(entries, tsc_khz).map_err(err)?;
    Ok(transition::detect_transition(&trace, threshold_cycles).map(|e| (e.index, e.gap_cycles, e.gap_us)))
}

#[pyfunction]
fn least_squares(py: Python<'_>, names: Vec<String>, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Py<PyAny>> {
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let fit = analysis::least_squares(&refs, &x, &y).map_err(err)?;
    to_py(py, &fit)
}

#[pyfunction]
fn summarize(py: Python<'_>, samples: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &analysis::summarize(&samples).map_err(err)?)
}

/// 512-bit operand with `popcount` set bits as a hex string.
#[pyfunction]
#[pyo3(signature = (popcount, seed=0))]
fn make_operand(popcount: u32, seed: u64) -> PyResult<String> {
    datapower::make_operand(popcount, datapower::OPERAND_BITS, seed)
        .map(|o| o.to_hex())
        .map_err(err)
}

#[pyfunction]
fn trim_samples(samples: Vec<f64>) -> PyResult<Vec<f64>> {
    datapower::trim_samples(&samples, datapower::TRIM_HEAD, datapower::TRIM_TAIL).map_err(err)
}

#[pymodule]
fn eeprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySimBackend>()?;
    m.add_class::<PyChaseBuffer>()?;
    m.add_function(wrap_pyfunction!(detect_transition, m)?)?;
    m.add_function(wrap_pyfunction!(least_squares, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(make_operand, m)?)?;
    m.add_function(wrap_pyfunction!(trim_samples, m)?)?;
    let experiments = PyDict::new(m.py());
    for (name, summary) in [
        ("pstate", "core frequency transition delay"),
        ("ufs-forced", "uncore transitions forced through the ratio limit"),
        ("ufs-loop", "uncore control loop reaction time"),
        ("cstate", "idle state wake-up latency"),
        ("avx", "AVX-512 license accounting"),
        ("datapower", "operand-dependent power sweep"),
        ("tstate", "clock modulation duty cycle"),
        ("pperf", "productive cycle counter ratio"),
    ] {
        experiments.set_item(name, summary)?;
    }
    m.add("EXPERIMENTS", experiments)?;
    Ok(())
}
