use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eeprobe::cli::{build_run_config, execute, Cli, Platform, EXIT_CONFIG};
use eeprobe::hwif::{Backend, FaultOp, SimBackend, SimParameters};
use clap::Parser;

fn eeprobe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eeprobe"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EEPROBE_BACKEND")
        .env_remove("EEPROBE_MSR_PATH")
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pstate_writes_report_samples_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let o = eeprobe(&["pstate", "--backend", "sim", "--from", "1500000", "--to", "2600000", "--reps", "1000"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("pstate.json"));
    assert_eq!(r["schema"], 1);
    assert_eq!(r["truncated"], false);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert!(r["summary"]["delay_us"]["max"].as_f64().unwrap() <= 500.0 + r["results"]["resolution_us"].as_f64().unwrap());
    let hist = fs::read_to_string(dir.path().join("pstate_hist.dat")).unwrap();
    assert!(hist.starts_with("# "));
    let last = hist.lines().last().unwrap();
    let center: f64 = last.split(' ').next().unwrap().parse().unwrap();
    assert!(center < 500.0);
    let csv = fs::read_to_string(dir.path().join("pstate_samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001);
}

#[test]
fn avx_long_run_has_150_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let o = eeprobe(&["avx", "--backend", "sim", "-l", "50", "-p", "2000000", "-t", "300", "--cpus", "0-1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("avx.json"));
    let phases = r["results"].as_array().unwrap();
    for cpu in [0, 1] {
        let high = phases.iter().filter(|p| p["cpu"] == cpu && p["record"]["kind"] == "High").count();
        assert_eq!(high, 150);
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = eeprobe(&["pstate", "--backend", "sim", "--from", "999"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = eeprobe(&["pstate", "--backend", "sim", "--cpu", "9999"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = eeprobe(&["nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = eeprobe(&["avx", "--backend", "sim", "-l", "150"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn hardware_without_msr_access_exits_with_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let o = eeprobe(&["ufs-loop", "--backend", "hw", "--msr-path", "/nonexistent/{cpu}/msr"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("msr"), "{err}");
}

#[test]
fn backend_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eeprobe"))
        .args(["tstate", "--level", "8", "--json", "--out"])
        .arg(dir.path())
        .env("EEPROBE_BACKEND", "sim")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["backend"], "simulation");
    assert_eq!(r["results"][0]["level"], 8);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["ufs-forced", "--backend", "sim", "--reps", "50", "--seed", "5"];
    assert_eq!(eeprobe(&args, a.path()).status.code(), Some(0));
    assert_eq!(eeprobe(&args, b.path()).status.code(), Some(0));
    for f in ["ufs-forced.json", "ufs-forced_samples.csv", "ufs-forced_hist.dat"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = tempfile::tempdir().unwrap();
    let args = ["ufs-forced", "--backend", "sim", "--reps", "50", "--seed", "6"];
    assert_eq!(eeprobe(&args, other.path()).status.code(), Some(0));
    assert_ne!(
        read_json(&a.path().join("ufs-forced.json"))["config_hash"],
        read_json(&other.path().join("ufs-forced.json"))["config_hash"]
    );
}

#[test]
fn aux_runs_share_one_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(eeprobe(&["tstate", "--backend", "sim", "--level", "4"], dir.path()).status.code(), Some(0));
    assert_eq!(eeprobe(&["pperf", "--backend", "sim", "--workload", "compute"], dir.path()).status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("aux.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("experiment,level,nominal_duty,effective_duty"));
    assert!(lines[1].starts_with("tstate,4,0.25,"));
    assert!(lines[2].starts_with("pperf,,,,compute,1"));
}

#[test]
fn calibration_is_repeatable_and_reusable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(eeprobe(&["calibrate", "--backend", "sim", "--accesses", "5000"], d.path()).status.code(), Some(0));
    }
    let pa = fs::read(a.path().join("platform.json")).unwrap();
    assert_eq!(pa, fs::read(b.path().join("platform.json")).unwrap());
    let p: Platform = serde_json::from_slice(&pa).unwrap();
    let params = SimParameters::default();
    assert_eq!(p.tsc_khz, params.tsc_khz);
    assert_eq!(p.timer_overhead_cycles, params.timer_overhead_cycles);
    assert_eq!(p.core_frequencies_khz, params.core_frequencies());
    assert_eq!(p.cpus.len(), params.packages * params.cores_per_package);
    let llc = p.chase_baseline_cycles[&eeprobe::chase::ChasePreset::Llc];
    assert!((llc - params.ufs_llc_cycles_high).abs() < 1.0, "{llc}");
    let l1 = p.chase_baseline_cycles[&eeprobe::chase::ChasePreset::L1];
    assert!(l1 < llc);

    let platform = a.path().join("platform.json");
    let o = eeprobe(
        &["chase-calibrate", "--backend", "sim", "--accesses", "5000", "--platform", platform.to_str().unwrap()],
        b.path(),
    );
    assert_eq!(o.status.code(), Some(0));
}

fn run_args(sim: &SimBackend, args: &[&str]) -> eeprobe::cli::RunConfig {
    let cli = Cli::try_parse_from(std::iter::once("eeprobe").chain(args.iter().copied())).unwrap();
    build_run_config(&cli.global, &cli.command, sim, None).unwrap()
}

#[test]
fn governor_must_be_userspace_unless_forced() {
    let sim = SimBackend::with_seed(0);
    sim.set_governor(0, "performance").unwrap();
    let before = sim.snapshot().knobs;
    let err = execute(&sim, &run_args(&sim, &["pstate", "--reps", "3"])).unwrap_err();
    assert!(err.is_configuration());
    assert_eq!(sim.snapshot().knobs, before);
    execute(&sim, &run_args(&sim, &["pstate", "--reps", "3", "--force"])).unwrap();
    assert_eq!(sim.snapshot().knobs, before);
    assert_eq!(sim.governor(0).unwrap(), "performance");
}

#[test]
fn knobs_survive_injected_faults() {
    let cases: [(&[&str], FaultOp); 4] = [
        (&["ufs-forced", "--reps", "20"], FaultOp::Chase),
        (&["cstate", "--reps", "5", "--cstates", "C1E"], FaultOp::WakeProbe),
        (&["tstate", "--level", "3"], FaultOp::ComputeUntil),
        (&["avx", "-t", "4", "--cpus", "0"], FaultOp::LicensePhase),
    ];
    for (args, fault) in cases {
        let sim = SimBackend::with_seed(1);
        let before = sim.snapshot().knobs;
        let run = run_args(&sim, args);
        sim.inject_fault(fault, 1);
        assert!(execute(&sim, &run).is_err(), "{args:?}");
        assert_eq!(sim.snapshot().knobs, before, "{args:?}");
    }
}
