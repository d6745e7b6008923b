use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use nvlab_core::apparatus::ApparatusConfig;
use nvlab_core::experiment::{Dataset, Experiment, ExperimentSpec};
use nvlab_core::photophysics::{polarize, readout_window, CalibrationTargets, LevelPopulations, G1};
use nvlab_core::pulse::{sequence_rabi, CompiledPattern, Layout};

fn nvlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvlab"))
        .current_dir(dir)
        .env_remove("NVLAB_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn write_spec(dir: &Path, name: &str, spec: &ExperimentSpec) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn odmr_spec() -> ExperimentSpec {
    let freqs = (0..41).map(|i| 2.76e9 + i as f64 * 5e6).collect();
    ExperimentSpec::new(11, Experiment::CwOdmr { frequencies: freqs, power_dbm: None, dwell: 0.1, period: 20e-6 })
}

#[test]
fn run_twice_gives_identical_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let durations = (0..41).map(|i| i as f64 * 5e-9).collect();
    let spec = ExperimentSpec::new(3, Experiment::Rabi { durations, frequency: 2.8e9, power_dbm: None });
    let spec = write_spec(dir.path(), "rabi.spec", &spec);
    let a = ok_json(&nvlab(dir.path(), &["--preset", "rabi", "--data-dir", "a", "run", &spec, "--out", "a.json"]));
    let b = ok_json(&nvlab(dir.path(), &["--preset", "rabi", "--data-dir", "b", "run", &spec, "--out", "b.json"]));
    assert_eq!(a["dataset"], b["dataset"]);
    let (fa, fb) = (fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(fa, fb);
    let id = a["dataset"].as_str().unwrap();
    assert_eq!(fs::read(dir.path().join("a").join(format!("{id}.json"))).unwrap(), fa);

    // Re-running into the same store is a no-op, not an overwrite.
    ok_json(&nvlab(dir.path(), &["--preset", "rabi", "--data-dir", "a", "run", &spec]));
    assert_eq!(fs::read(dir.path().join("a").join(format!("{id}.json"))).unwrap(), fa);

    let c = ok_json(&nvlab(dir.path(), &["--preset", "rabi", "--data-dir", "a", "--seed", "2", "run", &spec]));
    assert_ne!(c["dataset"], a["dataset"]);
}

#[test]
fn replay_of_an_odmr_session_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "odmr.json", &odmr_spec());
    let run = ok_json(&nvlab(dir.path(), &["--preset", "odmr_28g", "--data-dir", "data", "run", &spec]));
    let id = run["dataset"].as_str().unwrap();
    let log = format!("data/{id}.commands.json");
    let out = ok_json(&nvlab(dir.path(), &["replay", &log]));
    assert_eq!(out["replayed"], true);
    assert_eq!(out["dataset"], id);

    // The log carries its own config and seed: flags do not matter.
    ok_json(&nvlab(dir.path(), &["--preset", "survey", "--seed", "99", "replay", &log]));

    let dataset = dir.path().join("data").join(format!("{id}.json"));
    let text = fs::read_to_string(&dataset).unwrap();
    let mut d = Dataset::from_json(&text).unwrap();
    d.signal[3] *= 1.0 + 1e-12;
    fs::write(dir.path().join("edited.json"), d.to_json()).unwrap();
    let e = err_json(&nvlab(dir.path(), &["replay", &log, "--dataset", "edited.json"]));
    assert_eq!(e["error"]["code"], "replay_mismatch");

    let mut l: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(&log)).unwrap()).unwrap();
    l["entries"][5]["digest"] = Value::from("00");
    fs::write(dir.path().join("edited.commands.json"), l.to_string()).unwrap();
    let out = nvlab(dir.path(), &["replay", "edited.commands.json", "--dataset", dataset.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(7));
}

#[test]
fn calibrate_photophysics_writes_rates_meeting_the_targets() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok_json(&nvlab(dir.path(), &["calibrate-photophysics", "--out", "bench.toml"]));
    let config = ApparatusConfig::from_toml(&fs::read_to_string(dir.path().join("bench.toml")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(config.rates).unwrap(), report["rates"]);

    let t = CalibrationTargets::default();
    let pol = polarize(&LevelPopulations::level(G1), &config.rates).unwrap().ground_polarization();
    let contrast = readout_window(&config.rates, t.window).unwrap().contrast;
    assert!((pol - 0.80).abs() < 0.01, "polarization {pol}");
    assert!((contrast - 0.30).abs() < 0.01, "contrast {contrast}");

    // The written file is a usable apparatus config.
    fs::write(dir.path().join("nvlab.toml"), "schema_version = \"nvlab.service/1\"\napparatus = \"bench.toml\"\n").unwrap();
    let out = ok_json(&nvlab(dir.path(), &["--config", "nvlab.toml", "tags", "--duration", "0.01", "--out", "t.csv"]));
    assert!(out["counts"][0].as_u64().unwrap() > 0);
    assert!(fs::read_to_string(dir.path().join("t.csv")).unwrap().starts_with("channel,timestamp_ps\n"));
}

#[test]
fn config_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvlab(dir.path(), &["--config", "missing.toml", "scan"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(err_json(&out)["error"]["code"], "config_not_found");

    fs::write(dir.path().join("old.toml"), "schema_version = \"nvlab.service/0\"\n").unwrap();
    let out = nvlab(dir.path(), &["--config", "old.toml", "scan"]);
    assert_eq!(out.status.code(), Some(4));
    let e = err_json(&out);
    assert_eq!(e["error"]["code"], "schema");
    let msg = e["error"]["message"].as_str().unwrap();
    assert!(msg.contains("nvlab.service/0") && msg.contains("nvlab.service/1"), "{msg}");

    // The environment variable is honoured.
    let out = Command::new(env!("CARGO_BIN_EXE_nvlab"))
        .current_dir(dir.path())
        .env("NVLAB_CONFIG", "old.toml")
        .arg("scan")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    let out = nvlab(dir.path(), &["run", "nope.json"]);
    assert_eq!(out.status.code(), Some(5));
    fs::write(dir.path().join("bad.json"), "{\"schema\": \"nvlab.experiment/1\", \"seed\": 1}").unwrap();
    let out = nvlab(dir.path(), &["run", "bad.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(err_json(&out)["error"]["code"], "invalid");
}

#[test]
fn scan_and_fit_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let scan = ok_json(&nvlab(
        dir.path(),
        &["--data-dir", "d", "scan", "--origin", "95,95,10", "--width", "2", "--height", "2", "--step", "0.5"],
    ));
    assert_eq!(scan["points"], 25);
    assert_eq!(scan["kind"], "confocal_scan");

    let spec = write_spec(dir.path(), "odmr.json", &odmr_spec());
    let run = ok_json(&nvlab(dir.path(), &["--preset", "odmr_28g", "--data-dir", "d", "run", &spec, "--out", "o.json"]));
    let id = run["dataset"].as_str().unwrap();
    for target in [id, "o.json"] {
        let fit = ok_json(&nvlab(dir.path(), &["--data-dir", "d", "fit", "double_lorentzian", target, "--csv", "plot.csv"]));
        assert_eq!(fit["result"]["model"], "double_lorentzian");
        assert_eq!(fit["dataset"], id);
        let csv = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("x,y,y_fit,residual"));
        assert_eq!(csv.lines().count(), 42);
    }
    let fit = ok_json(&nvlab(dir.path(), &["--data-dir", "d", "fit", "gaussian_peak", "o.json", "--range", "2.76e9,2.85e9"]));
    assert!(fit["result"]["params"].is_array());
    let out = nvlab(dir.path(), &["--data-dir", "d", "fit", "sawtooth", "o.json"]);
    assert_eq!(out.status.code(), Some(2), "clap rejects unknown models");
}

#[test]
fn pulse_compile_and_diagram() {
    let dir = tempfile::tempdir().unwrap();
    let ir = sequence_rabi(&[40e-9], Layout::default()).unwrap().at(0).unwrap();
    fs::write(dir.path().join("rabi.ir.json"), ir.to_json()).unwrap();

    let out = nvlab(dir.path(), &["pulse", "compile", "rabi.ir.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pattern = CompiledPattern::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert!(!pattern.channels.is_empty());

    let out = nvlab(dir.path(), &["pulse", "diagram", "rabi.ir.json", "--backend", "discovery"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success());
    assert!(text.lines().count() >= 3, "{text}");
    let json = ok_json(&nvlab(dir.path(), &["pulse", "diagram", "rabi.ir.json", "--json"]));
    assert!(json["channels"].is_array());

    fs::write(dir.path().join("junk.json"), "{\"schema\": \"nvlab.sequence/7\"}").unwrap();
    let out = nvlab(dir.path(), &["pulse", "compile", "junk.json"]);
    assert_eq!(out.status.code(), Some(4));
}
