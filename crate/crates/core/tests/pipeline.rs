use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use callslot::domain::{read_log, write_log, LogFormat, LOG_HEADER};
use callslot::matcomp::{complete, recency_split, rmse_on};
use callslot::simworld::{generate_world, run_trial, TrialDesign, WorldConfig};
use serde_json::Value;

fn callslot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_callslot"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CALLSLOT_OUT")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/report.schema.json");
    jsonschema::validator_for(&read_json(&path)).unwrap()
}

fn assert_valid(v: &Value) {
    let validator = schema();
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn smoke_config(dir: &Path, users: usize, seeds: u32) -> PathBuf {
    let p = dir.join("smoke.toml");
    std::fs::write(
        &p,
        format!("n_seeds = {seeds}\nseed = 3\n[world]\nn_users = {users}\n[analysis.bootstrap]\nresamples = 200\n"),
    )
    .unwrap();
    p
}

fn write_csv(dir: &Path, name: &str, rows: &[String]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{}\n{}\n", LOG_HEADER.join(","), rows.join("\n"))).unwrap();
    p
}

#[test]
fn simulator_log_round_trips() {
    let world = generate_world(&WorldConfig {
        n_users: 1200,
        dropout_rate_per_week: 0.05,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let log = run_trial(&world, &TrialDesign { seed: 2, ..Default::default() }).unwrap();
    assert!(log.len() >= 10_000, "{}", log.len());
    let mut buf = Vec::new();
    write_log(&log, &mut buf).unwrap();
    let back = read_log(buf.as_slice(), LogFormat::default()).unwrap();
    assert_eq!(back.records(), log.records());
}

#[test]
fn simulate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 50, 2);
    let t0 = Instant::now();
    let out = callslot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t0.elapsed() < Duration::from_secs(10));
    let o = dir.path().join("out");
    for f in ["calls_seed3.csv", "calls_seed4.csv", "report.json", "report.txt", "call_distribution.csv"] {
        assert!(o.join(f).exists(), "{f}");
    }
    let report = read_json(&o.join("report.json"));
    assert_valid(&report);
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("int_t") && stdout.contains("p_mid"), "{stdout}");
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 30, 1);
    let out = Command::new(env!("CARGO_BIN_EXE_callslot"))
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .current_dir(dir.path())
        .env("CALLSLOT_OUT", dir.path().join("from_env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/report.json").exists());
}

#[test]
fn invalid_config_fails_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[trial]\nbaseline_days = 0\n").unwrap();
    let out = callslot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trial.baseline_days"));
    assert!(!dir.path().join("o/report.json").exists());

    let missing = callslot(&["analyze", "--log", "nope.csv", "--out", "o"], dir.path());
    assert!(!missing.status.success());
}

#[test]
fn default_config_has_table_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = callslot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("o/report.json"));
    assert_valid(&report);
    let r = &report["runs"][0]["report"];
    assert!(r["pooled"]["baseline"].is_object() && r["pooled"]["intervention"].is_object());
    let tiers: Vec<&str> = r["tiers"]["rows"].as_array().unwrap().iter().map(|t| t["tier"].as_str().unwrap()).collect();
    assert_eq!(tiers, ["high", "mid", "low"]);
    assert_eq!(r["slots"]["rows"].as_array().unwrap().len(), 7);
    assert_eq!(r["slots"]["population"], "mid_tier");
    // treatment High tier is all PR_i = 1 users whenever treatment sets the top fraction
    let t = &r["tiers"];
    if t["perfect_share"]["treatment"].as_f64() >= t["perfect_share"]["control"].as_f64() {
        assert_eq!(t["rows"][0]["comparison"]["rate"]["treatment"], 1.0);
    }
}

#[test]
fn analyze_agrees_with_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 200, 1);
    assert!(callslot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "sim"], dir.path()).status.success());
    let sim = read_json(&dir.path().join("sim/report.json"));
    let out = callslot(
        &[
            "analyze",
            "--log",
            "sim/calls_seed3.csv",
            "--dropout",
            "sim/dropouts_seed3.csv",
            "--seed",
            "3",
            "--resamples",
            "200",
            "--out",
            "an",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let an = read_json(&dir.path().join("an/report.json"));
    assert_valid(&an);
    // bit-identical, including the bootstrap with the same seed
    assert_eq!(an, sim["runs"][0]["report"]);
}

#[test]
fn analyze_baseline_only_and_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<String> = [
        "1,1,0,0,1,1,baseline,control",
        "1,1,0,1,1,0,baseline,control",
        "2,4,3,0,1,1,baseline,control",
        "3,7,5,0,1,1,baseline,control",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let log = write_csv(dir.path(), "tiny.csv", &rows);
    let out = callslot(&["analyze", "--log", log.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&dir.path().join("o/report.json"));
    assert_valid(&r);
    assert_eq!(r["pooled"]["baseline"]["rate"]["control"], 0.75);
    assert!(r["pooled"]["intervention"].is_null());
    assert!(r["tiers"].is_null() && r["slots"].is_null() && r["off_policy"].is_null());
}

#[test]
fn tune_picks_grid_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&WorldConfig {
        n_users: 300,
        rank: 2,
        noise_sd: 0.0,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let log = run_trial(&world, &TrialDesign { seed: 8, ..Default::default() }).unwrap();
    let path = dir.path().join("calls.csv");
    write_log(&log, std::fs::File::create(&path).unwrap()).unwrap();

    let out = callslot(&["tune", "--log", path.to_str().unwrap(), "--out", "t"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = read_json(&dir.path().join("t/tune.json"));
    assert_eq!(t["holdout_fraction"], 0.2);
    let chosen = t["result"]["best_lambda"].as_f64().unwrap();

    // recompute every grid point on the same split
    let (base, _) = callslot::domain::split_by_phase(&log, 21);
    let (_, obs) = callslot::cli::observations_from_log(&base).unwrap();
    let (train, val) = recency_split(&obs, 0.2).unwrap();
    let scores: Vec<(f64, f64)> = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0]
        .iter()
        .map(|&l| (l, rmse_on(&val, &complete(&train, l, 1e-6, 500).unwrap().values)))
        .collect();
    let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let best = scores.iter().filter(|s| s.1 == min).map(|s| s.0).fold(0.0, f64::max);
    assert_eq!(chosen, best, "{scores:?}");

    let out = callslot(&["tune", "--log", path.to_str().unwrap(), "--grid", "0.7", "--max-iter", "5000", "--out", "t1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&dir.path().join("t1/tune.json"))["result"]["best_lambda"], 0.7);
}

#[test]
fn replay_commands() {
    let dir = tempfile::tempdir().unwrap();
    // hand fixture: every user picks up in slot 3 during the baseline, then
    // one picked call per slot in the intervention
    let mut rows = Vec::new();
    for u in 1..=7 {
        rows.push(format!("{u},3,0,0,1,1,baseline,control"));
        rows.push(format!("{u},{u},21,0,1,1,intervention,control"));
    }
    let fixture = write_csv(dir.path(), "seven.csv", &rows);
    let out = callslot(
        &["replay", "--log", fixture.to_str().unwrap(), "--assume-uniform", "--resamples", "50", "--out", "r"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&dir.path().join("r/replay.json"));
    assert_eq!(r["v_q"]["point"], 1.0);
    assert_eq!(r["n_calls"], 7);

    // behavior must be stated
    let out = callslot(&["replay", "--log", fixture.to_str().unwrap(), "--out", "r"], dir.path());
    assert!(!out.status.success());

    // zero-probability slot in the behavior file
    let b = dir.path().join("b.csv");
    std::fs::write(&b, "slot,prob\n1,0.25\n2,0.25\n3,0.25\n4,0.25\n5,0\n6,0\n7,0\n").unwrap();
    let out = callslot(
        &["replay", "--log", fixture.to_str().unwrap(), "--behavior", b.to_str().unwrap(), "--out", "r"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero"));

    // synthetic control arm: uniform target reproduces the pooled rate
    let cfg = smoke_config(dir.path(), 300, 1);
    assert!(callslot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "sim"], dir.path()).status.success());
    for (target, out_dir) in [("uniform", "u"), ("per-user-exploit", "e")] {
        let out = callslot(
            &[
                "replay",
                "--log",
                "sim/calls_seed3.csv",
                "--dropout",
                "sim/dropouts_seed3.csv",
                "--assume-uniform",
                "--target",
                target,
                "--resamples",
                "300",
                "--out",
                out_dir,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let r = read_json(&dir.path().join(out_dir).join("replay.json"));
        for k in ["v_q", "pooled"] {
            assert!(r[k]["low"].as_f64() <= r[k]["point"].as_f64());
            assert!(r[k]["point"].as_f64() <= r[k]["high"].as_f64());
        }
        if target == "uniform" {
            assert_eq!(r["v_q"]["point"], r["pooled"]["point"]);
        }
    }
}
