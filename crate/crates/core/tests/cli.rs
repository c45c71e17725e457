use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn homedetect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homedetect"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = homedetect(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

/// Synthetic traces, land use and zones for 40 agents.
fn synth(dir: &Path) {
    ok(&["--out-dir", dir.to_str().unwrap(), "--seed", "3", "synth", "--agents", "40", "--nights", "10"]);
}

#[test]
fn detect_writes_five_tables_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let input = d.path().join("traces.csv");
    ok(&["--out-dir", dir, "detect", "--input", input.to_str().unwrap()]);
    for a in ["a1", "a2", "a3", "a4", "a5"] {
        let rows = lines(&d.path().join(format!("homes_{a}.csv")));
        assert_eq!(rows[0], "device_id,algorithm,lat,lon,support");
        assert!(rows.len() > 30, "{a}: {}", rows.len());
        assert!(rows[1].split(',').nth(1) == Some(a));
    }
    let m = json(&d.path().join("manifest_detect.json"));
    assert_eq!(m["tool"], "homedetect");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["stats"]["users"], 40);
    assert_eq!(m["stats"]["malformed_rows"], 0);
    assert!(m["config"]["hda"]["grid_cell_m"].is_number());
    assert!(m["config"].get("threads").is_none());
}

#[test]
fn algorithm_filter_limits_tables() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let input = d.path().join("traces.csv");
    ok(&["--out-dir", dir, "detect", "--input", input.to_str().unwrap(), "--algorithms", "a2,a4"]);
    let homes: Vec<String> = fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("homes_"))
        .collect();
    let mut homes = homes;
    homes.sort();
    assert_eq!(homes, vec!["homes_a2.csv", "homes_a4.csv"]);
}

#[test]
fn corrupt_row_is_counted_not_fatal() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let path = d.path().join("traces.csv");
    let mut rows = lines(&path);
    rows.insert(rows.len() / 2, "agent0001,not-a-number,40.0,1641600000,5".into());
    fs::write(&path, rows.join("\n") + "\n").unwrap();
    ok(&["--out-dir", dir, "detect", "--input", path.to_str().unwrap()]);
    let m = json(&d.path().join("manifest_detect.json"));
    assert_eq!(m["stats"]["malformed_rows"], 1);
}

#[test]
fn missing_input_exits_with_input_error_and_leaves_nothing() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let res = homedetect(&["--out-dir", out.to_str().unwrap(), "detect", "--input", "/nonexistent/traces.csv"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
    assert_eq!(fs::read_dir(&out).map(|r| r.count()).unwrap_or(0), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(homedetect(&["detect", "--bogus"]).status.code(), Some(1));
    assert_eq!(homedetect(&["frobnicate"]).status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    let res = homedetect(&["--out-dir", d.path().to_str().unwrap(), "--night-window", "25:00-05:00", "synth"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(homedetect(&["--version"]).status.code(), Some(0));
}

#[test]
fn evaluate_metric_selection_and_land_use_rule() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let input = d.path().join("traces.csv");
    let input = input.to_str().unwrap();
    ok(&["--out-dir", dir, "detect", "--input", input]);

    // M1 without land use is refused, and nothing is left behind
    let res = homedetect(&["--out-dir", dir, "evaluate", "--input", input]);
    assert_ne!(res.status.code(), Some(0));
    assert!(!d.path().join("metrics.json").exists());

    ok(&["--out-dir", dir, "evaluate", "--input", input, "--metrics", "m2,m3"]);
    let m = json(&d.path().join("metrics.json"));
    let algs = m["algorithms"].as_array().unwrap();
    assert_eq!(algs.len(), 5);
    assert!(algs.iter().all(|a| a["m1"].is_null() && a["m2"].is_number() && a["m3"].is_number()));

    let lu = d.path().join("land_use.geojson");
    ok(&["--out-dir", dir, "evaluate", "--input", input, "--land-use", lu.to_str().unwrap()]);
    let m = json(&d.path().join("metrics.json"));
    assert!(m["baseline_m1"].is_number());
    for a in m["algorithms"].as_array().unwrap() {
        for k in ["m1", "m2", "m3", "mean"] {
            let v = a[k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{k} = {v}");
        }
    }
    let radar = lines(&d.path().join("radar.csv"));
    assert_eq!(radar[0], "algorithm,m1,m2,m3,mean,n_users");
    assert_eq!(radar.len(), 6);
    assert_eq!(lines(&d.path().join("rho.csv")).len(), 1 + 5 * 11);
    assert!(d.path().join("manifest_evaluate.json").exists());
}

#[test]
fn truth_homes_score_full_residential_rate() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let truth = lines(&d.path().join("truth.csv"));
    let mut table = vec!["device_id,algorithm,lat,lon,support".to_string()];
    for row in &truth[1..] {
        let f: Vec<&str> = row.split(',').collect();
        table.push(format!("{},a1,{},{},0", f[0], f[1], f[2]));
    }
    let homes_dir = d.path().join("truth_homes");
    fs::create_dir(&homes_dir).unwrap();
    fs::write(homes_dir.join("homes_a1.csv"), table.join("\n") + "\n").unwrap();
    let input = d.path().join("traces.csv");
    let lu = d.path().join("land_use.geojson");
    ok(&[
        "--out-dir",
        dir,
        "evaluate",
        "--input",
        input.to_str().unwrap(),
        "--homes-dir",
        homes_dir.to_str().unwrap(),
        "--land-use",
        lu.to_str().unwrap(),
        "--algorithms",
        "a1",
    ]);
    let m = json(&d.path().join("metrics.json"));
    assert_eq!(m["algorithms"][0]["m1"].as_f64(), Some(1.0));
}

#[test]
fn sensitivity_has_a_row_per_algorithm_and_threshold() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let input = d.path().join("traces.csv");
    let input = input.to_str().unwrap();
    ok(&["--out-dir", dir, "detect", "--input", input]);
    ok(&["--out-dir", dir, "sensitivity", "--input", input, "--metrics", "m2,m3"]);
    let rows = lines(&d.path().join("sensitivity.csv"));
    assert_eq!(rows[0], "algorithm,threshold,m1,m2,m3,mean,n_users,cdf_below");
    assert_eq!(rows.len(), 1 + 5 * 9);
    // the top thresholds exceed every user's quality: absent rows with no users
    assert!(rows.last().unwrap().ends_with(",0,1"));

    let res = homedetect(&["--out-dir", dir, "sensitivity", "--input", input, "--metrics", "m2", "--thresholds", "5,1"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn apps_commands() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    synth(d.path());
    let input = d.path().join("traces.csv");
    ok(&["--out-dir", dir, "detect", "--input", input.to_str().unwrap()]);
    let a1 = d.path().join("homes_a1.csv");
    let a4 = d.path().join("homes_a4.csv");
    let zones = d.path().join("zones.geojson");
    let (a1, a4, zones) = (a1.to_str().unwrap(), a4.to_str().unwrap(), zones.to_str().unwrap());

    ok(&["--out-dir", dir, "apps", "evac", "--pre", a4, "--post", a4, "--zones", zones, "--threshold-m", "1000"]);
    let per_zone = lines(&d.path().join("evacuation_zones.csv"));
    assert_eq!(per_zone[0], "zone_id,users,evacuated,fraction");
    assert!(per_zone[1..].iter().all(|r| r.ends_with(",0,0")));

    ok(&["--out-dir", dir, "apps", "consistency", "--table-a", a4, "--table-b", a4, "--zones", zones]);
    let c = lines(&d.path().join("consistency.csv"));
    assert!(c[1].contains(",1,0,"), "{}", c[1]);

    ok(&["--out-dir", dir, "apps", "income", "--table-a", a4, "--table-b", a1, "--zones", zones]);
    let t = lines(&d.path().join("income_transitions.csv"));
    assert_eq!(t.len(), 10);
    let m = json(&d.path().join("manifest_apps_income.json"));
    assert!(m["stats"]["off_diagonal_pct"].is_number());

    let res = homedetect(&["--out-dir", dir, "apps", "income", "--table-a", a4, "--table-b", a1]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["--out-dir", d.path().to_str().unwrap(), "--seed", "7", "synth", "--agents", "100"]);
    }
    for f in ["traces.csv", "truth.csv", "land_use.geojson", "zones.geojson", "personas.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(lines(&a.path().join("truth.csv"))[0], "device_id,lat,lon");
    assert_eq!(lines(&a.path().join("truth.csv")).len(), 101);
}

#[test]
fn config_file_is_honoured() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[synth.population]\nagents = 12\n[synth.period]\nnights = 3\n").unwrap();
    ok(&["--config", cfg.to_str().unwrap(), "--out-dir", dir, "synth"]);
    let m = json(&d.path().join("manifest_synth.json"));
    assert_eq!(m["stats"]["agents"], 12);
    assert_eq!(m["config"]["seed"], 5);

    fs::write(&cfg, "sed = 5\n").unwrap();
    let res = homedetect(&["--config", cfg.to_str().unwrap(), "--out-dir", dir, "synth"]);
    assert_eq!(res.status.code(), Some(2));
}
