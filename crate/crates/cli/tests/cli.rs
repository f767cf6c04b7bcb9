use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jacmorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jacmorph")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = jacmorph(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn single_case_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ph = t.join("ph");
    ok(&["phantom", "--out-dir", p(&ph), "--shrink", "0.8", "--grid", "32", "--radius", "10", "--noise", "0"]);
    let case = ph.join("case_000");
    let field = t.join("fwd.mha");
    let stdout = ok(&[
        "register", "--fixed", p(&case.join("baseline.mha")), "--moving", p(&case.join("followup.mha")),
        "--fixed-mask", p(&case.join("baseline_mask.mha")), "--moving-mask", p(&case.join("followup_mask.mha")),
        "--engine", "ffd", "--out-field", p(&field), "--out-inverse", p(&t.join("inv.mha")), "--trace", p(&t.join("trace.csv")),
    ]);
    assert!(stdout.starts_with("ffd:"));
    let header = fs::read(&field).unwrap();
    let text = String::from_utf8_lossy(&header[..300]);
    assert!(text.contains("ElementNumberOfChannels = 3") && text.contains("MET_FLOAT"));
    assert!(fs::read_to_string(t.join("trace.csv")).unwrap().starts_with("iteration,"));

    ok(&["jacobian", "--field", p(&field), "--mask", p(&case.join("baseline_mask.mha")), "--out-jmap", p(&t.join("j.mha")), "--report", p(&t.join("j.json"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("j.json")).unwrap()).unwrap();
    let truth = fs::read_to_string(ph.join("truth.csv")).unwrap();
    let gt: f64 = truth.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((report["change_pct"].as_f64().unwrap() - gt).abs() < 15.0, "{report} vs {gt}");

    ok(&["features", "--jmap", p(&t.join("j.mha")), "--mask", p(&case.join("baseline_mask.mha")), "--out", p(&t.join("f.csv")), "--case-id", "case_000"]);
    let feats = fs::read_to_string(t.join("f.csv")).unwrap();
    assert_eq!(feats.lines().next().unwrap().split(',').count(), 57);
}

#[test]
fn blend_applies_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let geom = jacmorph::Geometry::cube(4, 1.0).unwrap();
    let ct = jacmorph::Image3D::filled(geom, 750.0);
    let pet = jacmorph::Image3D::filled(geom, 0.0);
    jacmorph::metaimage::write_image(t.join("ct.mha"), &ct, jacmorph::metaimage::ElementType::Float).unwrap();
    jacmorph::metaimage::write_image(t.join("pet.mha"), &pet, jacmorph::metaimage::ElementType::Float).unwrap();
    ok(&["blend", "--ct", p(&t.join("ct.mha")), "--pet", p(&t.join("pet.mha")), "--out", p(&t.join("b.mha")), "--alpha", "0.3"]);
    let b = jacmorph::metaimage::read_image(t.join("b.mha")).unwrap();
    assert!(b.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn table_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let mut feats = String::from("case_id,a,b\n");
    let mut labels = String::from("case_id,label\n");
    for i in 0..24 {
        let l = i % 2;
        feats.push_str(&format!("c{i},{},{}\n", l as f64 * 4.0 + (i as f64 * 0.37).sin(), (i as f64 * 1.7).cos()));
        labels.push_str(&format!("c{i},{l}\n"));
    }
    fs::write(t.join("feats.csv"), feats).unwrap();
    fs::write(t.join("labels.csv"), labels).unwrap();
    ok(&["univariate", "--features", p(&t.join("feats.csv")), "--labels", p(&t.join("labels.csv")), "--out", p(&t.join("u.csv"))]);
    let u = fs::read_to_string(t.join("u.csv")).unwrap();
    assert!(u.lines().nth(1).unwrap().starts_with("a,1.000000"));

    fs::write(t.join("cv.json"), r#"{"folds": 4, "repeats": 2, "n_trees": 20, "max_features": 2}"#).unwrap();
    let stdout = ok(&[
        "predict", "--features", p(&t.join("feats.csv")), "--labels", p(&t.join("labels.csv")),
        "--out-report", p(&t.join("pred.json")), "--curve", p(&t.join("curve.csv")), "--seed", "5", "--config", p(&t.join("cv.json")),
    ]);
    assert!(stdout.starts_with("accuracy"));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("pred.json")).unwrap()).unwrap();
    assert_eq!(rep["config"]["seed"], 5);
    assert!(rep["accuracy"]["mean"].as_f64().unwrap() > 0.9);
    assert_eq!(fs::read_to_string(t.join("curve.csv")).unwrap().lines().count(), 3);

    fs::write(t.join("cases.csv"), "case_id,est_change_pct,gt_change_pct,dsc\na,10,12,0.9\nb,20,18,0.8\nc,30,33,0.85\n").unwrap();
    ok(&["evaluate", "--cases", p(&t.join("cases.csv")), "--out-json", p(&t.join("e.json")), "--out-csv", p(&t.join("e.csv"))]);
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("e.json")).unwrap()).unwrap();
    assert!((e["pearson_r"].as_f64().unwrap() - 0.9707).abs() < 1e-3);
}

#[test]
fn run_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = r#"{
        "cohort": {"n_cases": 4, "grid_size": 32, "radius": 10.0, "change_range": [20.0, 50.0]},
        "registration": {"engine": "ffd"},
        "predict": {"folds": 2, "repeats": 1, "n_trees": 10, "max_features": 2},
        "io": {"write_volumes": false}
    }"#;
    fs::write(t.join("cfg.json"), cfg).unwrap();
    let out = t.join("run");
    let stdout = ok(&["run", "--config", p(&t.join("cfg.json")), "--out-dir", p(&out), "--jobs", "2"]);
    assert!(stdout.contains("outputs in"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(out.join("features.csv").exists());

    let stdout = ok(&["sweep", "--config", p(&t.join("cfg.json")), "--out-dir", p(&t.join("sw")), "--sigmas", "32", "--gammas", "0.15,0.2"]);
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(stdout.lines().filter(|l| l.contains(",true,")).count(), 1);
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = jacmorph(&["register", "--fixed", "/nope/a.mha", "--moving", "/nope/b.mha", "--out-field", p(&tmp.path().join("f.mha"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage load"));
    let out = jacmorph(&["register", "--fixed", "a", "--moving", "b", "--out-field", "c", "--engine", "warp"]);
    assert!(!out.status.success());
    fs::write(tmp.path().join("bad.json"), r#"{"nonsense": true}"#).unwrap();
    let out = jacmorph(&["run", "--config", p(&tmp.path().join("bad.json"))]);
    assert!(!out.status.success());
}
