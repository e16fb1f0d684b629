use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geoxray(config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoxray"))
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .args(extra)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

const SCATTER: &str = "task = \"scatter\"\nseed = 4\n[manifold]\nmetric = \"euclidean_ball\"\n[pair]\nkind = \"zero\"\nfiber = 2\n[fan]\nbase_points = 3\ndirections = 2\n";

#[test]
fn zero_pair_scatters_to_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = geoxray(&write_config(tmp.path(), SCATTER), &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let recs: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("scattering.json")).unwrap()).unwrap();
    assert_eq!(recs.len(), 6);
    for r in &recs {
        assert_eq!(r["C_re"], serde_json::json!([[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(r["C_im"], serde_json::json!([[0.0, 0.0], [0.0, 0.0]]));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["task"], "scatter");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["threads"], 1);
}

#[test]
fn missing_metric_exits_one_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = geoxray(&write_config(tmp.path(), "task = \"scatter\"\n[manifold]\ndim = 3\n"), &out, &[]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
    let err: serde_json::Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"], "Config");
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    // A sphere cap larger than the hemisphere has a concave boundary.
    let body = "task = \"nf-apply\"\n[manifold]\nmetric = \"sphere_cap\"\nradius = 2.5\n";
    let res = geoxray(&write_config(tmp.path(), body), &out, &[]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let err: serde_json::Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"], "NotConvexAt");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "task = \"transform\"\nseed = 11\n[manifold]\nmetric = \"euclidean_ball\"\n[pair]\nkind = \"random\"\nfiber = 2\n[fan]\nbase_points = 3\ndirections = 3\n";
    let cfg = write_config(tmp.path(), body);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(geoxray(&cfg, &a, &[]).status.success());
    assert!(geoxray(&cfg, &b, &[]).status.success());
    assert_eq!(fs::read(a.join("transform.csv")).unwrap(), fs::read(b.join("transform.csv")).unwrap());
    let c = tmp.path().join("c");
    assert!(geoxray(&cfg, &c, &["--seed", "12"]).status.success());
    assert_ne!(fs::read(a.join("transform.csv")).unwrap(), fs::read(c.join("transform.csv")).unwrap());
}

#[test]
fn dry_run_validates_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = geoxray(&write_config(tmp.path(), SCATTER), &out, &["--dry-run"]);
    assert!(res.status.success());
    assert!(!out.exists());
    let bad = "task = \"layer-strip\"\n[manifold]\nmetric = \"sphere_cap\"\n";
    let res = geoxray(&write_config(tmp.path(), bad), &out, &["--dry-run"]);
    assert_eq!(res.status.code(), Some(1));
}
