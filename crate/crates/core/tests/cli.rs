use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrm"))
        .args(args)
        .output()
        .expect("spawn nrm")
}

fn instance() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../plans/two_product/instance.json")
        .to_string_lossy()
        .into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn fluid_prints_certified_solution() {
    let out = nrm(&["fluid", &instance()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["duality_gap"].as_f64().unwrap().abs() <= 1e-5);
    let d: Vec<f64> = serde_json::from_value(v["d_star"].clone()).unwrap();
    assert!((d[0] - 0.0578121).abs() < 1e-6 && (d[1] - 0.0421879).abs() < 1e-6);
    let lam: Vec<f64> = serde_json::from_value(v["lambda_star"].clone()).unwrap();
    assert!((lam[0] - 1.36387).abs() < 1e-4 && lam[1].abs() < 1e-9);
    assert!((v["value"].as_f64().unwrap() - 0.2026484).abs() < 1e-6);
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for (path, ev) in [(&a, "a.jsonl"), (&b, "b.jsonl")] {
        let out = nrm(&[
            "run",
            &instance(),
            "pdnrm",
            "--seed",
            "4",
            "--horizon",
            "3000",
            "--trace",
            path.to_str().unwrap(),
            "--events",
            dir.path().join(ev).to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    assert_eq!(String::from_utf8_lossy(&ta).lines().count(), 3001);
}

#[test]
fn bench_writes_schema() {
    let dir = tempfile::tempdir().unwrap();
    let plan = format!(
        r#"{{"instance": {inst:?}, "policies": ["pdnrm", "clairvoyant", "etc"], "pdnrm_config": {{"mode": "tuned"}},
            "T_grid": [1000, 2000, 4000], "replications": 2, "base_seed": 9, "output_dir": "out"}}"#,
        inst = instance()
    );
    let path = write(dir.path(), "plan.json", &plan);
    let out = nrm(&["bench", &path]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "policy,T,mean_loss,stderr,mean_revenue,mean_shutoff,wall_ms"
    );
    assert_eq!(summary.lines().count(), 10);
    let episodes = std::fs::read_to_string(dir.path().join("out/episodes.csv")).unwrap();
    assert_eq!(
        episodes.lines().next().unwrap(),
        "policy,T,replicate,seed,revenue,loss,shutoff"
    );
    assert_eq!(episodes.lines().count(), 19);
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/metadata.json")).unwrap(),
    )
    .unwrap();
    assert!(meta["loss_denominator"].as_str().unwrap().contains("fluid"));
    assert_eq!(meta["plan"]["replications"], 2);

    let again = dir.path().join("again");
    let out = nrm(&[
        "bench",
        &path,
        "--output-dir",
        again.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert!(out.status.success());
    assert_eq!(
        summary,
        std::fs::read_to_string(again.join("summary.csv")).unwrap()
    );
    assert_eq!(
        episodes,
        std::fs::read_to_string(again.join("episodes.csv")).unwrap()
    );
}

#[test]
fn check_passes_on_reference_instance() {
    let out = nrm(&["check", &instance()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn constants_in_both_modes() {
    let tuned = nrm(&[
        "constants",
        &instance(),
        "--mode",
        "tuned",
        "--horizon",
        "100000",
    ]);
    assert!(tuned.status.success());
    let v: serde_json::Value = serde_json::from_slice(&tuned.stdout).unwrap();
    assert_eq!(v["constants"]["n0"], 239);
    assert_eq!(v["constants"]["eta1"], 1.0);
    let theory = nrm(&["constants", &instance(), "--mode", "theory"]);
    assert!(theory.status.success());
    let v: serde_json::Value = serde_json::from_slice(&theory.stdout).unwrap();
    assert_eq!(v["mode"], "theory");
}

#[test]
fn malformed_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(nrm(&["fluid", &bad]).status.code(), Some(2));
    assert_eq!(nrm(&["run", &instance(), "greedy"]).status.code(), Some(2));
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"mode": "tuned", "kappa1": 3.0}"#,
    );
    let out = nrm(&["constants", &instance(), "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("explicit"));
    let unknown = write(dir.path(), "u.json", r#"{"mode": "tuned", "kappa7": 3.0}"#);
    assert_eq!(
        nrm(&["run", &instance(), "pdnrm", "--config", &unknown])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        nrm(&["fluid", "/nonexistent/instance.json"]).status.code(),
        Some(2)
    );
}
