use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn klplate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klplate")).args(args).output().unwrap()
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    klplate(&args)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn rigidity_of_fully_clamped_square() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&config("rigidity.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("report.json"));
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["task"], "rigidity");
    assert_eq!(r["report"]["verdict"]["kind"], "rigid_by");
    assert_eq!(r["report"]["verdict"]["criterion"]["name"], "full_tangential_clamp");
    assert_eq!(r["report"]["linear_kernel_dim"], 0);
    let m = json(dir.path().join("manifest.json"));
    assert_eq!(m["config"]["task"], "rigidity");
    assert!(m["timings"]["total_seconds"].as_f64().unwrap() >= 0.0);
    assert!(m["versions"]["klplate"].is_string());
}

#[test]
fn blowup_reports_a_negative_quadratic_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&config("blowup.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("report.json"));
    let lead = r["leading_coefficient"].as_f64().unwrap();
    assert!(lead < 0.0);
    assert!((lead + 3.556e-3).abs() < 0.02 * 3.556e-3);
    assert_eq!(r["minimize"]["suspected_unbounded"], true);
    let csv = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,J");
    assert_eq!(lines.len(), 5);
    assert!(dir.path().join("trace.csv").exists());
}

#[test]
fn every_sample_config_runs() {
    for name in ["minimize.toml", "convex_weight.toml", "energy.toml", "identities.toml", "counterexample.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&config(name), dir.path(), &[]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let m = json(dir.path().join("manifest.json"));
        for f in m["outputs"].as_array().unwrap() {
            assert!(dir.path().join(f.as_str().unwrap()).exists(), "{name}: {f}");
        }
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let o = run(&config("minimize.toml"), first.path(), &["--seed", "11"]);
    assert!(o.status.success());
    let second = tempfile::tempdir().unwrap();
    let o = run(&first.path().join("manifest.json"), second.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(first.path().join("trace.csv")).unwrap();
    let b = std::fs::read(second.path().join("trace.csv")).unwrap();
    assert_eq!(a, b);
    let ra = json(first.path().join("report.json"));
    let rb = json(second.path().join("report.json"));
    assert_eq!(ra["energy"], rb["energy"]);
    assert_eq!(json(second.path().join("manifest.json"))["config"]["seed"], 11);
}

#[test]
fn task_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&config("counterexample.toml"), dir.path(), &["--task", "identities"]);
    assert!(o.status.success());
    assert_eq!(json(dir.path().join("report.json"))["task"], "identities");
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SQUARE: &str = "[domain]\nkind = \"rectangle_like\"\na = 0.0\nb = 1.0\nf = 0.0\ng = 1.0\n[mesh]\nn1 = 4\nn2 = 4\n";

#[test]
fn negative_mu_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &format!("task = \"minimize\"\n{SQUARE}[material]\nlambda = 1.0\nmu = -1.0\nepsilon = 1.0\n"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu"));
}

#[test]
fn missing_and_unknown_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "nomat.toml", &format!("task = \"minimize\"\n{SQUARE}"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("material"));

    let cfg = write(dir.path(), "task.toml", &format!("task = \"dance\"\n{SQUARE}"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("task"));

    let cfg = write(dir.path(), "nomesh.toml", "task = \"rigidity\"\n[domain]\nkind = \"convex_polygon\"\nvertices = [[0, 0], [1, 0], [0, 1]]\n");
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mesh"));
}

#[test]
fn invalid_domain_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dom.toml",
        "task = \"rigidity\"\n[domain]\nkind = \"rectangle_like\"\na = 1.0\nb = 0.0\nf = 0.0\ng = 1.0\n[mesh]\nn1 = 4\nn2 = 4\n",
    );
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unclamped_field_in_weighted_identity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "open.toml", &format!("task = \"identities\"\n{SQUARE}[identities]\nweighted = \"y1\"\n"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}
