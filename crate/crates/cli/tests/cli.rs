use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permbarrier_cli::run::CertificateFile;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_permbarrier"));
    c.env_remove(permbarrier_cli::TOLERANCE_ENV);
    c
}

fn problem(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems").join(name)
}

fn exec(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn write_spec(dir: &Path, name: &str, spec: Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn example2_check(h: &str) -> Value {
    serde_json::json!({
        "mode": "check",
        "variables": ["x1", "x2", "x3"],
        "f": ["-x1 + x2*x3^2", "-x2", "-x3"],
        "V": "x1^2 + x2^2 + x3^2",
        "options": { "verify": { "samples": 20000, "trajectories": 20, "volume_samples": 100000 } },
        "certificate": { "h": h }
    })
}

#[test]
fn init_templates_validate_and_run() {
    let dir = tempfile::tempdir().unwrap();
    for template in ["doa", "safe-stabilization"] {
        let spec = dir.path().join(format!("{template}.json"));
        let (code, _, err) = exec(bin().args(["init", "--template", template]).arg(&spec));
        assert_eq!(code, 0, "{err}");
        let out = dir.path().join(template);
        let (code, stdout, err) = exec(bin().arg("run").arg(&spec).arg(&out).args(["--max-iters", "2"]));
        assert_eq!(code, 0, "{stdout}{err}");
        for f in ["certificate.json", "report.json", "region.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
}

#[test]
fn same_spec_and_seed_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, _, err) = exec(bin().arg("run").arg(problem("example3.json")).arg("--out").arg(out).args(["--max-iters", "3", "--seed", "5"]));
        assert_eq!(code, 0, "{err}");
    }
    for f in ["certificate.json", "report.json", "region.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cert = CertificateFile::load(&a.join("certificate.json")).unwrap();
    assert_eq!(cert.options.verify.seed, 5);
    assert_eq!(cert.options.alternation.max_iterations, 3);
    assert_eq!(cert.u.unwrap().len(), 1);
    assert_eq!(cert.j.len(), 3);
}

#[test]
fn two_input_example_reports_both_controls() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, err) = exec(bin().arg("run").arg(problem("example4.json")).arg(dir.path()).args(["--max-iters", "1"]));
    assert_eq!(code, 0, "{stdout}{err}");
    let cert = CertificateFile::load(&dir.path().join("certificate.json")).unwrap();
    assert_eq!(cert.u.unwrap().len(), 2);
    assert_eq!(cert.j.len(), 4);
    let header = std::fs::read_to_string(dir.path().join("region.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "x1,x2,x3,h,V,q1,q2,q3,q4");
}

#[test]
fn published_example2_certificate_checks() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "ok.json", example2_check("7.9999 - 1.2828*x3^2 - 0.2850*x1^2 - 0.5652*x2^2 - 0.6685*x1*x2"));
    let (code, stdout, err) = exec(bin().arg("check").arg(&spec).arg(dir.path().join("ok")));
    assert_eq!(code, 0, "{stdout}{err}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ok/report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], Value::Bool(true));
}

#[test]
fn flipped_sign_certificate_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "bad.json", example2_check("7.9999 + 1.2828*x3^2 - 0.2850*x1^2 - 0.5652*x2^2 - 0.6685*x1*x2"));
    let (code, stdout, err) = exec(bin().arg("check").arg(&spec).arg(dir.path().join("bad")));
    assert_eq!(code, 2, "{stdout}{err}");
    assert!(stdout.contains("FAILED"));
}

#[test]
fn sublevel_certificate_checks() {
    // c* - V is certified by the sublevel search itself
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "sub.json",
        serde_json::json!({
            "mode": "check",
            "variables": ["x1", "x2"],
            "f": ["x2", "-x1 - x2 + x1^3"],
            "V": "x1^2 + x1*x2 + x2^2 + x1^4 + x2^4",
            "options": { "verify": { "samples": 20000, "trajectories": 20, "volume_samples": 100000 } },
            "certificate": { "h": "0.9758 - x1^2 - x1*x2 - x2^2 - x1^4 - x2^4" }
        }),
    );
    let (code, stdout, err) = exec(bin().arg("check").arg(&spec).arg(dir.path()));
    assert_eq!(code, 0, "{stdout}{err}");
}

#[test]
fn check_accepts_a_previous_certificate_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = exec(bin().arg("run").arg(problem("example3.json")).arg(&out).args(["--max-iters", "2"]));
    assert_eq!(code, 0, "{err}");
    let (code, stdout, err) =
        exec(bin().arg("check").arg(problem("example3.json")).arg(dir.path().join("check")).arg("--certificate").arg(out.join("certificate.json")));
    assert_eq!(code, 0, "{stdout}{err}");
    let (code, stdout, err) = exec(
        bin().arg("simulate").arg(problem("example3.json")).arg(dir.path().join("sim")).arg("--certificate").arg(out.join("certificate.json")),
    );
    assert_eq!(code, 0, "{stdout}{err}");
    let traj = std::fs::read_to_string(dir.path().join("sim/trajectories.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "trajectory,t,x1,x2,h,q1,q2,q3,u1");
}

#[test]
fn export_at_resolution_two_has_corner_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "e.json",
        serde_json::json!({
            "mode": "doa",
            "variables": ["x1", "x2"],
            "f": ["-x1", "-x2"],
            "V": "x1^2 + x2^2",
            "certificate": { "h": "1 - x1^2 - x2^2" },
            "export": { "box": [[-3.0, 3.0], [-3.0, 3.0]] }
        }),
    );
    let (code, _, err) = exec(bin().arg("export-region").arg(&spec).arg(dir.path()).args(["--resolution", "2"]));
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("region.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "x1,x2,h,V");
    assert!(lines[1].starts_with("-3,-3,"));
}

#[test]
fn example1_grid_dominates_the_sublevel_set() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = exec(bin().arg("run").arg(problem("example1.json")).arg(dir.path()));
    assert_eq!(code, 0, "{err}");
    let cert = CertificateFile::load(&dir.path().join("certificate.json")).unwrap();
    let c_star = cert.c_star.unwrap();
    assert!((c_star - 0.9759).abs() <= 0.02 * 0.9759);
    let mut reader = csv::Reader::from_path(dir.path().join("region.csv")).unwrap();
    let (mut rows, mut in_h, mut in_v) = (0, 0, 0);
    for rec in reader.records() {
        let rec = rec.unwrap();
        let (x1, x2, h, v): (f64, f64, f64, f64) =
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap(), rec[3].parse().unwrap());
        assert!((-3.0..=3.0).contains(&x1) && (-3.0..=3.0).contains(&x2));
        in_h += (h >= 0.0) as usize;
        in_v += (v <= c_star) as usize;
        // the sublevel boundary is tangent to {dV/dt = 0}, where the barrier
        // region may retreat slightly; away from it the sublevel set is enclosed
        if v <= 0.95 * c_star {
            assert!(h >= 0.0, "({x1}, {x2}): h = {h}, V = {v}");
        }
        rows += 1;
    }
    assert_eq!(rows, 40_000);
    assert!(in_h as f64 > 1.5 * in_v as f64, "{in_h} vs {in_v}");
}

#[test]
fn doa_with_input_matrix_warns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "w.json",
        serde_json::json!({
            "mode": "doa",
            "variables": ["x1", "x2"],
            "f": ["-x1", "-x2 + x1^2"],
            "g": [["0"], ["1"]],
            "V": "x1^2 + x2^2",
            "unsafe": ["(x1 - 3)^2 + x2^2 - 1"],
            "options": { "alternation": { "max_iterations": 1, "sublevel_cap": 16 } }
        }),
    );
    let (code, stdout, err) = exec(bin().arg("run").arg(&spec).arg(dir.path().join("out")));
    assert_eq!(code, 0, "{stdout}{err}");
    assert!(stdout.contains("warning: g is ignored"));
    assert!(stdout.contains("warning: unsafe sets are ignored"));
}

#[test]
fn malformed_spec_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\n  \"mode\": \"doa\",\n  \"variables\": [\"x1\"],\n  \"f\": [\"-x1\"]\n  \"V\": \"x1^2\"\n}\n").unwrap();
    let (code, _, err) = exec(bin().arg("run").arg(&path).arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.contains("broken.json:5:"), "{err}");

    std::fs::write(&path, "{\n  \"mode\": \"doa\",\n  \"variables\": [\"x1\"],\n  \"f\": [\"-x1\"],\n  \"V\": \"x1^^2\"\n}\n").unwrap();
    let (code, _, err) = exec(bin().arg("run").arg(&path).arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.contains("`V` (line 5)"), "{err}");
}

#[test]
fn safe_stabilization_without_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "s.json",
        serde_json::json!({ "mode": "safe-stabilization", "variables": ["x1"], "f": ["-x1"], "V": "x1^2" }),
    );
    let (code, _, err) = exec(bin().arg("run").arg(&spec).arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.contains("`g`"), "{err}");
}

#[test]
fn tolerance_variable_is_validated_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("t.json");
    exec(bin().args(["init", "--template", "doa"]).arg(&spec));
    let (code, _, err) = exec(bin().env(permbarrier_cli::TOLERANCE_ENV, "loose").arg("run").arg(&spec).arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.contains(permbarrier_cli::TOLERANCE_ENV), "{err}");
    let out = dir.path().join("out");
    let (code, _, err) =
        exec(bin().env(permbarrier_cli::TOLERANCE_ENV, "1e-7").arg("run").arg(&spec).arg(&out).args(["--max-iters", "1"]));
    assert_eq!(code, 0, "{err}");
    let cert = CertificateFile::load(&out.join("certificate.json")).unwrap();
    assert_eq!(cert.options.solver.gap_tol, 1e-7);
    assert_eq!(cert.options.solver.feasibility_tol, 1e-7);
}
