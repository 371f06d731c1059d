use std::path::Path;
use std::process::{Command, Output};

fn conic_nmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conic-nmf")).args(args).env_remove("CONIC_NMF_JOBS").output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_string_lossy().into_owned()
}

#[test]
fn factorize_easy_hexagon_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = conic_nmf(&[
        "factorize",
        "--builtin",
        "hex_a2",
        "--k",
        "3",
        "--form",
        "soc",
        "--maxiter",
        "750",
        "--seed",
        "1",
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["report.json", "trace.csv", "W.csv", "H.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["success"], true);
    assert!(report["final_error"].as_f64().unwrap() <= 1e-6);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,phi,gap,min_gap,rel_err,spi_event\n"));
}

#[test]
fn rank_below_nonnegative_rank_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = conic_nmf(&[
        "factorize",
        "--builtin",
        "hex_a2",
        "--k",
        "2",
        "--form",
        "soc",
        "--maxiter",
        "200",
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn negative_entry_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "2,2\n1,2\n3,-1\n").unwrap();
    let out = out_arg(&dir.path().join("o"));
    let o = conic_nmf(&["factorize", "--matrix", path.to_str().unwrap(), "--k", "2", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 1, column 1"), "{err}");
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(conic_nmf(&["factorize", "--k", "2"]).status.code(), Some(2));
    assert_eq!(conic_nmf(&["factorize", "--builtin", "hex_a2", "--k", "3", "--form", "lp"]).status.code(), Some(2));
    assert_eq!(
        conic_nmf(&["factorize", "--builtin", "hex_a2", "--random", "3,3,1", "--k", "3"]).status.code(),
        Some(2)
    );
    assert_eq!(conic_nmf(&["factorize", "--builtin", "nope", "--k", "3"]).status.code(), Some(2));
}

#[test]
fn rank1_prints_exact_solution_for_rank_one_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r1.csv");
    // V = w h' with w = (1, 2), h = (1, 3, 2)
    std::fs::write(&path, "2,3\n1,3,2\n2,6,4\n").unwrap();
    let o = conic_nmf(&["rank1", "--matrix", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sol: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // with w normalized to sum 1 the optimum is sum(w) * sum(h) = 3 * 6
    let objective = sol["objective"].as_f64().unwrap();
    assert!((objective - 18.0).abs() < 1e-6 * 18.0, "{objective}");
    let w: Vec<f64> = sol["w"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((w[0] - 1.0 / 3.0).abs() < 1e-6 && (w[1] - 2.0 / 3.0).abs() < 1e-6, "{w:?}");
}

#[test]
fn campaign_writes_summary_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = conic_nmf(&[
        "campaign",
        "--random",
        "6,6,2",
        "--k",
        "2",
        "--form",
        "exp,soc",
        "--inits",
        "2",
        "--maxiter",
        "100",
        "--seed",
        "4",
        "--jobs",
        "1",
        "--out",
        &out,
    ]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    for form in ["exp", "soc"] {
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(form).join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["n_inits"], 2);
        assert!(summary["successes"].as_u64().unwrap() <= 2);
        assert!(summary.get("wall_time_s").is_none());
        assert!(dir.path().join(form).join("run_000/report.json").exists());
        assert!(dir.path().join(form).join("run_001/trace.csv").exists());
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
}

#[test]
fn campaign_jobs_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_conic-nmf"))
        .args(["campaign", "--builtin", "hex_a2", "--k", "3", "--inits", "1", "--maxiter", "30", "--out", &out])
        .env("CONIC_NMF_JOBS", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gaptrace_writes_paired_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o =
        conic_nmf(&["gaptrace", "--builtin", "hex_a2", "--k", "3", "--maxiter", "30", "--seed", "2", "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("gaptrace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,unit_min_gap,adaptive_min_gap,reference"));
    let mut prev = f64::INFINITY;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let unit: f64 = f[1].parse().unwrap();
        let reference: f64 = f[3].parse().unwrap();
        assert!(unit <= prev);
        assert!(unit <= reference * (1.0 + 1e-12));
        prev = unit;
    }
    assert!(dir.path().join("trace_unit.csv").exists());
    assert!(dir.path().join("trace_adaptive.csv").exists());
}
