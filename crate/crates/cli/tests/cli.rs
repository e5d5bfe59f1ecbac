use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pipesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipesim")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fig2_reports_two_versions_and_no_bubble() {
    let o = pipesim(&["simulate", "--fixture", "fig2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("weight versions held: 2"), "{text}");
    assert!(text.contains("bubble fraction: 0.0000"), "{text}");
}

#[test]
fn gpipe_holds_m_stashes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pipesim(&["fixtures", "--name", "fig2", "--out", path(dir.path())]).status.code(), Some(0));
    let model = dir.path().join("fig2.model.json");
    let cluster = dir.path().join("fig2.cluster.json");
    let o = pipesim(&[
        "simulate", "--model", path(&model), "--cluster", path(&cluster), "--policy", "gpipe", "--depth", "4",
        "--accum", "2", "--batches", "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("activation stashes held: 8"), "{}", stdout(&o));
}

#[test]
fn invalid_policy_is_a_usage_error() {
    let o = pipesim(&["simulate", "--fixture", "fig2", "--policy", "zigzag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pipesim(&[
        "simulate", "--model", &data("uniform24.model.json"), "--cluster", &data("cluster8.json"), "--policy", "zigzag",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_shape_is_an_input_error() {
    let o = pipesim(&[
        "simulate", "--model", &data("uniform24.model.json"), "--cluster", &data("cluster8.json"), "--depth", "5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not divide"));
}

#[test]
fn plan_prints_the_chosen_configuration() {
    let o = pipesim(&["plan", "--model", &data("uniform24.model.json"), "--cluster", &data("cluster64.json"), "--max-batch", "512"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let first = text.lines().next().unwrap();
    for key in ["w_opt=", "d_opt=", "b_opt=", "r_opt=", "g_opt="] {
        assert!(first.contains(key), "{first}");
    }
    assert!(text.contains("280 (w, d) pairs examined"));
}

#[test]
fn plan_is_independent_of_jobs() {
    let args = ["plan", "--model", &data("uniform24.model.json"), "--cluster", &data("cluster64.json"), "--max-batch", "256"];
    let one = pipesim(&[&["--jobs", "1"][..], &args[..]].concat());
    let many = pipesim(&args);
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&one), stdout(&many));
    assert_eq!(pipesim(&[&["--jobs", "0"][..], &args[..]].concat()).status.code(), Some(2));
}

#[test]
fn zero_capacity_is_infeasible() {
    let o = pipesim(&["plan", "--model", &data("uniform24.model.json"), "--cluster", &data("cluster_zero.json"), "--max-batch", "64"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("w=1 d=1") && err.contains("exceeds capacity"), "{err}");
}

#[test]
fn plan_validation_is_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("plan.json");
    for cluster in ["cluster8.json", "cluster64.json"] {
        let o = pipesim(&[
            "plan", "--model", &data("uniform24.model.json"), "--cluster", &data(cluster), "--max-batch", "256",
            "--validate", "--out", path(&json),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o).lines().find(|l| l.starts_with("validation:")).unwrap().to_string();
        let pct: f64 = line.split("throughput error ").nth(1).unwrap().split('%').next().unwrap().parse().unwrap();
        assert!(pct <= 2.0, "{line}");
        assert!(line.contains("memory error 0.000%"));
        assert!(std::fs::read_to_string(&json).unwrap().contains("\"w_opt\""));
    }
}

#[test]
fn missing_file_is_an_input_error() {
    let o = pipesim(&["plan", "--model", "/nonexistent.json", "--cluster", &data("cluster8.json"), "--max-batch", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_small_grid_passes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("loss.csv");
    let o = pipesim(&["verify", "--grid", "small", "--loss-csv", path(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 40);
    assert!(!text.contains("FAIL"));
    let curves = std::fs::read_to_string(&csv).unwrap();
    assert!(curves.starts_with("batch,vanilla,2bw\n"));
    assert_eq!(curves.lines().count(), 201);
}

#[test]
fn verify_catches_wrong_delay() {
    let o = pipesim(&["verify", "--inject-delay", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL 2bw")));
}

#[test]
fn render_matches_golden_svg() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("fig2.json");
    let svg = dir.path().join("fig2.svg");
    assert_eq!(pipesim(&["simulate", "--fixture", "fig2", "--out", path(&report)]).status.code(), Some(0));
    let o = pipesim(&["render", "--report", path(&report), "--format", "svg", "--out", path(&svg)]);
    assert_eq!(o.status.code(), Some(0));
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/fig2.svg");
    assert_eq!(std::fs::read_to_string(svg).unwrap(), std::fs::read_to_string(golden).unwrap());
}

#[test]
fn render_ascii_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("fig3a.json");
    assert_eq!(pipesim(&["simulate", "--fixture", "fig3a", "--out", path(&report)]).status.code(), Some(0));
    let o = pipesim(&["render", "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/fig3a.txt");
    assert_eq!(stdout(&o), std::fs::read_to_string(golden).unwrap());
}

#[test]
fn corrupt_report_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bad.json");
    std::fs::write(&report, "{\"timeline\": [").unwrap();
    let o = pipesim(&["render", "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed"));
    let o = pipesim(&["render", "--report", path(&report), "--format", "gif"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fixtures_lists_every_figure() {
    let o = pipesim(&["fixtures"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in ["fig1a", "fig1b", "fig2", "fig3a", "fig3b"] {
        assert!(text.contains(&format!("{name}: ")), "{text}");
    }
    assert_eq!(pipesim(&["fixtures", "--name", "fig7"]).status.code(), Some(2));
}
