use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opf-relax"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_two_bus_first_order_is_exact() {
    let o = run(&["solve", "two-bus", "--relaxation", "sdp", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exact"], true);
    assert!((v["objective_bound"].as_f64().unwrap() - 5.68).abs() < 0.02);
    assert_eq!(v["feasibility"]["max_violation"].as_f64().map(|x| x < 1e-6), Some(true));
}

#[test]
fn solve_three_bus_first_order_reports_gap() {
    let o = run(&["solve", "--case", "three-bus", "--relaxation", "sdp", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exact"], false);
    let gap = v["oracle"]["relative_gap"].as_f64().unwrap();
    assert!((gap - 0.22).abs() < 0.02, "{gap}");
}

#[test]
fn solve_three_bus_second_order_recovers_voltages() {
    let o = run(&["solve", "three-bus", "-r", "moment:2", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exact"], true);
    let volts = v["voltages"].as_array().unwrap();
    for (k, (re, im)) in [(1, (1.049, -0.767)), (2, (0.849, -0.586))] {
        assert!((volts[k]["re"].as_f64().unwrap() - re).abs() < 2e-2);
        assert!((volts[k]["im"].as_f64().unwrap() - im).abs() < 2e-2);
    }
    let text = stdout(&run(&["solve", "three-bus", "-r", "moment:2"]));
    assert!(text.contains("exact true"), "{text}");
}

#[test]
fn cases_lists_line_parameters() {
    let o = run(&["cases"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("0.06129 + j0.05117"));
    assert!(text.contains("0.001 + j0.05"));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["solve", "four-bus"][..],
        &["solve", "two-bus", "-r", "moment:0"],
        &["solve", "two-bus", "-r", "cubic"],
        &["solve", "two-bus", "--tol", "-1"],
        &["solve", "two-bus", "--format", "csv"],
        &["sweep", "three-bus", "--sweep", "p2=1:0:0.5"],
        &["sweep", "three-bus", "--sweep", "p9=0"],
        &["solve"],
        &["frobnicate"],
    ] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["solve", "four-bus"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("two-bus, three-bus"));
}

#[test]
fn case_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.toml");
    std::fs::write(&path, opf_relax::cases::TWO_BUS_TOML).unwrap();
    let o = run(&["solve", path.to_str().unwrap(), "-r", "sdp"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("exact true"));
}

#[test]
fn sweep_is_deterministic_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let grid = "p2=-1:1:1,p3=-0.5:0:0.5";
    let mut outputs = Vec::new();
    for (i, jobs) in ["1", "3"].iter().enumerate() {
        let path = dir.path().join(format!("s{i}.csv"));
        let o = run(&["sweep", "three-bus", "-r", "moment:2", "--sweep", grid, "--jobs", jobs, "--out", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        outputs.push(std::fs::read_to_string(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let lines: Vec<&str> = outputs[0].lines().collect();
    assert_eq!(lines[0], "p2_target,p3_target,p1,p2,p3,objective,rank,exact,status");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("-1,-0.5,"));
    assert!(lines[2].starts_with("-1,0,"));
    assert!(lines[6].starts_with("1,0,"));
    assert!(lines[1..].iter().all(|l| l.ends_with("true,optimal")));
}

#[test]
fn sweep_json_records() {
    let o = run(&["sweep", "three-bus", "-r", "moment:2", "--sweep", "p2=0,p3=0", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let recs = v.as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["exact"], true);
    assert!(recs[0]["p2"].as_f64().unwrap().abs() < 0.02);
}

#[test]
fn dumps_skip_the_solve() {
    let o = run(&["solve", "two-bus", "--dump-polynomials"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("f_P1 ="));
    let o = run(&["solve", "two-bus", "-r", "moment:2", "--dump-program"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let program = opf_relax::conic::read_program(&text).unwrap();
    assert!(program.num_vars() > 0);
}
