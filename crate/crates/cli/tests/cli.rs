use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rfsmooth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsmooth"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: [&str; 6] = ["--rows", "8", "--cols", "8", "--lags", "8"];

fn simulate_small(dir: &Path, seed: &str) {
    let mut args = vec!["simulate", "--out", "d.csv", "--seed", seed];
    args.extend(SMALL);
    args.extend([
        "--center-r",
        "4.5",
        "--center-c",
        "4.5",
        "--onset",
        "40",
        "--peak",
        "60",
        "--offset",
        "100",
    ]);
    let out = rfsmooth(&args, dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn phi_count(bundle: &Path) -> usize {
    let summary: Value = serde_json::from_str(&fs::read_to_string(bundle.join("summary.json")).unwrap()).unwrap();
    summary["phi"].as_array().unwrap().len()
}

#[test]
fn simulate_defaults_give_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfsmooth(&["simulate", "--out", "d.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let data = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let truth = fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(data.lines().next(), Some("r,c,t,count,n"));
    assert_eq!(data.lines().count(), 4097);
    assert_eq!(truth.lines().count(), 4097);
}

#[test]
fn simulate_is_deterministic_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = rfsmooth(
            &[
                "simulate",
                "--seed",
                "7",
                "--out",
                &format!("{name}.csv"),
                "--truth",
                &format!("{name}_truth.csv"),
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a_truth.csv"), read("b_truth.csv"));
    let other = rfsmooth(
        &["simulate", "--seed", "8", "--out", "c.csv", "--truth", "c_truth.csv"],
        dir.path(),
    );
    assert_eq!(code(&other), 0);
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn flat_truth_is_constant_along_time_inside_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfsmooth(
        &[
            "simulate",
            "--out",
            "d.csv",
            "--sharpness",
            "0",
            "--onset",
            "0",
            "--peak",
            "160",
            "--offset",
            "400",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    let mut by_cell = std::collections::BTreeMap::<(i64, i64), Vec<f64>>::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        by_cell
            .entry((f[0].parse().unwrap(), f[1].parse().unwrap()))
            .or_default()
            .push(f[3].parse().unwrap());
    }
    assert_eq!(by_cell.len(), 256);
    for rates in by_cell.values() {
        assert_eq!(rates.len(), 16);
        assert!(rates.iter().all(|&r| r == rates[0]), "{rates:?}");
    }
}

#[test]
fn truth_spec_file_is_accepted_and_excludes_truth_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"amplitude": 0.5, "sharpness": 0.1}"#).unwrap();
    let ok = rfsmooth(&["simulate", "--out", "d.csv", "--truth-spec", "spec.json"], dir.path());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let clash = rfsmooth(
        &[
            "simulate",
            "--out",
            "e.csv",
            "--truth-spec",
            "spec.json",
            "--amplitude",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(code(&clash), 1);
    fs::write(dir.path().join("bad.json"), r#"{"amplitude": 0.5, "colour": 3}"#).unwrap();
    let unknown = rfsmooth(&["simulate", "--out", "f.csv", "--truth-spec", "bad.json"], dir.path());
    assert_eq!(code(&unknown), 1);
    assert_eq!(stderr(&unknown).lines().count(), 1);
}

#[test]
fn invalid_truth_parameters_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        vec!["--width-r", "0"],
        vec!["--baseline", "-1"],
        vec!["--onset", "100", "--peak", "50"],
        vec!["--presentations", "0"],
        vec!["--rows", "0"],
    ] {
        let mut args = vec!["simulate", "--out", "d.csv"];
        args.extend(bad.iter().copied());
        let out = rfsmooth(&args, dir.path());
        assert_eq!(code(&out), 1, "{bad:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).lines().count(), 1, "{bad:?}");
    }
}

#[test]
fn fit_reports_three_or_192_smoothing_weights() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "3");
    let plain = rfsmooth(
        &["fit", "--input", "d.csv", "--out", "plain", "--basis-dim", "7,7,7"],
        dir.path(),
    );
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    assert_eq!(phi_count(&dir.path().join("plain")), 3);
    for file in ["summary.json", "fitted.csv", "ed_blocks.csv", "trace.csv"] {
        assert!(dir.path().join("plain").join(file).is_file(), "{file}");
    }
    let adaptive = rfsmooth(
        &[
            "fit",
            "--input",
            "d.csv",
            "--out",
            "adaptive",
            "--adaptive",
            "--adaptive-dim",
            "4,4,4",
        ],
        dir.path(),
    );
    assert!(matches!(code(&adaptive), 0 | 2), "{}", stderr(&adaptive));
    assert_eq!(phi_count(&dir.path().join("adaptive")), 192);
}

#[test]
fn full_size_default_fit_runs_with_zero_model_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rfsmooth(&["simulate", "--out", "d.csv"], dir.path())), 0);
    let out = rfsmooth(&["fit", "--input", "d.csv", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["basis_dim"], serde_json::json!([7, 7, 7]));
    assert_eq!(summary["coefficients"], 343);
    assert_eq!(summary["parameters"], 3);
    assert_eq!(
        fs::read_to_string(dir.path().join("o/fitted.csv"))
            .unwrap()
            .lines()
            .count(),
        4097
    );
}

#[test]
fn missing_input_exits_one_without_creating_output() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["fit", "compare"] {
        let out = rfsmooth(&[sub, "--input", "absent.csv", "--out", "outdir"], dir.path());
        assert_eq!(code(&out), 1);
        assert_eq!(stderr(&out).lines().count(), 1);
        assert!(!dir.path().join("outdir").exists());
    }
}

#[test]
fn malformed_inputs_exit_one_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("empty.csv", ""),
        ("header.csv", "a,b,c\n1,2,3\n"),
        ("negative.csv", "r,c,t,count,n\n1,1,-20,-1,10\n"),
        ("text.csv", "r,c,t,count,n\n1,1,-20,x,10\n"),
        ("holes.csv", "r,c,t,count,n\n1,1,-20,1,10\n2,2,-20,1,10\n"),
        ("binary.csv", "\u{0}\u{1}\u{2}"),
    ];
    for (name, body) in cases {
        fs::write(dir.path().join(name), body).unwrap();
        let out = rfsmooth(&["fit", "--input", name, "--out", "o"], dir.path());
        assert_eq!(code(&out), 1, "{name}: {}", stderr(&out));
        assert!(!stderr(&out).contains("panicked"), "{name}");
        assert_eq!(stderr(&out).lines().count(), 1, "{name}");
    }
}

#[test]
fn bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "1");
    let cases: [&[&str]; 7] = [
        &["fit", "--input", "d.csv", "--out", "o", "--bogus"],
        &["fit", "--input", "d.csv", "--out", "o", "--basis-dim", "7,7"],
        &["fit", "--input", "d.csv", "--out", "o", "--diff-order", "2,2,x"],
        &["fit", "--input", "d.csv", "--out", "o", "--diff-order", "7,2,2"],
        &["fit", "--input", "d.csv", "--out", "o", "--outer-tol", "0"],
        &["fit", "--input", "d.csv", "--out", "o", "--max-outer", "0"],
        &["fit", "--input", "d.csv"],
    ];
    for args in cases {
        let out = rfsmooth(args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).lines().count(), 1, "{args:?}");
        assert!(!dir.path().join("o").exists(), "{args:?}");
    }
}

#[test]
fn non_converged_fit_exits_two_and_still_writes_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "5");
    let out = rfsmooth(
        &[
            "fit",
            "--input",
            "d.csv",
            "--out",
            "o",
            "--max-outer",
            "1",
            "--outer-tol",
            "1e-12",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], Value::Bool(false));
}

#[test]
fn help_documents_every_flag_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfsmooth(&["fit", "--help"], dir.path());
    assert_eq!(code(&out), 0);
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "--basis-dim <A,B,C>",
        "[default: 7,7,7]",
        "[default: 2,2,2]",
        "[default: 4,4,4]",
        "--inner-tol",
        "[default: 0.00000001]",
        "--outer-tol",
        "[default: 0.0001]",
        "--max-inner",
        "[default: 50]",
        "--max-outer",
        "[default: 200]",
        "--adaptive",
    ] {
        assert!(help.contains(needle), "missing {needle}\n{help}");
    }
}

fn strip_wall_time(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_seconds");
            map.values_mut().for_each(strip_wall_time);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

#[test]
fn compare_writes_both_bundles_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "11");
    let mut reports = Vec::new();
    for out_dir in ["run1", "run2"] {
        let out = rfsmooth(
            &[
                "compare",
                "--input",
                "d.csv",
                "--truth",
                "truth.csv",
                "--out",
                out_dir,
                "--basis-dim",
                "6,6,6",
                "--adaptive-dim",
                "2,2,2",
            ],
            dir.path(),
        );
        assert!(matches!(code(&out), 0 | 2), "{}", stderr(&out));
        let root = dir.path().join(out_dir);
        assert_eq!(phi_count(&root.join("nonadaptive")), 3);
        assert_eq!(phi_count(&root.join("adaptive")), 24);
        let mut report: Value = serde_json::from_str(&fs::read_to_string(root.join("compare.json")).unwrap()).unwrap();
        for fit in ["nonadaptive", "adaptive"] {
            for key in ["deviance", "ed_total", "wall_seconds", "rmse"] {
                assert!(report[fit][key].is_number(), "{fit}.{key}");
            }
        }
        strip_wall_time(&mut report);
        reports.push(report);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn compare_without_truth_omits_rmse() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "2");
    let out = rfsmooth(
        &[
            "compare",
            "--input",
            "d.csv",
            "--out",
            "o",
            "--basis-dim",
            "5,5,5",
            "--adaptive-dim",
            "1,1,2",
        ],
        dir.path(),
    );
    assert!(matches!(code(&out), 0 | 2), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/compare.json")).unwrap()).unwrap();
    assert!(report["adaptive"].get("rmse").is_none());
}

#[test]
fn compare_rejects_truth_on_a_different_grid() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "2");
    assert_eq!(
        code(&rfsmooth(
            &["simulate", "--out", "big.csv", "--truth", "big_truth.csv"],
            dir.path()
        )),
        0
    );
    let out = rfsmooth(
        &["compare", "--input", "d.csv", "--truth", "big_truth.csv", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!dir.path().join("o").exists());
}
