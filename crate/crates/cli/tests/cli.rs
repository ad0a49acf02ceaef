use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ladabert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladabert")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A one-epoch teacher plus a P = 0.4 plan, shared by the end-to-end tests.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = ladabert(p, &["train-teacher", "--task-seed", "0", "--epochs", "1", "--out", "t.bundle"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(p.join("t.bundle.config").exists());
    let out = ladabert(
        p,
        &["plan", "--bundle", "t.bundle", "--target", "0.4", "--p-embd", "0.5", "--p-svd", "0.6", "--delta", "0.8", "--out", "p.plan"],
    );
    assert_eq!(code(&out), 0, "{out:?}");
    dir
}

#[test]
fn plan_check_compress_round_trip() {
    let dir = setup();
    let p = dir.path();
    let plan = fs::read_to_string(p.join("p.plan")).unwrap();
    assert!(plan.contains("p_overall = 0.4") && plan.contains("delta = 0.8"), "{plan}");

    let out = ladabert(p, &["check", "--bundle", "t.bundle", "--plan", "p.plan"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("status: ok"));

    let out = ladabert(p, &["compress", "--bundle", "t.bundle", "--plan", "p.plan", "--one-shot", "--out", "c.bundle"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let retained: f64 = stdout(&out).trim().rsplit('(').next().unwrap().trim_end_matches(')').parse().unwrap();
    assert!((retained - 0.4).abs() < 0.004, "{retained}");
    for f in ["c.bundle", "c.bundle.masks", "c.bundle.config"] {
        assert!(p.join(f).exists(), "{f}");
    }
}

#[test]
fn random_search_plan_is_feasible() {
    let dir = setup();
    let out = ladabert(dir.path(), &["plan", "--bundle", "t.bundle", "--target", "0.4", "--search", "6", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("seed = 2"));
}

#[test]
fn distill_writes_student_and_curve() {
    let dir = setup();
    let p = dir.path();
    let out = ladabert(
        p,
        &[
            "distill", "--teacher", "t.bundle", "--plan", "p.plan", "--task-seed", "0", "--out", "run", "--lr", "1e-3",
            "--max-steps-per-iteration", "3", "--eval-every", "3",
        ],
    );
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("iteration 4: budget 0.4000"));
    let curve = fs::read_to_string(p.join("run/curve.csv")).unwrap();
    assert!(curve.starts_with("step,iteration,retained_fraction,"));
    assert_eq!(curve.lines().count(), 1 + 5 * 3);
    assert!(p.join("run/student.bundle").exists() && p.join("run/student.bundle.config").exists());

    let out = ladabert(p, &["analyze", "curves", "--a", "run/curve.csv", "--b", "run/curve.csv", "--thresholds", "0.0"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).starts_with("curve,threshold,first_step,final_value\na,0,3,"));
}

#[test]
fn bias_histogram_csv() {
    let dir = setup();
    let p = dir.path();
    for mode in ["prune", "svd", "hybrid"] {
        let out = ladabert(p, &["analyze", "bias", "--bundle", "t.bundle", "--mode", mode, "--retain", "0.2", "--bins", "11"]);
        assert_eq!(code(&out), 0, "{out:?}");
        let text = stdout(&out);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,count");
        assert_eq!(lines.len(), 1 + 11 + 1);
        assert!(lines[12].starts_with("stats,"));
        // Default entry is layers.*.ffn.* (32x64 = 2048 values).
        let total: usize = lines[1..12].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 2048);
    }
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    let infeasible = ladabert(p, &["plan", "--bundle", "t.bundle", "--target", "0.01", "--p-embd", "0.9", "--p-svd", "0.9"]);
    assert_eq!(code(&infeasible), 2, "{infeasible:?}");

    let bad_split = ladabert(
        p,
        &["analyze", "bias", "--bundle", "t.bundle", "--mode", "hybrid", "--retain", "0.2", "--split", "0.5,0.5"],
    );
    assert_eq!(code(&bad_split), 2);

    assert_eq!(code(&ladabert(p, &["check", "--bundle", "missing.bundle", "--plan", "p.plan"])), 4);
    fs::write(p.join("broken.plan"), "p_overall = lots\n").unwrap();
    assert_eq!(code(&ladabert(p, &["check", "--bundle", "t.bundle", "--plan", "broken.plan"])), 4);
    fs::write(p.join("junk.bundle"), "not a bundle").unwrap();
    assert_eq!(code(&ladabert(p, &["check", "--bundle", "junk.bundle", "--plan", "p.plan"])), 4);
    assert_eq!(code(&ladabert(p, &["no-such-command"])), 4);
    assert_eq!(code(&ladabert(p, &["--help"])), 0);
}

#[test]
fn diverging_run_exits_with_numeric_failure() {
    let dir = setup();
    let p = dir.path();
    let out = ladabert(
        p,
        &[
            "distill", "--teacher", "t.bundle", "--plan", "p.plan", "--task-seed", "0", "--out", "boom", "--lr", "1e6",
            "--max-steps-per-iteration", "20",
        ],
    );
    assert_eq!(code(&out), 3, "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
