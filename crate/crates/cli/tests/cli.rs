//! End-to-end tests through the installed binary: flag plumbing, exit code
//! classes, artifact layout, and both job backends.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_parsweep")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root")
}

fn have_cc() -> bool {
    Command::new("cc")
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn small_spec() -> &'static str {
    r#"{
        "backends": [{"id": "naive", "flags": ["min-iterations=1000"]}],
        "omp_directive_params": [{"clause": "schedule", "values": ["static"]}],
        "omp_rtl_params": []
    }"#
}

fn parsweep(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn setup_matmul(dir: &Path) {
    fs::copy(repo_root().join("fixtures/matmul.c"), dir.join("matmul.c")).unwrap();
    fs::write(dir.join("spec.json"), small_spec()).unwrap();
}

#[test]
fn enumerate_prints_counts_and_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), small_spec()).unwrap();
    let out = parsweep(dir.path(), &["enumerate", "--spec", "spec.json"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("enumerated:"), "got: {text}");
    assert!(text.contains("paper formula:"), "got: {text}");
    // Dry run: nothing appears on disk beyond the spec we wrote.
    let entries: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["spec.json".to_string()]);
}

#[test]
fn enumerate_accepts_the_shipped_default_params() {
    let dir = tempfile::tempdir().unwrap();
    let spec = repo_root().join("share/params.default.json");
    let out = parsweep(dir.path(), &["enumerate", "--spec", spec.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("enumerated:"));
}

#[test]
fn run_sweeps_matmul_and_ships_a_clean_fused_source() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    let script = repo_root().join("fixtures/scripts/compare_numeric.sh");
    let out = parsweep(
        dir.path(),
        &[
            "run",
            "-p",
            "demo",
            "--mode",
            "new",
            "-i",
            "matmul.c",
            "--spec",
            "spec.json",
            "--test-script",
            script.to_str().unwrap(),
        ],
    );
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        stdout_of(&out),
        stderr_of(&out)
    );
    let stdout = stdout_of(&out);
    assert!(stdout.contains("project: demo"));
    assert!(stdout.contains("shipped:"));

    // One progress line per combination on stderr.
    let progress_lines = stderr_of(&out)
        .lines()
        .filter(|l| l.starts_with('['))
        .count();
    assert_eq!(progress_lines, 3, "stderr: {}", stderr_of(&out));

    let optimal = dir.path().join("demo/optimal");
    for file in ["matmul.c", "report.json", "report.txt", "fusion_plan.json"] {
        assert!(optimal.join(file).exists(), "missing {file}");
    }
    let shipped = fs::read_to_string(optimal.join("matmul.c")).unwrap();
    assert!(!shipped.contains("PARSWEEP"));
    assert!(!shipped.contains("__parsweep"));

    // Report replays the stored rendering; export emits one JSON line per row.
    let report = parsweep(dir.path(), &["report", "-p", "demo"]);
    assert!(report.status.success());
    assert!(stdout_of(&report).contains("Per-combination results"));
    let export = parsweep(dir.path(), &["export", "-p", "demo"]);
    assert!(export.status.success());
    assert_eq!(stdout_of(&export).lines().count(), 3);
    for line in stdout_of(&export).lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("valid JSON line");
    }
}

#[test]
fn mode_new_suffixes_a_taken_project_name() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    let args = [
        "run", "-p", "demo", "--mode", "new", "-i", "matmul.c", "--spec", "spec.json",
    ];
    let first = parsweep(dir.path(), &args);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    assert!(stdout_of(&first).contains("project: demo\n"));
    let second = parsweep(dir.path(), &args);
    assert!(second.status.success(), "stderr: {}", stderr_of(&second));
    assert!(
        stdout_of(&second).contains("project: demo_1"),
        "stdout: {}",
        stdout_of(&second)
    );
    assert!(dir.path().join("demo_1/optimal").exists());
}

#[test]
fn continuing_an_unknown_project_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    let out = parsweep(
        dir.path(),
        &[
            "run", "-p", "nonexist", "--mode", "continue", "-i", "matmul.c", "--spec", "spec.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("nonexist"));

    let out = parsweep(dir.path(), &["continue", "-p", "nonexist"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn a_failing_serial_baseline_exits_3() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.c"), "int main(void) { return 0\n").unwrap();
    fs::write(dir.path().join("spec.json"), small_spec()).unwrap();
    let out = parsweep(
        dir.path(),
        &["run", "-p", "bad", "-i", "broken.c", "--spec", "spec.json"],
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("serial baseline"));
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    // Unknown mode.
    let out = parsweep(
        dir.path(),
        &[
            "run", "-p", "x", "--mode", "sideways", "-i", "matmul.c", "--spec", "spec.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    // Scheduler backend without a template file.
    let out = parsweep(
        dir.path(),
        &[
            "run",
            "-p",
            "x",
            "-i",
            "matmul.c",
            "--spec",
            "spec.json",
            "--jobs-backend",
            "scheduler",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    // Missing spec file.
    let out = parsweep(
        dir.path(),
        &["run", "-p", "x", "-i", "matmul.c", "--spec", "nope.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    // Clap usage error (missing required flag).
    let out = parsweep(dir.path(), &["run", "-p", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scheduler_backend_runs_through_command_templates() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    let template = repo_root().join("share/scheduler.local-sh.json");
    let out = parsweep(
        dir.path(),
        &[
            "run",
            "-p",
            "sched",
            "-i",
            "matmul.c",
            "--spec",
            "spec.json",
            "--jobs-backend",
            "scheduler",
            "--scheduler-template",
            template.to_str().unwrap(),
        ],
    );
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        stdout_of(&out),
        stderr_of(&out)
    );
    // The combination ran as a staged job bundle.
    let combo_dir = dir.path().join("sched/combos/00001");
    assert!(combo_dir.join("job.json").exists());
    assert!(combo_dir.join("job.sh").exists());
    assert!(combo_dir.join("job_result.json").exists());
    assert!(combo_dir.join("run/parsweep_timing.txt").exists());
    assert!(dir.path().join("sched/optimal/report.json").exists());
}

#[test]
fn save_all_false_leaves_only_the_optimal_artifacts_and_the_store() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    setup_matmul(dir.path());
    let out = parsweep(
        dir.path(),
        &[
            "run",
            "-p",
            "lean",
            "-i",
            "matmul.c",
            "--spec",
            "spec.json",
            "--save-all",
            "false",
        ],
    );
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let mut entries: Vec<String> = fs::read_dir(dir.path().join("lean"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, vec!["optimal".to_string()]);
    assert!(dir.path().join("parsweep.db").exists());
}

#[test]
fn strip_removes_instrumentation_and_keeps_pragmas() {
    let dir = tempfile::tempdir().unwrap();
    let decorated = "\
#include <stdio.h>
#ifndef PARSWEEP_RT
#define PARSWEEP_RT
void __parsweep_loop_start(int id);
void __parsweep_loop_stop(int id);
#endif /* PARSWEEP_RT */
int main(void) {
    int i, n = 0;
    {__parsweep_loop_start(1);
    /*PARSWEEP_LOOP 1*/
    #pragma omp parallel for reduction(+:n)
    for (i = 0; i < 100; i++) {
        n += i;
    }
    __parsweep_loop_stop(1);}
    printf(\"%d\\n\", n);
    return 0;
}
";
    fs::write(dir.path().join("dec.c"), decorated).unwrap();
    let out = parsweep(dir.path(), &["strip", "-i", "dec.c"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(!text.contains("PARSWEEP"));
    assert!(!text.contains("__parsweep"));
    assert!(text.contains("#pragma omp parallel for reduction(+:n)"));
    assert!(text.contains("for (i = 0; i < 100; i++)"));

    // Several inputs demand --out-dir.
    fs::write(dir.path().join("dec2.c"), decorated).unwrap();
    let out = parsweep(dir.path(), &["strip", "-i", "dec.c", "-i", "dec2.c"]);
    assert_eq!(out.status.code(), Some(2));
    let out = parsweep(
        dir.path(),
        &["strip", "-i", "dec.c", "-i", "dec2.c", "--out-dir", "clean"],
    );
    assert!(out.status.success());
    assert!(dir.path().join("clean/dec.c").exists());
    assert!(dir.path().join("clean/dec2.c").exists());
}

#[test]
fn makefile_projects_sweep_through_their_own_build() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let proj = dir.path().join("mproj");
    fs::create_dir(&proj).unwrap();
    for name in ["main.c", "stencil.c", "util.c", "util.h", "Makefile"] {
        fs::copy(
            repo_root().join("fixtures/multi").join(name),
            proj.join(name),
        )
        .unwrap();
    }
    fs::write(dir.path().join("spec.json"), small_spec()).unwrap();
    let out = parsweep(
        dir.path(),
        &[
            "run",
            "-p",
            "multi",
            "-i",
            "mproj",
            "--input-kind",
            "makefile",
            "--artifact",
            "app",
            "--spec",
            "spec.json",
        ],
    );
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        stdout_of(&out),
        stderr_of(&out)
    );
    let optimal = dir.path().join("multi/optimal");
    assert!(optimal.join("main.c").exists());
    assert!(optimal.join("stencil.c").exists());
    assert!(optimal.join("util.c").exists());
    for unit in ["main.c", "stencil.c", "util.c"] {
        let text = fs::read_to_string(optimal.join(unit)).unwrap();
        assert!(!text.contains("PARSWEEP"), "{unit} still instrumented");
    }
}
