//! Checks over the C fixture corpus.
//!
//! The loop inventories below were enumerated by hand from the fixture
//! sources (file and line numbers refer to the committed fixtures) and act
//! as the ground truth the scanner must reproduce. The remaining tests
//! round-trip instrumentation and, when a C compiler is available, build and
//! run original and instrumented programs to compare observable output and
//! inspect the timing side channel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use parsweep_core::backends::produce;
use parsweep_core::combinator::Combination;
use parsweep_core::fragmentor::{annotate, scan_loops, strip, LoopKind, LoopShape};
use parsweep_core::source::{LoopId, SourceUnit};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load(name: &str) -> SourceUnit {
    let path = fixture_dir().join(name);
    let content = fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read fixture {}: {e}", path.display()));
    let file = Path::new(name)
        .file_name()
        .unwrap()
        .to_string_lossy()
        .into_owned();
    SourceUnit::new(file, &content)
}

fn have_gcc() -> bool {
    Command::new("gcc")
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Hand-enumerated loop inventory of fixtures/nas_nest.c:
/// (header line, kind, shape, depth, parent id). Ids are assigned in
/// document order starting at 1.
const NAS_NEST_LOOPS: &[(u32, LoopKind, LoopShape, u32, Option<u32>)] = &[
    (44, LoopKind::For, LoopShape::Canonical, 0, None),
    (45, LoopKind::For, LoopShape::Canonical, 1, Some(1)),
    (54, LoopKind::For, LoopShape::Canonical, 0, None),
    (62, LoopKind::For, LoopShape::Canonical, 0, None),
    (71, LoopKind::For, LoopShape::Canonical, 0, None),
    (82, LoopKind::For, LoopShape::Canonical, 0, None),
    (84, LoopKind::For, LoopShape::Canonical, 1, Some(6)),
    (103, LoopKind::For, LoopShape::Canonical, 0, None),
    (110, LoopKind::While, LoopShape::NonCanonical, 0, None),
    (121, LoopKind::For, LoopShape::Canonical, 1, Some(9)),
    (136, LoopKind::For, LoopShape::Canonical, 0, None),
    (137, LoopKind::For, LoopShape::Canonical, 1, Some(11)),
    (138, LoopKind::For, LoopShape::Canonical, 2, Some(12)),
    (152, LoopKind::For, LoopShape::Canonical, 0, None),
    (153, LoopKind::For, LoopShape::Canonical, 1, Some(14)),
    (154, LoopKind::For, LoopShape::Canonical, 2, Some(15)),
    (171, LoopKind::For, LoopShape::Canonical, 0, None),
    (172, LoopKind::For, LoopShape::Canonical, 1, Some(17)),
    (189, LoopKind::For, LoopShape::Canonical, 0, None),
    (194, LoopKind::For, LoopShape::Canonical, 0, None),
    (207, LoopKind::DoWhile, LoopShape::NonCanonical, 0, None),
    (224, LoopKind::For, LoopShape::NonCanonical, 0, None),
    (239, LoopKind::For, LoopShape::NonCanonical, 0, None),
    (256, LoopKind::For, LoopShape::Canonical, 0, None),
    (279, LoopKind::For, LoopShape::Canonical, 0, None),
    (305, LoopKind::While, LoopShape::NonCanonical, 0, None),
];

#[test]
fn nas_nest_inventory_matches_hand_enumeration() {
    let unit = load("nas_nest.c");
    let records = scan_loops(&unit).expect("nas_nest scans");

    assert_eq!(
        records.len(),
        NAS_NEST_LOOPS.len(),
        "loop count, got lines {:?}",
        records.iter().map(|r| r.line).collect::<Vec<_>>()
    );
    for (idx, (line, kind, shape, depth, parent)) in NAS_NEST_LOOPS.iter().enumerate() {
        let rec = &records[idx];
        assert_eq!(rec.id, LoopId(idx as u32 + 1), "id of loop at line {line}");
        assert_eq!(rec.line, *line, "line of loop {}", rec.id);
        assert_eq!(rec.kind, *kind, "kind of loop at line {line}");
        assert_eq!(rec.shape, *shape, "shape of loop at line {line}");
        assert_eq!(rec.depth, *depth, "depth of loop at line {line}");
        assert_eq!(rec.parent_id, parent.map(LoopId), "parent of loop at line {line}");
    }

    // Canonical header details, spot-checked against the source text.
    let first = records[0].canonical.as_ref().unwrap();
    assert_eq!(first.var, "i");
    assert_eq!(first.stride, 1);
    assert_eq!(first.bound_expr, "N");
    assert_eq!(first.bound_const, None, "macro bound is not a literal");
    assert_eq!(first.trip_count, None);

    let strided = records[24].canonical.as_ref().unwrap();
    assert_eq!(records[24].line, 279);
    assert_eq!(strided.var, "i");
    assert_eq!(strided.stride, 2);

    // Descending count with a loop-invariant bound is still canonical.
    let descending = records[23].canonical.as_ref().unwrap();
    assert_eq!(records[23].line, 256);
    assert_eq!(descending.var, "i");
    assert_eq!(descending.stride, -1);
    assert_eq!(descending.cmp, ">=");

    // The unbraced loop at line 54 must still be spanned correctly.
    let unbraced = &records[2];
    assert!(!unbraced.body_braced);
    let body = unbraced.body_span.slice(&unit.content);
    assert!(body.contains("bv[i]"), "unbraced body: {body:?}");
}

#[test]
fn matmul_inventory_matches_hand_enumeration() {
    let unit = load("matmul.c");
    let records = scan_loops(&unit).expect("matmul scans");
    assert_eq!(records.len(), 6);

    let expect: &[(u32, u32, Option<u32>, &str)] = &[
        (15, 0, None, "i"),
        (16, 1, Some(1), "j"),
        (23, 0, None, "i"),
        (24, 1, Some(3), "j"),
        (25, 2, Some(4), "k"),
        (32, 0, None, "i"),
    ];
    for (idx, (line, depth, parent, var)) in expect.iter().enumerate() {
        let rec = &records[idx];
        assert_eq!(rec.line, *line);
        assert_eq!(rec.kind, LoopKind::For);
        assert_eq!(rec.shape, LoopShape::Canonical);
        assert_eq!(rec.depth, *depth);
        assert_eq!(rec.parent_id, parent.map(LoopId));
        let canon = rec.canonical.as_ref().unwrap();
        assert_eq!(canon.var, *var);
        assert_eq!(canon.trip_count, Some(512), "literal bounds give known trips");
    }
}

#[test]
fn corpus_round_trips_byte_exact() {
    for name in [
        "matmul.c",
        "jacobi2d.c",
        "triad.c",
        "intreduce.c",
        "nas_nest.c",
    ] {
        let unit = load(name);
        let instrumented = annotate(std::slice::from_ref(&unit)).expect(name);
        assert_ne!(instrumented.units[0].content, unit.content);
        let restored = strip(&instrumented).expect(name);
        assert_eq!(restored.len(), 1);
        assert_eq!(restored[0].content, unit.content, "{name} round trip");
    }
}

#[test]
fn multi_unit_ids_are_global_and_round_trip() {
    let units = vec![
        load("multi/main.c"),
        load("multi/stencil.c"),
        load("multi/util.c"),
    ];
    let instrumented = annotate(&units).expect("multi fixture annotates");

    // Hand count: main.c has 1 loop; stencil.c has 4 (2-deep nest, a while,
    // and a for inside the while); util.c has 3 (2-deep nest plus one).
    assert_eq!(instrumented.max_id, 8);
    let mut per_unit: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for rec in &instrumented.loops {
        per_unit.entry(rec.unit.as_str()).or_default().push(rec.id.0);
    }
    assert_eq!(per_unit["main.c"], vec![1]);
    assert_eq!(per_unit["stencil.c"], vec![2, 3, 4, 5]);
    assert_eq!(per_unit["util.c"], vec![6, 7, 8]);

    let while_loop = instrumented.loops.iter().find(|r| r.id == LoopId(4)).unwrap();
    assert_eq!(while_loop.kind, LoopKind::While);
    let inner = instrumented.loops.iter().find(|r| r.id == LoopId(5)).unwrap();
    assert_eq!(inner.parent_id, Some(LoopId(4)));

    let restored = strip(&instrumented).expect("multi strip");
    for (orig, got) in units.iter().zip(&restored) {
        assert_eq!(got.content, orig.content, "{}", orig.path);
    }
}

// ---------------------------------------------------------------------------
// Compiled checks (skipped when gcc is unavailable)
// ---------------------------------------------------------------------------

fn compile(dir: &Path, sources: &[PathBuf], out: &str) -> PathBuf {
    let bin = dir.join(out);
    let status = Command::new("gcc")
        .arg("-O2")
        .args(sources)
        .arg("-o")
        .arg(&bin)
        .status()
        .expect("gcc runs");
    assert!(status.success(), "gcc failed for {out}");
    bin
}

fn run_in(bin: &Path, cwd: &Path, timing: Option<&Path>) -> String {
    let mut cmd = Command::new(bin);
    cmd.current_dir(cwd);
    match timing {
        Some(path) => {
            cmd.env("PARSWEEP_TIMING_FILE", path);
        }
        None => {
            cmd.env_remove("PARSWEEP_TIMING_FILE");
        }
    }
    let out = cmd.output().expect("fixture runs");
    assert!(out.status.success(), "fixture exited nonzero");
    String::from_utf8(out.stdout).expect("fixture output is utf-8")
}

#[test]
fn instrumented_fixtures_preserve_stdout() {
    if !have_gcc() {
        eprintln!("skipping: gcc not available");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "matmul.c",
        "jacobi2d.c",
        "triad.c",
        "intreduce.c",
        "nas_nest.c",
    ] {
        let unit = load(name);
        let stem = name.trim_end_matches(".c");

        let orig_src = tmp.path().join(name);
        fs::write(&orig_src, &unit.content).unwrap();
        let orig_bin = compile(tmp.path(), &[orig_src], &format!("{stem}_orig"));
        let want = run_in(&orig_bin, tmp.path(), None);

        let instrumented = annotate(std::slice::from_ref(&unit)).unwrap();
        let inst_src = tmp.path().join(format!("{stem}_inst.c"));
        fs::write(&inst_src, &instrumented.units[0].content).unwrap();
        let inst_bin = compile(tmp.path(), &[inst_src], &format!("{stem}_inst"));
        let timing = tmp.path().join(format!("{stem}_timing.txt"));
        let got = run_in(&inst_bin, tmp.path(), Some(&timing));

        assert_eq!(got, want, "{name}: instrumentation changed stdout");
        assert!(timing.exists(), "{name}: timing file missing");
    }
}

#[test]
fn matmul_timing_covers_every_loop_and_respects_nesting() {
    if !have_gcc() {
        eprintln!("skipping: gcc not available");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let unit = load("matmul.c");
    let instrumented = annotate(std::slice::from_ref(&unit)).unwrap();
    let src = tmp.path().join("matmul_inst.c");
    fs::write(&src, &instrumented.units[0].content).unwrap();
    let bin = compile(tmp.path(), &[src], "matmul_inst");
    let timing = tmp.path().join("timing.txt");
    run_in(&bin, tmp.path(), Some(&timing));

    let text = fs::read_to_string(&timing).unwrap();
    let mut seconds: BTreeMap<u32, f64> = BTreeMap::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        assert_eq!(parts.next(), Some("LOOP"), "line {line:?}");
        let id: u32 = parts.next().unwrap().parse().unwrap();
        let secs = parts.next().unwrap();
        let (_, frac) = secs.split_once('.').expect("decimal seconds");
        assert_eq!(frac.len(), 9, "nanosecond precision in {line:?}");
        assert!(parts.next().is_none());
        assert!(
            seconds.insert(id, secs.parse().unwrap()).is_none(),
            "duplicate id {id}"
        );
    }
    assert_eq!(seconds.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);

    // A nested loop's accumulated time cannot exceed its parent's (allow a
    // small scheduling epsilon), and the 512^3 product dominates everything.
    let eps = 0.005;
    assert!(seconds[&2] <= seconds[&1] + eps, "init inner vs outer");
    assert!(seconds[&4] <= seconds[&3] + eps, "compute j vs i");
    assert!(seconds[&5] <= seconds[&4] + eps, "compute k vs j");
    assert!(
        seconds[&3] >= 0.02,
        "compute nest should dominate, got {}",
        seconds[&3]
    );
    assert!(seconds[&3] >= seconds[&1], "compute outweighs init");
    assert!(seconds[&3] >= seconds[&6], "compute outweighs checksum");
}

#[test]
fn timing_file_defaults_to_working_directory() {
    if !have_gcc() {
        eprintln!("skipping: gcc not available");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let unit = load("intreduce.c");
    let instrumented = annotate(std::slice::from_ref(&unit)).unwrap();
    let src = tmp.path().join("intreduce_inst.c");
    fs::write(&src, &instrumented.units[0].content).unwrap();
    let bin = compile(tmp.path(), &[src], "intreduce_inst");

    let cwd = tmp.path().join("rundir");
    fs::create_dir(&cwd).unwrap();
    run_in(&bin, &cwd, None);
    let default_file = cwd.join("parsweep_timing.txt");
    assert!(default_file.exists(), "default timing path in cwd");
    let text = fs::read_to_string(&default_file).unwrap();
    assert_eq!(text.lines().count(), 2, "two loops in intreduce: {text:?}");
}

#[test]
fn decorated_parallel_matmul_passes_the_blackbox_script() {
    if !have_gcc() {
        eprintln!("skipping: gcc not available");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let unit = load("matmul.c");

    let orig_src = tmp.path().join("matmul.c");
    fs::write(&orig_src, &unit.content).unwrap();
    let orig_bin = compile(tmp.path(), &[orig_src], "matmul_orig");
    let golden = tmp.path().join("golden.txt");
    fs::write(&golden, run_in(&orig_bin, tmp.path(), None)).unwrap();

    let instrumented = annotate(std::slice::from_ref(&unit)).unwrap();
    let combo = Combination {
        serial: 1,
        backend_id: Some("naive".to_string()),
        flags: vec!["min-iterations=1".to_string()],
        clauses: vec![("schedule".to_string(), "static, 8".to_string())],
        rtl: vec![("omp_set_num_threads".to_string(), "2".to_string())],
    };
    let outcome = produce(&instrumented, &combo, &[], &[]).unwrap();
    assert_eq!(outcome.parallelized_loops.len(), 3);

    let par_src = tmp.path().join("matmul_par.c");
    fs::write(&par_src, &outcome.units[0].content).unwrap();
    let par_bin = tmp.path().join("matmul_par");
    let status = Command::new("gcc")
        .args(["-O2", "-fopenmp"])
        .arg(&par_src)
        .arg("-o")
        .arg(&par_bin)
        .status()
        .expect("gcc runs");
    assert!(status.success(), "decorated source must compile under OpenMP");

    let timing = tmp.path().join("timing.txt");
    let stdout = run_in(&par_bin, tmp.path(), Some(&timing));
    let cand = tmp.path().join("cand.txt");
    fs::write(&cand, &stdout).unwrap();

    let script = fixture_dir().join("scripts/compare_numeric.sh");
    let check = Command::new("sh")
        .arg(&script)
        .arg(&cand)
        .arg(tmp.path())
        .env("PARSWEEP_SERIAL_STDOUT", &golden)
        .status()
        .expect("test script runs");
    assert!(
        check.success(),
        "parallel output drifted: golden={:?} candidate={stdout:?}",
        fs::read_to_string(&golden).unwrap()
    );
}

#[test]
fn instrumented_multi_unit_build_preserves_stdout() {
    if !have_gcc() {
        eprintln!("skipping: gcc not available");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let units = vec![
        load("multi/main.c"),
        load("multi/stencil.c"),
        load("multi/util.c"),
    ];

    // Original build via the fixture Makefile.
    let orig = tmp.path().join("orig");
    fs::create_dir(&orig).unwrap();
    for unit in &units {
        fs::write(orig.join(&unit.path), &unit.content).unwrap();
    }
    for extra in ["multi/util.h", "multi/Makefile"] {
        let body = fs::read_to_string(fixture_dir().join(extra)).unwrap();
        fs::write(orig.join(Path::new(extra).file_name().unwrap()), body).unwrap();
    }
    let status = Command::new("make")
        .arg("CC=gcc")
        .current_dir(&orig)
        .output()
        .expect("make runs");
    assert!(status.status.success(), "make failed: {status:?}");
    let want = run_in(&orig.join("app"), &orig, None);

    // Instrumented build via the same Makefile.
    let inst = tmp.path().join("inst");
    fs::create_dir(&inst).unwrap();
    let instrumented = annotate(&units).unwrap();
    for unit in &instrumented.units {
        fs::write(inst.join(&unit.path), &unit.content).unwrap();
    }
    for extra in ["multi/util.h", "multi/Makefile"] {
        let body = fs::read_to_string(fixture_dir().join(extra)).unwrap();
        fs::write(inst.join(Path::new(extra).file_name().unwrap()), body).unwrap();
    }
    let status = Command::new("make")
        .arg("CC=gcc")
        .current_dir(&inst)
        .output()
        .expect("make runs");
    assert!(status.status.success(), "instrumented make failed: {status:?}");
    let timing = inst.join("timing.txt");
    let got = run_in(&inst.join("app"), &inst, Some(&timing));

    assert_eq!(got, want, "multi fixture output changed");
    let text = fs::read_to_string(&timing).unwrap();
    assert_eq!(text.lines().count(), 8, "eight loops overall: {text:?}");
}
