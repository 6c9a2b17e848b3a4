//! Fuse per-loop winners into one optimal parallel source.
//!
//! The plan assigns every measured loop the combination that ran it fastest,
//! resolves nesting conflicts outer-wins, and splices each winner's pragma
//! (plus its RTL prelude) into the pristine original sources. The fused
//! program is then validated by an actual run; if it fails, the shipped code
//! falls back to the whole-program winner's output, and to the untouched
//! serial sources if that fails too.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{marker_occurrences, pragma_line_after};
use crate::combinator::Combination;
use crate::executor::{RunResult, RunStatus};
use crate::fragmentor::{self, InstrumentedSource, LoopRecord};
use crate::source::{LoopId, SourceUnit};
use crate::store::Winners;

/// How the shipped code was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    /// Normal path: each loop carries its own empirical winner.
    PerLoopFusion,
    /// No markers-intact parallel result existed, so per-loop fusion is
    /// impossible; the whole-program winner is shipped instead.
    WholeProgramFallback,
}

/// Scheme assigned to one loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopScheme {
    pub winner_serial: u64,
    /// Pragma line spliced before the loop header; `None` means the loop
    /// stays serial (its winner was the baseline, its winner did not
    /// parallelize it, or an ancestor's scheme overrides it).
    pub pragma: Option<String>,
    /// RTL call statements inserted before the pragma.
    pub rtl_prelude: Vec<String>,
}

/// One outer-wins resolution: `dropped`'s parallel scheme was discarded
/// because ancestor `kept` is parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictEntry {
    pub dropped: LoopId,
    pub kept: LoopId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionPlan {
    pub per_loop: BTreeMap<LoopId, LoopScheme>,
    pub conflict_log: Vec<ConflictEntry>,
    pub whole_program_winner: u64,
    pub plan_source: PlanSource,
}

impl FusionPlan {
    /// True when the plan splices nothing (every loop stays serial).
    pub fn is_identity(&self) -> bool {
        self.per_loop.values().all(|s| s.pragma.is_none())
    }
}

#[derive(Debug, Error)]
pub enum FuserError {
    #[error("cannot splice loop {loop_id}: {detail}")]
    SpliceFailure { loop_id: LoopId, detail: String },
}

/// Build the fusion plan from the winner tables.
///
/// `outputs` maps a winning serial to that combination's stored transformed
/// sources; the pragma for each loop is extracted verbatim from its winner's
/// output at the loop's marker. `any_parallel_ok` says whether any
/// markers-intact parallel combination succeeded at all; without one the
/// plan degrades to the whole-program fallback.
pub fn build_plan(
    winners: &Winners,
    loops: &[LoopRecord],
    combos: &BTreeMap<u64, Combination>,
    outputs: &BTreeMap<u64, Vec<SourceUnit>>,
    any_parallel_ok: bool,
) -> FusionPlan {
    let records: BTreeMap<LoopId, &LoopRecord> = loops.iter().map(|r| (r.id, r)).collect();
    let mut per_loop: BTreeMap<LoopId, LoopScheme> = BTreeMap::new();
    for (&loop_id, winner) in &winners.per_loop {
        let mut scheme = LoopScheme {
            winner_serial: winner.serial,
            pragma: None,
            rtl_prelude: Vec::new(),
        };
        let combo = combos.get(&winner.serial);
        let is_parallel = combo.map(|c| !c.is_serial()).unwrap_or(false);
        if is_parallel {
            if let (Some(record), Some(units)) = (records.get(&loop_id), outputs.get(&winner.serial))
            {
                if let Some(pragma) = extract_pragma(units, record.unit.as_str(), loop_id) {
                    scheme.pragma = Some(pragma);
                    scheme.rtl_prelude = combo
                        .map(|c| {
                            c.rtl
                                .iter()
                                .map(|(routine, args)| format!("{routine}({args});"))
                                .collect()
                        })
                        .unwrap_or_default();
                }
            }
        }
        per_loop.insert(loop_id, scheme);
    }

    // Outer-wins: walk loops shallow-first; a parallel loop seals its
    // descendants.
    let mut conflict_log = Vec::new();
    let mut ordered: Vec<&LoopRecord> = loops.iter().collect();
    ordered.sort_by_key(|r| (r.depth, r.id));
    for record in ordered {
        let has_pragma = per_loop
            .get(&record.id)
            .map(|s| s.pragma.is_some())
            .unwrap_or(false);
        if !has_pragma {
            continue;
        }
        let mut ancestor = record.parent_id;
        while let Some(id) = ancestor {
            let ancestor_parallel = per_loop
                .get(&id)
                .map(|s| s.pragma.is_some())
                .unwrap_or(false);
            if ancestor_parallel {
                let scheme = per_loop.get_mut(&record.id).expect("checked above");
                scheme.pragma = None;
                scheme.rtl_prelude.clear();
                conflict_log.push(ConflictEntry {
                    dropped: record.id,
                    kept: id,
                });
                break;
            }
            ancestor = records.get(&id).and_then(|r| r.parent_id);
        }
    }

    let plan_source = if any_parallel_ok {
        PlanSource::PerLoopFusion
    } else {
        PlanSource::WholeProgramFallback
    };
    FusionPlan {
        per_loop,
        conflict_log,
        whole_program_winner: winners.whole_program,
        plan_source,
    }
}

/// Find the pragma line a combination placed at a loop's marker inside its
/// stored output.
fn extract_pragma(units: &[SourceUnit], unit_path: &str, loop_id: LoopId) -> Option<String> {
    let unit = units.iter().find(|u| u.path == unit_path)?;
    let (_, _, marker_end) = marker_occurrences(&unit.content)
        .into_iter()
        .find(|(id, _, _)| *id == loop_id)?;
    let range = pragma_line_after(&unit.content, marker_end)?;
    Some(unit.content[range].trim().to_string())
}

/// Splice the plan into the pristine original sources. An identity plan
/// returns the originals byte-identically. The spliced text per parallel
/// loop is its RTL prelude lines followed by the pragma line, inserted
/// directly before the loop header with matching indentation.
pub fn emit_fused(
    plan: &FusionPlan,
    originals: &[SourceUnit],
    loops: &[LoopRecord],
) -> Result<Vec<SourceUnit>, FuserError> {
    let records: BTreeMap<LoopId, &LoopRecord> = loops.iter().map(|r| (r.id, r)).collect();
    // Collect insertions per unit, applied back to front.
    let mut by_unit: BTreeMap<&str, Vec<(usize, Vec<String>)>> = BTreeMap::new();
    for (&loop_id, scheme) in &plan.per_loop {
        let Some(pragma) = &scheme.pragma else {
            continue;
        };
        let record = records.get(&loop_id).ok_or_else(|| FuserError::SpliceFailure {
            loop_id,
            detail: "no loop record for this id".to_string(),
        })?;
        if originals.iter().all(|u| u.path != record.unit) {
            return Err(FuserError::SpliceFailure {
                loop_id,
                detail: format!("unit {} is not among the original sources", record.unit),
            });
        }
        let mut lines = scheme.rtl_prelude.clone();
        lines.push(pragma.clone());
        by_unit
            .entry(record.unit.as_str())
            .or_default()
            .push((record.span.start, lines));
    }

    let mut out = Vec::with_capacity(originals.len());
    for unit in originals {
        let mut text = unit.content.clone();
        if let Some(insertions) = by_unit.get_mut(unit.path.as_str()) {
            insertions.sort_by(|a, b| b.0.cmp(&a.0));
            for (offset, lines) in insertions.iter() {
                if *offset > text.len() {
                    return Err(FuserError::SpliceFailure {
                        loop_id: LoopId(0),
                        detail: format!("offset {offset} outside unit {}", unit.path),
                    });
                }
                let line_start = text[..*offset].rfind('\n').map(|i| i + 1).unwrap_or(0);
                let prefix = &text[line_start..*offset];
                let insertion = if prefix.chars().all(char::is_whitespace) {
                    let indent = prefix.to_string();
                    let mut s = String::new();
                    for line in lines {
                        s.push_str(line);
                        s.push('\n');
                        s.push_str(&indent);
                    }
                    s
                } else {
                    // The header shares its line with other code; fall back
                    // to plain newlines.
                    let mut s = String::from("\n");
                    for line in lines {
                        s.push_str(line);
                        s.push('\n');
                    }
                    s
                };
                text.insert_str(*offset, &insertion);
            }
        }
        out.push(SourceUnit::new(unit.path.clone(), text));
    }
    Ok(out)
}

/// Turn a combination's stored (instrumented, possibly decorated) output
/// into shippable sources: timers and markers removed, pragmas kept. Exact
/// reversal is attempted first; sources reshaped by an external tool fall
/// back to the lenient cleaner.
pub fn ship_stored_output(
    output_units: &[SourceUnit],
    instrumented: &InstrumentedSource,
) -> Vec<SourceUnit> {
    let view = InstrumentedSource {
        units: output_units.to_vec(),
        loops: instrumented.loops.clone(),
        marker_scheme: instrumented.marker_scheme.clone(),
        max_id: instrumented.max_id,
    };
    match fragmentor::strip(&view) {
        Ok(units) => units,
        Err(_) => output_units
            .iter()
            .map(|u| SourceUnit::new(u.path.clone(), fragmentor::strip_lenient_text(&u.content)))
            .collect(),
    }
}

/// The finally shipped code version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShippedCode {
    Fused,
    /// A stored combination's output; 0 is the serial original.
    Combination(u64),
}

impl ShippedCode {
    pub fn describe(&self) -> String {
        match self {
            ShippedCode::Fused => "fused".to_string(),
            ShippedCode::Combination(0) => "serial".to_string(),
            ShippedCode::Combination(serial) => format!("combination {serial}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FallbackAttempt {
    pub candidate: String,
    pub status: RunStatus,
}

/// Outcome of fused validation, including the fallback chain taken.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedValidation {
    pub shipped: ShippedCode,
    pub attempts: Vec<FallbackAttempt>,
    /// Result of the run that validated the shipped code.
    pub result: RunResult,
    /// The sources that were actually shipped.
    pub units: Vec<SourceUnit>,
}

/// Validate the fused code with one run; on failure fall back to the
/// whole-program winner's output, then to the serial sources. The serial
/// code ships unconditionally as the last resort, whatever its validation
/// says. `run` builds, executes and tests one candidate.
pub fn validate_fused(
    fused_units: Option<Vec<SourceUnit>>,
    whole_program_winner: u64,
    whole_program_units: Option<Vec<SourceUnit>>,
    serial_units: Vec<SourceUnit>,
    run: &mut dyn FnMut(&str, &[SourceUnit]) -> RunResult,
) -> FusedValidation {
    let mut attempts = Vec::new();
    if let Some(units) = fused_units {
        let result = run("fused", &units);
        attempts.push(FallbackAttempt {
            candidate: "fused".to_string(),
            status: result.status,
        });
        if result.status == RunStatus::Ok {
            return FusedValidation {
                shipped: ShippedCode::Fused,
                attempts,
                result,
                units,
            };
        }
    }
    if whole_program_winner != 0 {
        if let Some(units) = whole_program_units {
            let candidate = format!("combination {whole_program_winner}");
            let result = run(&candidate, &units);
            attempts.push(FallbackAttempt {
                candidate,
                status: result.status,
            });
            if result.status == RunStatus::Ok {
                return FusedValidation {
                    shipped: ShippedCode::Combination(whole_program_winner),
                    attempts,
                    result,
                    units,
                };
            }
        }
    }
    let result = run("serial", &serial_units);
    attempts.push(FallbackAttempt {
        candidate: "serial".to_string(),
        status: result.status,
    });
    FusedValidation {
        shipped: ShippedCode::Combination(0),
        attempts,
        result,
        units: serial_units,
    }
}

/// One row of the per-combination table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub serial: u64,
    pub label: String,
    pub status: String,
    pub total_seconds: Option<f64>,
    /// serial_total / total, defined only for ok rows.
    pub speedup: Option<f64>,
}

/// One row of the per-loop winner table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopReportRow {
    pub loop_id: LoopId,
    pub location: String,
    pub winner_serial: u64,
    pub winner_seconds: f64,
    pub serial_seconds: Option<f64>,
    pub pragma: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedReportRow {
    pub shipped: String,
    pub status: String,
    pub total_seconds: Option<f64>,
    pub speedup: Option<f64>,
}

/// Full sweep report; serialized as `report.json` and rendered as text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub project: String,
    pub enumerated_combinations: u64,
    pub paper_formula_combinations: u64,
    pub serial_total_seconds: f64,
    pub combinations: Vec<ReportRow>,
    pub loops: Vec<LoopReportRow>,
    pub conflicts: Vec<ConflictEntry>,
    pub plan_source: PlanSource,
    pub fused: FusedReportRow,
}

/// Assemble the report from recorded rows, the winner tables, the plan, and
/// the fused validation.
#[allow(clippy::too_many_arguments)]
pub fn render_report(
    project: &str,
    rows: &[crate::store::CombinationRow],
    winners: &Winners,
    plan: &FusionPlan,
    validation: &FusedValidation,
    paper_formula_combinations: u64,
    loops: &[LoopRecord],
) -> SweepReport {
    let serial_total = winners.serial_total;
    let combinations: Vec<ReportRow> = rows
        .iter()
        .map(|row| {
            let status = row
                .result
                .as_ref()
                .map(|r| r.status.as_str().to_string())
                .unwrap_or_else(|| "pending".to_string());
            let total_seconds = row.result.as_ref().and_then(|r| r.total_seconds);
            let speedup = row
                .result
                .as_ref()
                .filter(|r| r.status == RunStatus::Ok)
                .and_then(|r| r.total_seconds)
                .map(|t| serial_total / t);
            ReportRow {
                serial: row.serial,
                label: row.combo.label(),
                status,
                total_seconds,
                speedup,
            }
        })
        .collect();

    let serial_loop_seconds: BTreeMap<LoopId, f64> = rows
        .iter()
        .find(|r| r.serial == 0)
        .and_then(|r| r.result.as_ref())
        .map(|r| r.loop_seconds.clone())
        .unwrap_or_default();
    let locations: BTreeMap<LoopId, String> = loops
        .iter()
        .map(|r| (r.id, format!("{}:{}", r.unit, r.line)))
        .collect();
    let loop_rows: Vec<LoopReportRow> = winners
        .per_loop
        .iter()
        .map(|(&loop_id, winner)| LoopReportRow {
            loop_id,
            location: locations.get(&loop_id).cloned().unwrap_or_default(),
            winner_serial: winner.serial,
            winner_seconds: winner.seconds,
            serial_seconds: serial_loop_seconds.get(&loop_id).copied(),
            pragma: plan
                .per_loop
                .get(&loop_id)
                .and_then(|s| s.pragma.clone()),
        })
        .collect();

    let fused = FusedReportRow {
        shipped: validation.shipped.describe(),
        status: validation.result.status.as_str().to_string(),
        total_seconds: validation.result.total_seconds,
        speedup: validation
            .result
            .total_seconds
            .filter(|_| validation.result.status == RunStatus::Ok)
            .map(|t| serial_total / t),
    };

    SweepReport {
        project: project.to_string(),
        enumerated_combinations: rows.len() as u64,
        paper_formula_combinations,
        serial_total_seconds: serial_total,
        combinations,
        loops: loop_rows,
        conflicts: plan.conflict_log.clone(),
        plan_source: plan.plan_source,
        fused,
    }
}

/// Human-readable rendering of the report.
pub fn report_text(report: &SweepReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("Project: {}\n", report.project));
    out.push_str(&format!(
        "Combinations: {} enumerated, {} by formula\n",
        report.enumerated_combinations, report.paper_formula_combinations
    ));
    out.push_str(&format!(
        "Serial baseline total: {:.6} s\n\n",
        report.serial_total_seconds
    ));

    out.push_str("Per-combination results:\n");
    out.push_str("  serial  status                            total(s)   speedup  label\n");
    for row in &report.combinations {
        let total = row
            .total_seconds
            .map(|t| format!("{t:>10.6}"))
            .unwrap_or_else(|| format!("{:>10}", "-"));
        let speedup = row
            .speedup
            .map(|s| format!("{s:>8.3}"))
            .unwrap_or_else(|| format!("{:>8}", "-"));
        out.push_str(&format!(
            "  {:>6}  {:<32}  {}  {}  {}\n",
            row.serial, row.status, total, speedup, row.label
        ));
    }

    out.push_str("\nPer-loop winners:\n");
    out.push_str("  loop  location                winner  loop(s)     pragma\n");
    for row in &report.loops {
        out.push_str(&format!(
            "  {:>4}  {:<22}  {:>6}  {:>9.6}  {}\n",
            row.loop_id,
            row.location,
            row.winner_serial,
            row.winner_seconds,
            row.pragma.as_deref().unwrap_or("(serial)")
        ));
    }

    if !report.conflicts.is_empty() {
        out.push_str("\nNesting conflicts (outer wins):\n");
        for conflict in &report.conflicts {
            out.push_str(&format!(
                "  loop {} dropped in favor of ancestor {}\n",
                conflict.dropped, conflict.kept
            ));
        }
    }

    let fused = &report.fused;
    let total = fused
        .total_seconds
        .map(|t| format!("{t:.6} s"))
        .unwrap_or_else(|| "-".to_string());
    let speedup = fused
        .speedup
        .map(|s| format!("{s:.3}"))
        .unwrap_or_else(|| "-".to_string());
    out.push_str(&format!(
        "\nFinal output: {} (status {}, total {}, speedup {})\n",
        fused.shipped, fused.status, total, speedup
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{decorate, naive_parallelize, produce};
    use crate::executor::{self, JobSpec};
    use crate::store::LoopWinner;
    use std::fs;
    use std::path::{Path, PathBuf};
    use std::process::{Command, Stdio};

    fn fixture_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures")
            .canonicalize()
            .expect("fixtures directory exists")
    }

    fn load_fixture(name: &str) -> SourceUnit {
        let content = fs::read_to_string(fixture_dir().join(name)).expect("fixture readable");
        SourceUnit::new(name, content)
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

    fn parallel_combo(serial: u64, clauses: &[(&str, &str)], rtl: &[(&str, &str)]) -> Combination {
        Combination {
            serial,
            backend_id: Some("naive".to_string()),
            flags: vec!["min-iterations=1".to_string()],
            clauses: clauses
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            rtl: rtl
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    fn winners_all(serial: u64, loops: &[LoopRecord], seconds: f64) -> Winners {
        Winners {
            per_loop: loops
                .iter()
                .map(|r| (r.id, LoopWinner { serial, seconds }))
                .collect(),
            whole_program: serial,
            whole_program_seconds: seconds,
            serial_total: 1.0,
        }
    }

    // Identity plan: all winners serial, zero pragmas, emitted sources are
    // byte-identical to the originals.
    #[test]
    fn identity_plan_reproduces_the_originals_byte_for_byte() {
        let original = load_fixture("matmul.c");
        let instrumented = fragmentor::annotate(&[original.clone()]).unwrap();
        let winners = winners_all(0, &instrumented.loops, 0.1);
        let combos: BTreeMap<u64, Combination> =
            [(0, Combination::serial_baseline())].into_iter().collect();
        let plan = build_plan(&winners, &instrumented.loops, &combos, &BTreeMap::new(), true);
        assert!(plan.is_identity());
        assert!(plan.conflict_log.is_empty());
        assert_eq!(plan.plan_source, PlanSource::PerLoopFusion);

        let fused = emit_fused(&plan, &[original.clone()], &instrumented.loops).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].content, original.content);
        assert_eq!(fused[0].checksum, original.checksum);
    }

    // Plan extraction: pragmas come verbatim from the winner's stored
    // output, including per-loop private/reduction clauses.
    #[test]
    fn plan_extracts_the_winners_pragmas_from_stored_outputs() {
        let original = load_fixture("matmul.c");
        let instrumented = fragmentor::annotate(&[original]).unwrap();
        let combo = parallel_combo(1, &[("schedule", "static, 8")], &[]);
        let outcome = decorate(naive_parallelize(&instrumented, &combo), &combo);
        let combos: BTreeMap<u64, Combination> = [
            (0, Combination::serial_baseline()),
            (1, combo.clone()),
        ]
        .into_iter()
        .collect();
        let outputs: BTreeMap<u64, Vec<SourceUnit>> = [(1, outcome.units.clone())].into_iter().collect();
        let winners = winners_all(1, &instrumented.loops, 0.05);
        let plan = build_plan(&winners, &instrumented.loops, &combos, &outputs, true);

        // The naive backend parallelizes the three outermost loops (1, 3, 6).
        let p1 = plan.per_loop[&LoopId(1)].pragma.as_deref().unwrap();
        assert_eq!(p1, "#pragma omp parallel for private(j) schedule(static, 8)");
        let p3 = plan.per_loop[&LoopId(3)].pragma.as_deref().unwrap();
        assert_eq!(p3, "#pragma omp parallel for private(j, k) schedule(static, 8)");
        let p6 = plan.per_loop[&LoopId(6)].pragma.as_deref().unwrap();
        assert_eq!(p6, "#pragma omp parallel for reduction(+:sum) schedule(static, 8)");
        // Loops the winner did not parallelize stay serial.
        assert!(plan.per_loop[&LoopId(2)].pragma.is_none());
        assert!(plan.conflict_log.is_empty());
    }

    // Outer-wins: when an inner loop's winner carries a pragma but an
    // ancestor is parallel too, the inner scheme is dropped and logged.
    #[test]
    fn outer_wins_drops_inner_schemes_and_logs_the_conflict() {
        let original = load_fixture("matmul.c");
        let instrumented = fragmentor::annotate(&[original]).unwrap();
        let combo_a = parallel_combo(1, &[], &[]);
        let outcome_a = naive_parallelize(&instrumented, &combo_a);

        // Combination 2's "output": pragma on inner loop 2 only (as an
        // external tool could produce).
        let mut inner_units = instrumented.units.clone();
        let marker = "/*PARSWEEP_LOOP 2*/";
        let text = &inner_units[0].content;
        let pos = text.find(marker).unwrap() + marker.len();
        let mut patched = text.clone();
        patched.insert_str(pos + 1, "#pragma omp parallel for\n");
        inner_units[0] = SourceUnit::new(inner_units[0].path.clone(), patched);

        let combos: BTreeMap<u64, Combination> = [
            (0, Combination::serial_baseline()),
            (1, combo_a),
            (2, parallel_combo(2, &[], &[])),
        ]
        .into_iter()
        .collect();
        let outputs: BTreeMap<u64, Vec<SourceUnit>> = [
            (1, outcome_a.units.clone()),
            (2, inner_units),
        ]
        .into_iter()
        .collect();

        // Winners: loop 1 (outer) via combination 1, loop 2 (its child) via
        // combination 2; everything else serial.
        let mut winners = winners_all(0, &instrumented.loops, 0.1);
        winners.per_loop.insert(LoopId(1), LoopWinner { serial: 1, seconds: 0.01 });
        winners.per_loop.insert(LoopId(2), LoopWinner { serial: 2, seconds: 0.02 });
        let plan = build_plan(&winners, &instrumented.loops, &combos, &outputs, true);

        assert!(plan.per_loop[&LoopId(1)].pragma.is_some());
        assert!(plan.per_loop[&LoopId(2)].pragma.is_none(), "inner dropped");
        assert_eq!(
            plan.conflict_log,
            vec![ConflictEntry { dropped: LoopId(2), kept: LoopId(1) }]
        );
    }

    // Construction: one-loop plan with schedule(dynamic) and
    // omp_set_num_threads(8) inserts exactly two lines before that loop.
    #[test]
    fn rtl_and_pragma_insert_exactly_two_lines() {
        let original = load_fixture("intreduce.c");
        let instrumented = fragmentor::annotate(&[original.clone()]).unwrap();
        let combo = parallel_combo(
            1,
            &[("schedule", "dynamic")],
            &[("omp_set_num_threads", "8")],
        );
        let outcome = decorate(naive_parallelize(&instrumented, &combo), &combo);
        let combos: BTreeMap<u64, Combination> = [
            (0, Combination::serial_baseline()),
            (1, combo),
        ]
        .into_iter()
        .collect();
        let outputs: BTreeMap<u64, Vec<SourceUnit>> = [(1, outcome.units.clone())].into_iter().collect();

        // Only loop 2 (the reduction) gets the parallel winner.
        let mut winners = winners_all(0, &instrumented.loops, 0.1);
        winners.per_loop.insert(LoopId(2), LoopWinner { serial: 1, seconds: 0.01 });
        let plan = build_plan(&winners, &instrumented.loops, &combos, &outputs, true);
        let fused = emit_fused(&plan, &[original.clone()], &instrumented.loops).unwrap();

        let original_lines = original.content.lines().count();
        let fused_lines = fused[0].content.lines().count();
        assert_eq!(fused_lines, original_lines + 2);
        let text = &fused[0].content;
        let rtl_pos = text.find("omp_set_num_threads(8);").unwrap();
        let pragma_pos = text
            .find("#pragma omp parallel for reduction(+:total) schedule(dynamic)")
            .unwrap();
        let loop_pos = text.find("total += v[i];").unwrap();
        assert!(rtl_pos < pragma_pos && pragma_pos < loop_pos);
        // The inserted lines carry the loop's indentation.
        let pragma_line = text.lines().find(|l| l.contains("#pragma")).unwrap();
        assert!(pragma_line.starts_with("    #pragma"));
    }

    #[test]
    fn splice_failures_are_reported_not_panicked() {
        let original = load_fixture("intreduce.c");
        let instrumented = fragmentor::annotate(&[original.clone()]).unwrap();
        let mut plan = FusionPlan {
            per_loop: BTreeMap::new(),
            conflict_log: Vec::new(),
            whole_program_winner: 0,
            plan_source: PlanSource::PerLoopFusion,
        };
        plan.per_loop.insert(
            LoopId(99),
            LoopScheme {
                winner_serial: 1,
                pragma: Some("#pragma omp parallel for".to_string()),
                rtl_prelude: vec![],
            },
        );
        let err = emit_fused(&plan, &[original], &instrumented.loops).unwrap_err();
        assert!(matches!(err, FuserError::SpliceFailure { loop_id: LoopId(99), .. }));
    }

    // Build-and-diff: the fused matmul compiles under OpenMP and its output
    // matches the serial run within the numeric tolerance.
    #[test]
    fn fused_matmul_builds_and_matches_the_serial_output() {
        if !have_cc() {
            eprintln!("skipping: no C compiler");
            return;
        }
        let original = load_fixture("matmul.c");
        let instrumented = fragmentor::annotate(&[original.clone()]).unwrap();
        let combo = parallel_combo(
            1,
            &[("schedule", "static, 8")],
            &[("omp_set_num_threads", "2")],
        );
        let outcome = decorate(naive_parallelize(&instrumented, &combo), &combo);
        let combos: BTreeMap<u64, Combination> = [
            (0, Combination::serial_baseline()),
            (1, combo),
        ]
        .into_iter()
        .collect();
        let outputs: BTreeMap<u64, Vec<SourceUnit>> = [(1, outcome.units.clone())].into_iter().collect();
        let winners = winners_all(1, &instrumented.loops, 0.05);
        let plan = build_plan(&winners, &instrumented.loops, &combos, &outputs, true);
        let fused = emit_fused(&plan, &[original.clone()], &instrumented.loops).unwrap();
        assert!(fused[0].content.contains("omp_set_num_threads(2);"));

        let dir = tempfile::tempdir().unwrap();
        // Serial run produces the golden stdout.
        let serial_spec = JobSpec::new(0, "serial", vec![original]);
        let serial = executor::execute_job(&serial_spec, &dir.path().join("serial"));
        assert_eq!(serial.status, RunStatus::Ok, "log: {}", serial.log_excerpt);
        let golden = dir.path().join("serial").join(executor::STDOUT_FILE_NAME);

        let mut fused_spec = JobSpec::new(1, "fused", fused);
        fused_spec.test_script = Some(fixture_dir().join("scripts/compare_numeric.sh"));
        fused_spec.serial_stdout = Some(golden);
        let result = executor::execute_job(&fused_spec, &dir.path().join("fused"));
        assert_eq!(result.status, RunStatus::Ok, "log: {}", result.log_excerpt);
    }

    // Stored outputs strip cleanly for fallback shipping: pragmas survive,
    // instrumentation does not.
    #[test]
    fn stored_outputs_ship_without_instrumentation() {
        let original = load_fixture("matmul.c");
        let instrumented = fragmentor::annotate(&[original]).unwrap();
        let combo = parallel_combo(1, &[("schedule", "dynamic")], &[("omp_set_num_threads", "4")]);
        let backends: [crate::combinator::BackendSpec; 0] = [];
        let outcome = produce(&instrumented, &combo, &backends, &[]).unwrap();
        let shipped = ship_stored_output(&outcome.units, &instrumented);
        let text = &shipped[0].content;
        assert!(text.contains("#pragma omp parallel for"));
        assert!(text.contains("omp_set_num_threads(4);"));
        assert!(!text.contains("PARSWEEP"));
        assert!(!text.contains("__parsweep"));
    }

    #[test]
    fn fallback_chain_ships_the_first_passing_candidate() {
        let fused = vec![SourceUnit::new("a.c", "fused")];
        let whole = vec![SourceUnit::new("a.c", "whole")];
        let serial = vec![SourceUnit::new("a.c", "serial")];

        // Fused passes outright.
        let mut run = |name: &str, _units: &[SourceUnit]| {
            let status = if name == "fused" { RunStatus::Ok } else { RunStatus::TestFailed };
            let mut r = RunResult::failed(0, status, "");
            r.total_seconds = (status == RunStatus::Ok).then_some(1.0);
            r
        };
        let v = validate_fused(Some(fused.clone()), 7, Some(whole.clone()), serial.clone(), &mut run);
        assert_eq!(v.shipped, ShippedCode::Fused);
        assert_eq!(v.attempts.len(), 1);
        assert_eq!(v.units[0].content, "fused");

        // Fused fails the test, whole-program winner passes.
        let mut run = |name: &str, _units: &[SourceUnit]| {
            let status = if name.starts_with("combination") {
                RunStatus::Ok
            } else {
                RunStatus::TestFailed
            };
            let mut r = RunResult::failed(0, status, "");
            r.total_seconds = (status == RunStatus::Ok).then_some(2.0);
            r
        };
        let v = validate_fused(Some(fused.clone()), 7, Some(whole.clone()), serial.clone(), &mut run);
        assert_eq!(v.shipped, ShippedCode::Combination(7));
        assert_eq!(v.attempts.len(), 2);
        assert_eq!(v.attempts[0].status, RunStatus::TestFailed);
        assert_eq!(v.units[0].content, "whole");

        // Everything fails: the serial code ships regardless.
        let mut run = |_name: &str, _units: &[SourceUnit]| {
            RunResult::failed(0, RunStatus::BuildFailed, "")
        };
        let v = validate_fused(Some(fused), 7, Some(whole), serial, &mut run);
        assert_eq!(v.shipped, ShippedCode::Combination(0));
        assert_eq!(v.attempts.len(), 3);
        assert_eq!(v.units[0].content, "serial");
    }

    // Ratio definition: serial 10 s over combo 20 s is 0.5; over 2 s is 5.
    #[test]
    fn report_speedups_are_serial_over_combination() {
        use crate::store::{CombinationRow, RowState};
        let mk_row = |serial: u64, status: RunStatus, total: Option<f64>| {
            let mut result = RunResult::failed(serial, status, "");
            result.total_seconds = total;
            CombinationRow {
                serial,
                combo: if serial == 0 {
                    Combination::serial_baseline()
                } else {
                    parallel_combo(serial, &[], &[])
                },
                state: RowState::Done,
                result: Some(result),
            }
        };
        let rows = vec![
            mk_row(0, RunStatus::Ok, Some(10.0)),
            mk_row(1, RunStatus::Ok, Some(20.0)),
            mk_row(2, RunStatus::Ok, Some(2.0)),
            mk_row(3, RunStatus::BuildFailed, None),
            mk_row(4, RunStatus::MarkersLostWholeProgramOnly, Some(1.0)),
        ];
        let winners = Winners {
            per_loop: BTreeMap::new(),
            whole_program: 4,
            whole_program_seconds: 1.0,
            serial_total: 10.0,
        };
        let plan = FusionPlan {
            per_loop: BTreeMap::new(),
            conflict_log: Vec::new(),
            whole_program_winner: 4,
            plan_source: PlanSource::PerLoopFusion,
        };
        let mut validation_result = RunResult::failed(0, RunStatus::Ok, "");
        validation_result.total_seconds = Some(4.0);
        let validation = FusedValidation {
            shipped: ShippedCode::Fused,
            attempts: vec![],
            result: validation_result,
            units: vec![],
        };
        let report = render_report("proj", &rows, &winners, &plan, &validation, 4, &[]);
        assert_eq!(report.combinations[0].speedup, Some(1.0));
        assert_eq!(report.combinations[1].speedup, Some(0.5));
        assert_eq!(report.combinations[2].speedup, Some(5.0));
        assert_eq!(report.combinations[3].speedup, None);
        // Speedup is defined only for ok rows.
        assert_eq!(report.combinations[4].speedup, None);
        assert_eq!(report.fused.speedup, Some(2.5));
        assert_eq!(report.enumerated_combinations, 5);
        assert_eq!(report.paper_formula_combinations, 4);

        let text = report_text(&report);
        assert!(text.contains("Project: proj"));
        assert!(text.contains("Final output: fused"));
    }
}
