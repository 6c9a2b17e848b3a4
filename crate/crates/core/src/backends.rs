//! Parallelizer backends.
//!
//! Two ways to produce a parallelized copy of the instrumented sources: the
//! built-in conservative parallelizer (`naive_parallelize`, driven by the
//! dependence analysis in [`crate::analysis`]) and adapters around external
//! source-to-source compilers (`external_parallelize`). Either way the result
//! is a [`BackendOutcome`]; `decorate` then injects the combination's clause
//! and RTL assignments at every loop the backend parallelized.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::process::{Command, Stdio};
use std::time::Instant;

use thiserror::Error;

use crate::analysis::{analyze_loop, Classification, LoopAnalysis, RejectReason};
use crate::combinator::{BackendSpec, Combination};
use crate::fragmentor::{marker_comment, scan_loops, InstrumentedSource, LoopRecord};
use crate::source::{LoopId, SourceUnit};

pub const NAIVE_BACKEND_ID: &str = "naive";
pub const DEFAULT_MIN_ITERATIONS: u128 = 10_000;

/// What one backend produced for one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutcome {
    pub serial: u64,
    pub units: Vec<SourceUnit>,
    /// Ids of loops that carry an `omp parallel for` pragma.
    pub parallelized_loops: BTreeSet<LoopId>,
    /// Every original marker still present exactly once. When false the
    /// outcome can only compete whole-program; per-loop times are untrusted
    /// and decoration is skipped.
    pub markers_intact: bool,
    /// Per-loop verdicts of the built-in analyzer (empty for external
    /// backends, which are black boxes).
    pub analyses: Vec<LoopAnalysis>,
    /// Adapter and decoration log lines.
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{backend}`: adapter failed: {detail}")]
    AdapterFailure { backend: String, detail: String },
    #[error("backend `{backend}`: no adapter command configured")]
    MissingCommand { backend: String },
}

// ---------------------------------------------------------------------------
// Markers and pragmas in instrumented text
// ---------------------------------------------------------------------------

/// All well-formed marker comments in `text` as (id, start, end) triples.
pub(crate) fn marker_occurrences(text: &str) -> Vec<(LoopId, usize, usize)> {
    const HEAD: &str = "/*PARSWEEP_LOOP ";
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(HEAD) {
        let start = from + rel;
        let digits_at = start + HEAD.len();
        let rest = &text[digits_at..];
        let len = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        if len > 0 && rest[len..].starts_with("*/") {
            let id: u32 = rest[..len].parse().unwrap_or(0);
            let end = digits_at + len + 2;
            out.push((LoopId(id), start, end));
            from = end;
        } else {
            from = digits_at;
        }
    }
    out
}

/// True when every enumerated marker appears exactly once across `units`.
pub fn markers_intact(units: &[SourceUnit], loops: &[LoopRecord]) -> bool {
    let mut counts: BTreeMap<LoopId, u32> = BTreeMap::new();
    for unit in units {
        for (id, _, _) in marker_occurrences(&unit.content) {
            *counts.entry(id).or_default() += 1;
        }
    }
    loops.iter().all(|rec| counts.get(&rec.id) == Some(&1))
}

pub(crate) fn is_parallel_for_pragma(line: &str) -> bool {
    let collapsed = line.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed == "#pragma omp parallel for" || collapsed.starts_with("#pragma omp parallel for ")
}

/// Byte range of the `omp parallel for` pragma line within the next three
/// non-blank lines after the marker ending at `marker_end`, if any.
pub(crate) fn pragma_line_after(text: &str, marker_end: usize) -> Option<Range<usize>> {
    let mut pos = marker_end + text[marker_end..].find('\n')? + 1;
    let mut seen = 0;
    while pos < text.len() && seen < 3 {
        let line_end = text[pos..]
            .find('\n')
            .map(|i| pos + i)
            .unwrap_or(text.len());
        let line = &text[pos..line_end];
        if !line.trim().is_empty() {
            seen += 1;
            if is_parallel_for_pragma(line) {
                return Some(pos..line_end);
            }
        }
        pos = line_end + 1;
    }
    None
}

/// Marker directly preceding (only whitespace between) the byte offset of a
/// loop header in instrumented text. This is how rescanned loops are matched
/// back to their original ids regardless of scan order.
fn adjacent_marker_id(text: &str, header_start: usize) -> Option<LoopId> {
    let before = &text[..header_start];
    let occ = marker_occurrences(before);
    let &(id, _, end) = occ.last()?;
    before[end..]
        .chars()
        .all(|c| c.is_whitespace())
        .then_some(id)
}

fn format_pragma(analysis: &LoopAnalysis) -> String {
    let mut out = String::from("#pragma omp parallel for");
    if !analysis.private_vars.is_empty() {
        out.push_str(&format!(" private({})", analysis.private_vars.join(", ")));
    }
    for (op, var) in &analysis.reduction_clauses {
        out.push_str(&format!(" reduction({op}:{var})"));
    }
    out
}

// ---------------------------------------------------------------------------
// Built-in backend
// ---------------------------------------------------------------------------

fn parse_min_iterations(flags: &[String], notes: &mut Vec<String>) -> u128 {
    let mut value = DEFAULT_MIN_ITERATIONS;
    for flag in flags {
        match flag.strip_prefix("min-iterations=") {
            Some(rest) => match rest.parse::<u128>() {
                Ok(v) => value = v,
                Err(_) => notes.push(format!("naive: malformed flag `{flag}` ignored")),
            },
            None => notes.push(format!("naive: unknown flag `{flag}` ignored")),
        }
    }
    value
}

/// Own trip count multiplied by every descendant's; `None` as soon as any
/// loop in the subtree has an unknown count.
fn effective_trips(
    idx: usize,
    records: &[LoopRecord],
    children: &BTreeMap<usize, Vec<usize>>,
) -> Option<u128> {
    let own = records[idx].canonical.as_ref()?.trip_count? as u128;
    let mut total = own;
    if let Some(kids) = children.get(&idx) {
        for &kid in kids {
            total = total.saturating_mul(effective_trips(kid, records, children)?);
        }
    }
    Some(total)
}

/// The built-in conservative parallelizer. Analyzes every loop of the
/// instrumented sources, inserts `#pragma omp parallel for` (with computed
/// private/reduction clauses) after the marker of each outermost
/// parallelizable loop whose static trip-count estimate passes the
/// `min-iterations` threshold, and never touches markers.
pub fn naive_parallelize(instrumented: &InstrumentedSource, combo: &Combination) -> BackendOutcome {
    let mut notes = Vec::new();
    let threshold = parse_min_iterations(&combo.flags, &mut notes);
    let mut analyses: Vec<LoopAnalysis> = Vec::new();
    let mut parallelized: BTreeSet<LoopId> = BTreeSet::new();
    let mut units_out: Vec<SourceUnit> = Vec::new();

    for unit in &instrumented.units {
        let records = match scan_loops(unit) {
            Ok(r) => r,
            Err(e) => {
                notes.push(format!("naive: {}: rescan failed: {e}", unit.path));
                units_out.push(unit.clone());
                continue;
            }
        };

        // Global ids via marker adjacency, nesting via the rescan itself.
        let mut global: Vec<Option<LoopId>> = Vec::with_capacity(records.len());
        for rec in &records {
            let id = adjacent_marker_id(&unit.content, rec.span.start);
            if id.is_none() {
                notes.push(format!(
                    "naive: {}:{}: loop has no adjacent marker; skipped",
                    unit.path, rec.line
                ));
            }
            global.push(id);
        }
        let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut roots: Vec<usize> = Vec::new();
        for (idx, rec) in records.iter().enumerate() {
            match rec.parent_id {
                Some(pid) => children
                    .entry(records.iter().position(|r| r.id == pid).unwrap())
                    .or_default()
                    .push(idx),
                None => roots.push(idx),
            }
        }

        // Top-down: an accepted loop seals its subtree; a rejected loop
        // exposes its children.
        let mut pragmas: Vec<(LoopId, String)> = Vec::new();
        let mut stack: Vec<usize> = roots;
        stack.reverse();
        while let Some(idx) = stack.pop() {
            let rec = &records[idx];
            let Some(gid) = global[idx] else { continue };
            let body = rec.body_span.slice(&unit.content);
            let mut analysis = analyze_loop(rec, body, &combo.flags);
            analysis.loop_id = gid;

            let accepted = if analysis.is_parallelizable() {
                let trips = effective_trips(idx, &records, &children);
                let pass = match trips {
                    Some(t) => t >= threshold,
                    None => threshold == 0,
                };
                if !pass {
                    analysis.classification = Classification::Rejected;
                    analysis.reject_reason = Some(RejectReason::BelowThreshold);
                    analysis.notes.push(match trips {
                        Some(t) => format!("static trip estimate {t} below threshold {threshold}"),
                        None => format!("unknown trip count with threshold {threshold}"),
                    });
                    false
                } else {
                    true
                }
            } else {
                false
            };

            if accepted {
                pragmas.push((gid, format_pragma(&analysis)));
                parallelized.insert(gid);
            } else if let Some(kids) = children.get(&idx) {
                for &kid in kids.iter().rev() {
                    stack.push(kid);
                }
            }
            analyses.push(analysis);
        }

        // Insert pragma lines after their markers, back to front so earlier
        // offsets stay valid.
        let mut content = unit.content.clone();
        let mut inserts: Vec<(usize, String)> = Vec::new();
        for (gid, pragma) in &pragmas {
            let needle = marker_comment(*gid);
            let start = content
                .find(&needle)
                .expect("marker present: naive never removes markers");
            let line_end = content[start..]
                .find('\n')
                .map(|i| start + i + 1)
                .unwrap_or(content.len());
            inserts.push((line_end, format!("{pragma}\n")));
        }
        inserts.sort_by_key(|(pos, _)| *pos);
        for (pos, text) in inserts.into_iter().rev() {
            content.insert_str(pos, &text);
        }
        units_out.push(SourceUnit::new(unit.path.clone(), content));
    }

    analyses.sort_by_key(|a| a.loop_id);
    BackendOutcome {
        serial: combo.serial,
        units: units_out,
        parallelized_loops: parallelized,
        markers_intact: true,
        analyses,
        notes,
    }
}

// ---------------------------------------------------------------------------
// External adapters
// ---------------------------------------------------------------------------

fn excerpt(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let trimmed = text.trim();
    if trimmed.len() > 400 {
        format!("{}...", &trimmed[..400])
    } else {
        trimmed.to_string()
    }
}

/// Run an external source-to-source compiler through its adapter command
/// template. The instrumented units (plus any auxiliary files such as
/// headers) are written to a scratch input directory; the adapter must leave
/// one rewritten file of the same relative path per unit in the output
/// directory. Parallelized loops are detected by marker adjacency and marker
/// integrity is recomputed from the rewritten text.
pub fn external_parallelize(
    instrumented: &InstrumentedSource,
    combo: &Combination,
    backend: &BackendSpec,
    aux_files: &[SourceUnit],
) -> Result<BackendOutcome, BackendError> {
    let template = backend
        .command
        .as_deref()
        .ok_or_else(|| BackendError::MissingCommand {
            backend: backend.id.clone(),
        })?;
    let fail = |detail: String| BackendError::AdapterFailure {
        backend: backend.id.clone(),
        detail,
    };

    let scratch = tempfile::Builder::new()
        .prefix("parsweep-adapter-")
        .tempdir()
        .map_err(|e| fail(format!("cannot create scratch directory: {e}")))?;
    let input_dir = scratch.path().join("input");
    let output_dir = scratch.path().join("output");
    for dir in [&input_dir, &output_dir] {
        fs::create_dir(dir).map_err(|e| fail(format!("cannot create {}: {e}", dir.display())))?;
    }
    for unit in instrumented.units.iter().chain(aux_files) {
        let dest = input_dir.join(&unit.path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| fail(format!("cannot stage {}: {e}", unit.path)))?;
        }
        fs::write(&dest, &unit.content)
            .map_err(|e| fail(format!("cannot stage {}: {e}", unit.path)))?;
    }

    let command = template
        .replace("{input_dir}", &input_dir.to_string_lossy())
        .replace("{output_dir}", &output_dir.to_string_lossy())
        .replace("{flags}", &combo.flags.join(" "));
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail(format!("cannot spawn `sh -c`: {e}")))?;

    let deadline = Instant::now() + backend.adapter_timeout();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(format!(
                        "timed out after {}s",
                        backend.adapter_timeout().as_secs()
                    )));
                }
                std::thread::sleep(std::time::Duration::from_millis(20));
            }
            Err(e) => return Err(fail(format!("wait failed: {e}"))),
        }
    };
    let output = child
        .wait_with_output()
        .map_err(|e| fail(format!("cannot collect output: {e}")))?;
    if !status.success() {
        return Err(fail(format!(
            "exit status {status}: {}",
            excerpt(&output.stderr)
        )));
    }

    let mut notes = Vec::new();
    let stderr_note = excerpt(&output.stderr);
    if !stderr_note.is_empty() {
        notes.push(format!("{}: {stderr_note}", backend.id));
    }

    let mut units_out = Vec::with_capacity(instrumented.units.len());
    for unit in &instrumented.units {
        let path = output_dir.join(&unit.path);
        let content = fs::read_to_string(&path)
            .map_err(|_| fail(format!("missing output file {}", unit.path)))?;
        units_out.push(SourceUnit::new(unit.path.clone(), content));
    }

    let known: BTreeSet<LoopId> = instrumented.loops.iter().map(|r| r.id).collect();
    let mut parallelized: BTreeSet<LoopId> = BTreeSet::new();
    for unit in &units_out {
        for (id, _, end) in marker_occurrences(&unit.content) {
            if known.contains(&id) && pragma_line_after(&unit.content, end).is_some() {
                parallelized.insert(id);
            }
        }
    }
    let intact = markers_intact(&units_out, &instrumented.loops);
    if !intact {
        notes.push(format!(
            "{}: markers lost or duplicated; per-loop timing disabled",
            backend.id
        ));
    }

    Ok(BackendOutcome {
        serial: combo.serial,
        units: units_out,
        parallelized_loops: parallelized,
        markers_intact: intact,
        analyses: Vec::new(),
        notes,
    })
}

// ---------------------------------------------------------------------------
// Decoration
// ---------------------------------------------------------------------------

/// Replace the value of `family(...)` on the pragma line, or append the
/// clause. Returns the new line and an optional conflict note.
fn set_clause(line: &str, family: &str, value: &str, id: LoopId) -> (String, Option<String>) {
    let rendered = if value.is_empty() {
        family.to_string()
    } else {
        format!("{family}({value})")
    };
    let bytes = line.as_bytes();
    let mut from = 0;
    while let Some(rel) = line[from..].find(family) {
        let start = from + rel;
        let end = start + family.len();
        let boundary_before = start == 0 || !bytes[start - 1].is_ascii_alphanumeric() && bytes[start - 1] != b'_';
        let open = line[end..].trim_start().starts_with('(');
        if boundary_before && open {
            let paren = end + line[end..].find('(').unwrap();
            let mut depth = 0usize;
            let mut close = None;
            for (i, c) in line[paren..].char_indices() {
                match c {
                    '(' => depth += 1,
                    ')' => {
                        depth -= 1;
                        if depth == 0 {
                            close = Some(paren + i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            let Some(close) = close else { break };
            let old = &line[start..=close];
            if old == rendered {
                return (line.to_string(), None);
            }
            let mut out = String::with_capacity(line.len());
            out.push_str(&line[..start]);
            out.push_str(&rendered);
            out.push_str(&line[close + 1..]);
            let note = format!("loop {id}: replaced `{old}` with `{rendered}`");
            return (out, Some(note));
        }
        from = end;
    }
    (format!("{line} {rendered}"), None)
}

fn ensure_omp_include(content: &mut String) {
    if !content.contains("#include <omp.h>") {
        content.insert_str(0, "#include <omp.h>\n");
    }
}

/// Inject the combination's clause and RTL assignments at every parallelized
/// loop. Clauses are appended to (or replaced on) the pragma line; RTL calls
/// are inserted as statements immediately before the loop's timer block.
/// Idempotent: decorating twice with the same combination is a no-op.
pub fn decorate(outcome: BackendOutcome, combo: &Combination) -> BackendOutcome {
    if combo.clauses.is_empty() && combo.rtl.is_empty() {
        return outcome;
    }
    let mut outcome = outcome;
    if !outcome.markers_intact {
        outcome
            .notes
            .push("decoration skipped: markers lost".to_string());
        return outcome;
    }

    let rtl_block: String = combo
        .rtl
        .iter()
        .map(|(routine, args)| format!("{routine}({args});\n"))
        .collect();

    let ids: Vec<LoopId> = outcome.parallelized_loops.iter().copied().collect();
    for unit in &mut outcome.units {
        let mut content = unit.content.clone();
        let mut touched = false;
        for &id in &ids {
            let needle = marker_comment(id);
            let Some(marker_start) = content.find(&needle) else {
                continue;
            };
            let marker_end = marker_start + needle.len();

            match pragma_line_after(&content, marker_end) {
                Some(range) => {
                    let mut line = content[range.clone()].to_string();
                    for (family, value) in &combo.clauses {
                        let (next, note) = set_clause(&line, family, value, id);
                        line = next;
                        if let Some(note) = note {
                            outcome.notes.push(note);
                        }
                    }
                    if line != content[range.clone()] {
                        content.replace_range(range, &line);
                        touched = true;
                    }
                }
                None => {
                    outcome
                        .notes
                        .push(format!("loop {id}: no pragma found to decorate"));
                }
            }

            if !rtl_block.is_empty() {
                // Anchor on the timer-open statement; fall back to the marker
                // line when a tool rewrote the wrapper.
                let timer = format!("__parsweep_loop_start({id})");
                let anchor_pos = content.find(&timer).unwrap_or_else(|| {
                    content.find(&needle).expect("marker located above")
                });
                let line_start = content[..anchor_pos]
                    .rfind('\n')
                    .map(|i| i + 1)
                    .unwrap_or(0);
                let already = line_start >= rtl_block.len()
                    && &content[line_start - rtl_block.len()..line_start] == rtl_block;
                if !already {
                    content.insert_str(line_start, &rtl_block);
                    touched = true;
                }
            }
        }
        if touched {
            if !rtl_block.is_empty() {
                ensure_omp_include(&mut content);
            }
            unit.content = content;
        }
    }
    outcome
}

/// Dispatch one combination through the right backend and decorate the
/// result. The serial baseline passes the instrumented sources through
/// untouched.
pub fn produce(
    instrumented: &InstrumentedSource,
    combo: &Combination,
    backends: &[BackendSpec],
    aux_files: &[SourceUnit],
) -> Result<BackendOutcome, BackendError> {
    let Some(backend_id) = combo.backend_id.as_deref() else {
        return Ok(BackendOutcome {
            serial: combo.serial,
            units: instrumented.units.clone(),
            parallelized_loops: BTreeSet::new(),
            markers_intact: true,
            analyses: Vec::new(),
            notes: Vec::new(),
        });
    };
    let outcome = if backend_id == NAIVE_BACKEND_ID {
        naive_parallelize(instrumented, combo)
    } else {
        let spec = backends
            .iter()
            .find(|b| b.id == backend_id)
            .ok_or_else(|| BackendError::MissingCommand {
                backend: backend_id.to_string(),
            })?;
        external_parallelize(instrumented, combo, spec, aux_files)?
    };
    Ok(decorate(outcome, combo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmentor::annotate;
    use std::path::PathBuf;

    fn fixture(name: &str) -> SourceUnit {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures")
            .join(name);
        SourceUnit::new(name, std::fs::read_to_string(path).unwrap())
    }

    fn naive_combo(serial: u64, flags: &[&str]) -> Combination {
        Combination {
            serial,
            backend_id: Some(NAIVE_BACKEND_ID.to_string()),
            flags: flags.iter().map(|s| s.to_string()).collect(),
            clauses: Vec::new(),
            rtl: Vec::new(),
        }
    }

    fn ids(outcome: &BackendOutcome) -> Vec<u32> {
        outcome.parallelized_loops.iter().map(|id| id.0).collect()
    }

    fn pragma_for(outcome: &BackendOutcome, id: u32) -> Option<String> {
        for unit in &outcome.units {
            let needle = marker_comment(LoopId(id));
            if let Some(start) = unit.content.find(&needle) {
                return pragma_line_after(&unit.content, start + needle.len())
                    .map(|r| unit.content[r].trim().to_string());
            }
        }
        None
    }

    #[test]
    fn matmul_low_threshold_parallelizes_every_nest_root() {
        let instrumented = annotate(&[fixture("matmul.c")]).unwrap();
        let outcome = naive_parallelize(&instrumented, &naive_combo(1, &["min-iterations=1"]));

        assert_eq!(ids(&outcome), vec![1, 3, 6]);
        assert!(outcome.markers_intact);
        assert_eq!(
            pragma_for(&outcome, 1).unwrap(),
            "#pragma omp parallel for private(j)"
        );
        assert_eq!(
            pragma_for(&outcome, 3).unwrap(),
            "#pragma omp parallel for private(j, k)"
        );
        assert_eq!(
            pragma_for(&outcome, 6).unwrap(),
            "#pragma omp parallel for reduction(+:sum)"
        );
        for inner in [2, 4, 5] {
            assert_eq!(pragma_for(&outcome, inner), None, "inner loop {inner}");
        }
    }

    #[test]
    fn default_threshold_drops_the_short_checksum_loop() {
        let instrumented = annotate(&[fixture("matmul.c")]).unwrap();
        let outcome = naive_parallelize(&instrumented, &naive_combo(1, &[]));

        // 512*512 = 262144 and 512^3 pass the 10000 default; the checksum
        // loop runs 512 times and stays serial.
        assert_eq!(ids(&outcome), vec![1, 3]);
        let checksum = outcome
            .analyses
            .iter()
            .find(|a| a.loop_id == LoopId(6))
            .unwrap();
        assert_eq!(checksum.reject_reason, Some(RejectReason::BelowThreshold));
    }

    #[test]
    fn unknown_trip_counts_need_a_zero_threshold() {
        let unit = SourceUnit::new(
            "sym.c",
            "void scale(double *a, int n) {\n    int i;\n    for (i = 0; i < n; i++) {\n        a[i] = a[i] * 2.0;\n    }\n}\n",
        );
        let instrumented = annotate(&[unit]).unwrap();

        let strict = naive_parallelize(&instrumented, &naive_combo(1, &[]));
        assert!(ids(&strict).is_empty(), "unknown trips stay serial");
        assert_eq!(
            strict.analyses[0].reject_reason,
            Some(RejectReason::BelowThreshold)
        );

        let relaxed = naive_parallelize(&instrumented, &naive_combo(2, &["min-iterations=0"]));
        assert_eq!(ids(&relaxed), vec![1]);
    }

    #[test]
    fn rejected_outer_loop_exposes_parallelizable_children() {
        let instrumented = annotate(&[fixture("jacobi2d.c")]).unwrap();
        let outcome = naive_parallelize(&instrumented, &naive_combo(1, &["min-iterations=1"]));

        // Loop 3 is the timestep loop: grid and next are both rewritten each
        // step, so it must stay serial while the sweeps under it (4 and 6)
        // parallelize. 1 is the init nest root, 8 the trace reduction.
        assert_eq!(ids(&outcome), vec![1, 4, 6, 8]);
        let time_loop = outcome
            .analyses
            .iter()
            .find(|a| a.loop_id == LoopId(3))
            .unwrap();
        assert_eq!(
            time_loop.reject_reason,
            Some(RejectReason::LoopCarriedDependence)
        );
    }

    #[test]
    fn naive_flags_are_validated_not_fatal() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let outcome = naive_parallelize(
            &instrumented,
            &naive_combo(1, &["min-iterations=abc", "loop-unroll=8"]),
        );
        assert!(outcome.notes.iter().any(|n| n.contains("malformed flag")));
        assert!(outcome.notes.iter().any(|n| n.contains("unknown flag")));
        // Default threshold applies; both loops run 4194304 times.
        assert_eq!(ids(&outcome), vec![1, 2]);
    }

    #[test]
    fn nesting_rule_no_parallelized_ancestors() {
        for name in ["matmul.c", "jacobi2d.c", "nas_nest.c"] {
            let instrumented = annotate(&[fixture(name)]).unwrap();
            let outcome = naive_parallelize(&instrumented, &naive_combo(1, &["min-iterations=1"]));
            let by_id: BTreeMap<LoopId, &LoopRecord> =
                instrumented.loops.iter().map(|r| (r.id, r)).collect();
            for id in &outcome.parallelized_loops {
                let mut cursor = by_id[id].parent_id;
                while let Some(pid) = cursor {
                    assert!(
                        !outcome.parallelized_loops.contains(&pid),
                        "{name}: loop {id} has parallelized ancestor {pid}"
                    );
                    cursor = by_id[&pid].parent_id;
                }
            }
        }
    }

    // -- decoration ---------------------------------------------------------

    fn decorated_combo(clauses: &[(&str, &str)], rtl: &[(&str, &str)]) -> Combination {
        Combination {
            serial: 7,
            backend_id: Some(NAIVE_BACKEND_ID.to_string()),
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

    #[test]
    fn decorate_appends_clauses_and_rtl_calls_per_loop() {
        let instrumented = annotate(&[fixture("matmul.c")]).unwrap();
        let combo = decorated_combo(
            &[("schedule", "static, 8")],
            &[("omp_set_num_threads", "2")],
        );
        let outcome = decorate(naive_parallelize(&instrumented, &combo), &combo);

        assert_eq!(
            pragma_for(&outcome, 3).unwrap(),
            "#pragma omp parallel for private(j, k) schedule(static, 8)"
        );
        let text = &outcome.units[0].content;
        assert_eq!(
            text.matches("omp_set_num_threads(2);").count(),
            3,
            "one call per parallelized loop"
        );
        // The timing preamble already includes omp.h (guarded), so no extra
        // include is prepended to the first unit.
        assert!(text.contains("#include <omp.h>"));
        assert!(!text.starts_with("#include <omp.h>\n"));

        // Every RTL call sits directly before its loop's timer block.
        for id in [1u32, 3, 6] {
            let timer = format!("__parsweep_loop_start({id})");
            let pos = text.find(&timer).unwrap();
            let line_start = text[..pos].rfind('\n').unwrap() + 1;
            let prev_line_start = text[..line_start - 1].rfind('\n').unwrap() + 1;
            assert_eq!(
                text[prev_line_start..line_start].trim(),
                "omp_set_num_threads(2);",
                "loop {id}"
            );
        }
    }

    #[test]
    fn decorate_is_idempotent() {
        let instrumented = annotate(&[fixture("matmul.c")]).unwrap();
        let combo = decorated_combo(
            &[("schedule", "dynamic")],
            &[("omp_set_num_threads", "4"), ("omp_set_dynamic", "0")],
        );
        let once = decorate(naive_parallelize(&instrumented, &combo), &combo);
        let twice = decorate(once.clone(), &combo);
        assert_eq!(once.units, twice.units);
    }

    #[test]
    fn decorate_replaces_conflicting_clause_values() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let base = decorated_combo(&[("schedule", "dynamic")], &[]);
        let first = decorate(naive_parallelize(&instrumented, &base), &base);

        let other = decorated_combo(&[("schedule", "static, 16")], &[]);
        let second = decorate(first, &other);
        // Loop 2 is intreduce's reduction loop; loop 1 just fills the vector.
        assert_eq!(
            pragma_for(&second, 2).unwrap(),
            "#pragma omp parallel for reduction(+:total) schedule(static, 16)"
        );
        assert_eq!(
            pragma_for(&second, 1).unwrap(),
            "#pragma omp parallel for schedule(static, 16)"
        );
        assert!(second
            .notes
            .iter()
            .any(|n| n.contains("replaced `schedule(dynamic)`")));
    }

    #[test]
    fn decorate_skips_when_markers_are_lost() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let combo = decorated_combo(&[("schedule", "dynamic")], &[]);
        let mut outcome = naive_parallelize(&instrumented, &combo);
        outcome.markers_intact = false;
        let before = outcome.units.clone();
        let after = decorate(outcome, &combo);
        assert_eq!(after.units, before);
        assert!(after.notes.iter().any(|n| n.contains("decoration skipped")));
    }

    #[test]
    fn empty_assignment_decoration_is_identity() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let combo = naive_combo(3, &["min-iterations=1"]);
        let outcome = naive_parallelize(&instrumented, &combo);
        let decorated = decorate(outcome.clone(), &combo);
        assert_eq!(outcome, decorated);
    }

    // -- external adapters --------------------------------------------------

    fn adapter_backend(script: &str, timeout: Option<u64>) -> BackendSpec {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/adapters")
            .join(script);
        BackendSpec {
            id: script.trim_end_matches(".sh").to_string(),
            flags: Vec::new(),
            command: Some(format!(
                "sh {} {{input_dir}} {{output_dir}} {{flags}}",
                path.display()
            )),
            timeout_seconds: timeout,
        }
    }

    fn external_combo(backend: &BackendSpec) -> Combination {
        Combination {
            serial: 9,
            backend_id: Some(backend.id.clone()),
            flags: Vec::new(),
            clauses: Vec::new(),
            rtl: Vec::new(),
        }
    }

    #[test]
    fn identity_adapter_changes_nothing() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let backend = adapter_backend("identity.sh", None);
        let outcome =
            external_parallelize(&instrumented, &external_combo(&backend), &backend, &[]).unwrap();
        assert!(outcome.parallelized_loops.is_empty());
        assert!(outcome.markers_intact);
        assert_eq!(outcome.units, instrumented.units);
    }

    #[test]
    fn pragma_adapter_is_detected_on_loop_one() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let backend = adapter_backend("add_pragma_first.sh", None);
        let outcome =
            external_parallelize(&instrumented, &external_combo(&backend), &backend, &[]).unwrap();
        assert_eq!(ids(&outcome), vec![1]);
        assert!(outcome.markers_intact);
    }

    #[test]
    fn marker_dropping_adapter_is_whole_program_only() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let backend = adapter_backend("drop_marker.sh", None);
        let outcome =
            external_parallelize(&instrumented, &external_combo(&backend), &backend, &[]).unwrap();
        assert!(!outcome.markers_intact);
        assert!(outcome.notes.iter().any(|n| n.contains("markers lost")));
    }

    #[test]
    fn adapter_failure_paths_are_reported() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();

        let mut missing = adapter_backend("identity.sh", None);
        missing.command = Some("/nonexistent-tool {input_dir} {output_dir}".to_string());
        let err =
            external_parallelize(&instrumented, &external_combo(&missing), &missing, &[])
                .unwrap_err();
        assert!(matches!(err, BackendError::AdapterFailure { .. }), "{err}");

        let mut silent = adapter_backend("identity.sh", None);
        silent.command = Some("true".to_string());
        let err = external_parallelize(&instrumented, &external_combo(&silent), &silent, &[])
            .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("missing output"), "{text}");

        let mut none = adapter_backend("identity.sh", None);
        none.command = None;
        let err = external_parallelize(&instrumented, &external_combo(&none), &none, &[])
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingCommand { .. }));
    }

    #[test]
    fn slow_adapter_hits_its_timeout() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let mut slow = adapter_backend("identity.sh", Some(1));
        slow.command = Some("sleep 30".to_string());
        let start = Instant::now();
        let err = external_parallelize(&instrumented, &external_combo(&slow), &slow, &[])
            .unwrap_err();
        assert!(err.to_string().contains("timed out"), "{err}");
        assert!(start.elapsed().as_secs() < 10, "kill was prompt");
    }

    #[test]
    fn produce_dispatches_serial_naive_and_external() {
        let instrumented = annotate(&[fixture("intreduce.c")]).unwrap();
        let backend = adapter_backend("identity.sh", None);
        let specs = vec![backend.clone()];

        let serial = produce(&instrumented, &Combination::serial_baseline(), &specs, &[]).unwrap();
        assert_eq!(serial.units, instrumented.units);
        assert!(serial.parallelized_loops.is_empty());

        let naive = produce(
            &instrumented,
            &naive_combo(1, &["min-iterations=1"]),
            &specs,
            &[],
        )
        .unwrap();
        assert_eq!(ids(&naive), vec![1, 2]);

        let external = produce(&instrumented, &external_combo(&backend), &specs, &[]).unwrap();
        assert_eq!(external.units, instrumented.units);
    }
}
