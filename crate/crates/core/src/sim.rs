//! Deterministic simulated execution for planner validation.
//!
//! The simulator prices a combination instead of running it: every loop gets
//! a base cost and a per-scheme speed factor, both derived by hashing the
//! model seed with the loop id and the combination's content. Identical
//! schemes always price identically, so sweeps over the same model are
//! reproducible bit-for-bit; that is what lets tests compare a resumed sweep
//! against an uninterrupted one, and a fused plan against brute force.
//!
//! The model is additive over flat (non-nested) loop sets: a program's total
//! is a fixed overhead plus the sum of its loop times, and a loop's time
//! depends only on the scheme applied to that loop. Under that model the
//! per-loop-winner fusion is exactly optimal, so any deviation found by the
//! tests is a real planner defect, not noise. Nested-loop conflict handling
//! is covered separately by the fuser's own tests on real fixtures.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::combinator::{BackendSpec, Combination, ParamSpec};
use crate::executor::{RunResult, RunStatus};
use crate::fragmentor::InstrumentedSource;
use crate::source::{LoopId, SourceUnit};
use crate::sweep::ComboExecution;

/// Deterministic cost model.
#[derive(Debug, Clone, Copy)]
pub struct SimModel {
    pub seed: u64,
    /// When nonzero, roughly one in `failure_mod` non-serial combinations
    /// deterministically fails (alternating build and test failures).
    pub failure_mod: u64,
}

impl SimModel {
    pub fn new(seed: u64) -> Self {
        SimModel {
            seed,
            failure_mod: 0,
        }
    }

    pub fn with_failures(seed: u64, failure_mod: u64) -> Self {
        SimModel { seed, failure_mod }
    }

    fn h64(&self, tag: &str, material: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update([0]);
        hasher.update(material.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
    }

    fn unit(&self, tag: &str, material: &str) -> f64 {
        self.h64(tag, material) as f64 / u64::MAX as f64
    }

    /// Canonical identity of the scheme a combination applies. Two
    /// combinations with identical content (even at different serials) price
    /// identically.
    pub fn scheme_key(combo: &Combination) -> String {
        serde_json::to_string(&(
            &combo.backend_id,
            &combo.flags,
            &combo.clauses,
            &combo.rtl,
        ))
        .expect("combination serializes")
    }

    /// Serial cost of one loop, in [0.05, 1.0) seconds.
    pub fn base_seconds(&self, loop_id: LoopId) -> f64 {
        0.05 + 0.95 * self.unit("base", &loop_id.0.to_string())
    }

    /// Program cost outside all loops, in [0.01, 0.1) seconds.
    pub fn overhead_seconds(&self) -> f64 {
        0.01 + 0.09 * self.unit("overhead", "")
    }

    /// Speed factor of one loop under one scheme, in [0.25, 1.6): some
    /// schemes slow a loop down. The serial scheme is exactly 1.
    pub fn loop_factor(&self, loop_id: LoopId, combo: &Combination) -> f64 {
        if combo.is_serial() {
            return 1.0;
        }
        let material = format!("{}|{}", loop_id.0, Self::scheme_key(combo));
        0.25 + 1.35 * self.unit("factor", &material)
    }

    /// Deterministic failure injection; the serial baseline never fails.
    pub fn failure(&self, combo: &Combination) -> Option<RunStatus> {
        if self.failure_mod == 0 || combo.is_serial() {
            return None;
        }
        let h = self.h64("fail", &Self::scheme_key(combo));
        if h % self.failure_mod != 0 {
            return None;
        }
        Some(if h & (1 << 32) == 0 {
            RunStatus::BuildFailed
        } else {
            RunStatus::TestFailed
        })
    }

    /// Price a combination: `parallelized` lists the loops the backend
    /// actually parallelized under this combination; the rest run serial.
    pub fn price(
        &self,
        combo: &Combination,
        loop_ids: &[LoopId],
        parallelized: &BTreeSet<LoopId>,
    ) -> RunResult {
        if let Some(status) = self.failure(combo) {
            return RunResult::failed(combo.serial, status, "simulated failure");
        }
        let mut result = RunResult::failed(combo.serial, RunStatus::Ok, "");
        result.repeats = 1;
        let mut total = self.overhead_seconds();
        for &loop_id in loop_ids {
            let seconds = if parallelized.contains(&loop_id) {
                self.base_seconds(loop_id) * self.loop_factor(loop_id, combo)
            } else {
                self.base_seconds(loop_id)
            };
            result.loop_seconds.insert(loop_id, seconds);
            total += seconds;
        }
        result.total_seconds = Some(total);
        result
    }

    /// Price a fused program: each loop carries the scheme of its assigned
    /// combination (`None` means the loop stays serial). Summation order
    /// matches `price`, so the additive dominance argument holds exactly in
    /// floating point.
    pub fn fused_total(&self, assignments: &[(LoopId, Option<&Combination>)]) -> f64 {
        let mut total = self.overhead_seconds();
        for (loop_id, scheme) in assignments {
            total += match scheme {
                Some(combo) => self.base_seconds(*loop_id) * self.loop_factor(*loop_id, combo),
                None => self.base_seconds(*loop_id),
            };
        }
        total
    }
}

/// Generate a C program with `n` flat, independent, canonical loops. Every
/// loop iterates far past the naive backend's default threshold, so every
/// combination parallelizes all of them and the sweep exercises scheme
/// pricing rather than eligibility.
pub fn synthetic_loop_program(n: usize) -> SourceUnit {
    let mut body = String::from(
        "#include <stdio.h>\n\nstatic double out[200000];\n\nint main(void) {\n    int i;\n",
    );
    for loop_no in 0..n {
        let _ = write!(
            body,
            "    for (i = 0; i < 200000; i++) {{\n        out[i] = out[i] * 0.5 + {loop_no}.0;\n    }}\n",
        );
    }
    body.push_str("    printf(\"%f\\n\", out[199999]);\n    return 0;\n}\n");
    SourceUnit::new("synthetic.c", body)
}

/// Generate a small parameter spec (at most `max_combos` combinations)
/// deterministically from a seed. Dimensions shrink until the cap holds.
pub fn synthetic_spec(seed: u64, max_combos: u64) -> ParamSpec {
    let model = SimModel::new(seed);
    let mut n_flags = 1 + (model.h64("spec-flags", "") % 2) as usize;
    let mut clause_values = 1 + (model.h64("spec-clause", "") % 3) as usize;
    let mut rtl_args = (model.h64("spec-rtl", "") % 3) as usize;
    loop {
        let spec = build_spec(seed, n_flags, clause_values, rtl_args);
        let count = crate::combinator::count_enumerated(&spec);
        if count <= max_combos as u128 {
            return spec;
        }
        if rtl_args > 0 {
            rtl_args -= 1;
        } else if clause_values > 1 {
            clause_values -= 1;
        } else if n_flags > 1 {
            n_flags -= 1;
        } else {
            return spec;
        }
    }
}

fn build_spec(seed: u64, n_flags: usize, clause_values: usize, rtl_args: usize) -> ParamSpec {
    let model = SimModel::new(seed);
    let flags: Vec<String> = (0..n_flags)
        .map(|i| format!("tune-{}", model.h64("flag", &i.to_string()) % 97))
        .collect();
    let mut spec = ParamSpec {
        backends: vec![BackendSpec {
            id: "naive".to_string(),
            flags,
            command: None,
            timeout_seconds: None,
        }],
        clause_families: vec![crate::combinator::ClauseFamily {
            name: "schedule".to_string(),
            alternatives: ["static", "dynamic", "guided"][..clause_values]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }],
        rtl_families: Vec::new(),
    };
    if rtl_args > 0 {
        spec.rtl_families.push(crate::combinator::RtlFamily {
            name: "omp_set_num_threads".to_string(),
            alternatives: ["2", "4", "8"][..rtl_args].iter().map(|s| s.to_string()).collect(),
        });
    }
    spec
}

/// A sweep runner that transforms sources through the real backend stack but
/// prices the execution with the deterministic model instead of running it.
pub struct SimRunner<'a> {
    pub model: SimModel,
    pub instrumented: &'a InstrumentedSource,
    pub backends: &'a [BackendSpec],
}

impl crate::sweep::CombinationRunner for SimRunner<'_> {
    fn execute(&self, combo: &Combination) -> ComboExecution {
        let loop_ids: Vec<LoopId> = self.instrumented.loops.iter().map(|r| r.id).collect();
        if combo.is_serial() {
            let result = self.model.price(combo, &loop_ids, &BTreeSet::new());
            return ComboExecution {
                result,
                output: Some((self.instrumented.units.clone(), true)),
            };
        }
        match crate::backends::produce(self.instrumented, combo, self.backends, &[]) {
            Ok(outcome) => {
                let mut result = self.model.price(combo, &loop_ids, &outcome.parallelized_loops);
                if !outcome.markers_intact && result.status == RunStatus::Ok {
                    result.status = RunStatus::MarkersLostWholeProgramOnly;
                    result.loop_seconds.clear();
                }
                ComboExecution {
                    result,
                    output: Some((outcome.units, outcome.markers_intact)),
                }
            }
            Err(e) => ComboExecution {
                result: RunResult::failed(combo.serial, RunStatus::BuildFailed, e.to_string()),
                output: None,
            },
        }
    }

    fn baseline(&self, _result: &RunResult) {}
}

/// Price a shipping candidate under the model instead of running it: the
/// fused program costs its per-loop assignments, a single combination costs
/// its own pricing (parallelized set recomputed through the backend stack),
/// and the serial fallback always passes.
pub fn sim_validator<'a>(
    model: SimModel,
    instrumented: &'a InstrumentedSource,
    backends: &'a [BackendSpec],
    plan: &'a crate::fuser::FusionPlan,
    combos: &'a std::collections::BTreeMap<u64, Combination>,
) -> impl FnMut(&str, &[SourceUnit]) -> RunResult + 'a {
    move |name: &str, _units: &[SourceUnit]| {
        let loops = &instrumented.loops;
        let loop_ids: Vec<LoopId> = loops.iter().map(|r| r.id).collect();
        if name == "fused" {
            let assignments: Vec<(LoopId, Option<&Combination>)> = loops
                .iter()
                .map(|rec| {
                    let combo = plan
                        .per_loop
                        .get(&rec.id)
                        .filter(|scheme| scheme.pragma.is_some())
                        .and_then(|scheme| combos.get(&scheme.winner_serial));
                    (rec.id, combo)
                })
                .collect();
            let mut result = RunResult::failed(0, RunStatus::Ok, "");
            result.total_seconds = Some(model.fused_total(&assignments));
            return result;
        }
        if name == "serial" {
            let serial = Combination::serial_baseline();
            return model.price(&serial, &loop_ids, &BTreeSet::new());
        }
        // "combination N": reprice that combination deterministically.
        let serial_no: u64 = name
            .rsplit(' ')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        match combos.get(&serial_no) {
            Some(combo) => {
                let parallelized = crate::backends::produce(instrumented, combo, backends, &[])
                    .map(|o| o.parallelized_loops)
                    .unwrap_or_default();
                model.price(combo, &loop_ids, &parallelized)
            }
            None => RunResult::failed(0, RunStatus::RunFailed, "unknown combination"),
        }
    }
}
