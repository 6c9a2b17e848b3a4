//! Sweep orchestration: enumerate combinations, execute them through a job
//! backend, persist every result, and fuse the winners into the optimal
//! output.
//!
//! The driver is a work queue over the store's pending rows. Combination 0
//! (the serial baseline) always runs first and alone: it defines the golden
//! stdout for the black-box test and anchors every timeout. All persistence
//! goes through the store's transactional API, so a killed sweep resumes
//! exactly where it stopped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendOutcome};
use crate::combinator::{self, BackendSpec, Combination, ParamSpec, SpecError};
use crate::executor::{
    self, BuildConfig, ExecError, JobBackendConfig, JobSpec, RunResult, RunStatus, TimeoutPolicy,
};
use crate::fragmentor::{self, FragmentError, InstrumentedSource};
use crate::fuser::{self, FusedValidation, FusionPlan, SweepReport};
use crate::source::SourceUnit;
use crate::store::{OpenMode, Store, StoreError};

/// Golden serial stdout kept beside the store for the black-box test.
pub const SERIAL_STDOUT_FILE: &str = "serial_stdout.txt";
/// Per-combination artifact directories live here.
pub const COMBOS_DIR: &str = "combos";
/// Fused-validation run directories live here.
pub const VALIDATE_DIR: &str = "validate";
/// Final output directory.
pub const OPTIMAL_DIR: &str = "optimal";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const FUSION_PLAN_FILE: &str = "fusion_plan.json";
/// Seconds between scheduler poll commands.
pub const DEFAULT_POLL_INTERVAL_SECONDS: f64 = 2.0;

/// How the input paths map to translation units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// One self-contained C file.
    Single,
    /// Several C files (plus headers) compiled together by one command.
    Multi,
    /// A directory built by make; every top-level .c file is annotated.
    Makefile,
}

impl InputKind {
    pub fn parse(s: &str) -> Option<InputKind> {
        match s {
            "single" => Some(InputKind::Single),
            "multi" => Some(InputKind::Multi),
            "makefile" => Some(InputKind::Makefile),
            _ => None,
        }
    }
}

/// Everything a sweep needs; serialized into the store so `continue` can
/// rebuild the exact setup from the project name alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub project: String,
    pub input_kind: InputKind,
    /// Files (or the makefile-project directory) holding the loops.
    pub inputs: Vec<PathBuf>,
    /// Staged verbatim next to the sources: headers, data files, Makefile.
    pub aux_files: Vec<PathBuf>,
    /// Parameter-space spec documents; later files override earlier keys.
    pub spec_paths: Vec<PathBuf>,
    pub build: BuildConfig,
    pub test_script: Option<PathBuf>,
    pub job_backend: JobBackendConfig,
    /// Invocation that executes a staged job bundle on a scheduler node.
    /// `{job_dir}` is substituted.
    pub exec_command: Option<String>,
    pub repeats: u32,
    pub timeout: TimeoutPolicy,
    pub save_all: bool,
    pub db_path: PathBuf,
    pub out_dir: PathBuf,
    pub run_args: Vec<String>,
    pub stdin: Option<PathBuf>,
    pub env: Vec<(String, String)>,
}

impl SweepConfig {
    pub fn new(project: impl Into<String>, input_kind: InputKind, inputs: Vec<PathBuf>) -> Self {
        SweepConfig {
            project: project.into(),
            input_kind,
            inputs,
            aux_files: Vec::new(),
            spec_paths: Vec::new(),
            build: BuildConfig::default(),
            test_script: None,
            job_backend: JobBackendConfig::default(),
            exec_command: None,
            repeats: executor::DEFAULT_REPEATS,
            timeout: TimeoutPolicy::default(),
            save_all: true,
            db_path: PathBuf::from(crate::store::DEFAULT_DB_PATH),
            out_dir: PathBuf::from("."),
            run_args: Vec::new(),
            stdin: None,
            env: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Fuser(#[from] fuser::FuserError),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("interrupted; project marked aborted and left continuable")]
    Interrupted,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl From<ExecError> for SweepError {
    fn from(e: ExecError) -> Self {
        SweepError::Config(e.to_string())
    }
}

impl SweepError {
    /// Process exit code class: 2 for configuration/usage errors, 3 for
    /// fatal sweep errors, 130 for an interrupt.
    pub fn exit_code(&self) -> i32 {
        match self {
            SweepError::Config(_) | SweepError::Spec(_) => 2,
            SweepError::Store(e) => match e {
                StoreError::ContinueWithoutProject { .. }
                | StoreError::ContinueSpecMismatch { .. }
                | StoreError::ExtendMismatch { .. }
                | StoreError::ProjectLocked { .. } => 2,
                _ => 3,
            },
            SweepError::Interrupted => 130,
            _ => 3,
        }
    }
}

/// Load and merge the parameter-space spec documents.
pub fn load_param_spec(paths: &[PathBuf]) -> Result<ParamSpec, SweepError> {
    if paths.is_empty() {
        return Err(SweepError::Config(
            "no parameter spec given (--spec)".to_string(),
        ));
    }
    let mut texts = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| {
            SweepError::Config(format!("cannot read spec {}: {e}", path.display()))
        })?;
        texts.push(text);
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Ok(combinator::parse_spec_docs(&refs)?)
}

/// Resolve the configured inputs into annotate targets and auxiliary files.
/// C sources are annotated; everything else is staged verbatim. For the
/// makefile kind, a directory input contributes all its top-level files.
pub fn load_sources(config: &SweepConfig) -> Result<(Vec<SourceUnit>, Vec<SourceUnit>), SweepError> {
    let mut c_files: Vec<PathBuf> = Vec::new();
    let mut aux_paths: Vec<PathBuf> = Vec::new();

    let mut classify = |path: &Path| {
        if path.extension().and_then(|e| e.to_str()) == Some("c") {
            c_files.push(path.to_path_buf());
        } else {
            aux_paths.push(path.to_path_buf());
        }
    };

    for input in &config.inputs {
        let meta = fs::metadata(input).map_err(|e| {
            SweepError::Config(format!("cannot read input {}: {e}", input.display()))
        })?;
        if meta.is_dir() {
            if config.input_kind != InputKind::Makefile {
                return Err(SweepError::Config(format!(
                    "{} is a directory; directory inputs require --input-kind makefile",
                    input.display()
                )));
            }
            let mut entries: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| !n.starts_with('.'))
                        .unwrap_or(false)
                })
                .collect();
            entries.sort();
            for entry in entries {
                classify(&entry);
            }
        } else {
            classify(input);
        }
    }
    aux_paths.extend(config.aux_files.iter().cloned());

    if config.input_kind == InputKind::Single && c_files.len() != 1 {
        return Err(SweepError::Config(format!(
            "--input-kind single requires exactly one C file, got {}",
            c_files.len()
        )));
    }
    if c_files.is_empty() {
        return Err(SweepError::Config("no C source files among inputs".to_string()));
    }

    let read_unit = |path: &Path| -> Result<SourceUnit, SweepError> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| SweepError::Config(format!("bad input path {}", path.display())))?;
        let content = fs::read_to_string(path).map_err(|e| {
            SweepError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Ok(SourceUnit::new(name, content))
    };

    let mut units = Vec::new();
    for path in &c_files {
        units.push(read_unit(path)?);
    }
    let mut aux = Vec::new();
    for path in &aux_paths {
        aux.push(read_unit(path)?);
    }
    Ok((units, aux))
}

/// Digest binding a project to its parameter space and source contents;
/// `continue` refuses to run when it changed.
pub fn spec_digest(spec: &ParamSpec, units: &[SourceUnit], aux: &[SourceUnit]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let spec_json = serde_json::to_string(spec).expect("spec serializes");
    hasher.update(spec_json.as_bytes());
    for unit in units.iter().chain(aux.iter()) {
        hasher.update(b"\x00");
        hasher.update(unit.path.as_bytes());
        hasher.update(b"\x00");
        hasher.update(unit.checksum.as_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// One finished combination, as the runner hands it back.
pub struct ComboExecution {
    pub result: RunResult,
    /// Transformed sources and markers flag for the outputs table; `None`
    /// when the backend produced nothing worth storing.
    pub output: Option<(Vec<SourceUnit>, bool)>,
}

/// Executes single combinations. Implementations must be total: every
/// failure maps to a `RunStatus`, never a panic.
pub trait CombinationRunner: Sync {
    fn execute(&self, combo: &Combination) -> ComboExecution;
    /// The serial baseline result became known (combination 0 just finished,
    /// or was already recorded when continuing).
    fn baseline(&self, result: &RunResult);
}

/// One progress line per combination (spec: serial, status, total).
pub struct ProgressLine {
    pub serial: u64,
    pub label: String,
    pub status: RunStatus,
    pub total_seconds: Option<f64>,
}

impl ProgressLine {
    fn from_result(label: &str, result: &RunResult) -> ProgressLine {
        ProgressLine {
            serial: result.serial,
            label: label.to_string(),
            status: result.status,
            total_seconds: result.total_seconds,
        }
    }

    pub fn render(&self) -> String {
        let total = self
            .total_seconds
            .map(|t| format!("{t:.6}s"))
            .unwrap_or_else(|| "-".to_string());
        format!(
            "[{:>5}] {:<32} {:<10} {}",
            self.serial,
            self.status.as_str(),
            total,
            self.label
        )
    }
}

/// Execute every pending combination, recording each output and result as it
/// lands. Combination 0 runs first and alone; with `parallelism` > 1 the
/// rest are distributed over worker threads (sensible for the scheduler
/// backend; timed local runs should stay at 1). Returns the number of
/// combinations executed. Checks `abort` between recordings and stops
/// early, leaving the project continuable.
pub fn execute_pending(
    store: &mut Store,
    project: &str,
    runner: &dyn CombinationRunner,
    parallelism: usize,
    abort: &AtomicBool,
    progress: &mut dyn FnMut(&ProgressLine),
) -> Result<usize, SweepError> {
    let mut pending = store.pending(project)?;
    let mut executed = 0usize;

    // The serial baseline (combination 0) first, alone.
    if pending.first().map(|c| c.is_serial()).unwrap_or(false) {
        let combo = pending.remove(0);
        if abort.load(Ordering::SeqCst) {
            return Err(SweepError::Interrupted);
        }
        let execution = runner.execute(&combo);
        if let Some((units, intact)) = &execution.output {
            store.record_output(project, combo.serial, units, *intact)?;
        }
        store.record_result(project, combo.serial, &execution.result)?;
        executed += 1;
        progress(&ProgressLine::from_result(&combo.label(), &execution.result));
        if execution.result.status != RunStatus::Ok {
            return Err(SweepError::Fatal(format!(
                "serial baseline failed ({}): {}",
                execution.result.status.as_str(),
                execution.result.log_excerpt
            )));
        }
        runner.baseline(&execution.result);
    } else {
        // Continuing: the baseline must already be recorded and ok.
        let rows = store.rows(project)?;
        let serial_row = rows.first().filter(|r| r.serial == 0).ok_or_else(|| {
            SweepError::Fatal("project has no combination 0".to_string())
        })?;
        let result = serial_row.result.as_ref().ok_or_else(|| {
            SweepError::Fatal("serial baseline is pending but not first in the queue".to_string())
        })?;
        if result.status != RunStatus::Ok {
            return Err(SweepError::Fatal(format!(
                "recorded serial baseline has status {}",
                result.status.as_str()
            )));
        }
        runner.baseline(result);
    }

    if pending.is_empty() {
        return Ok(executed);
    }

    if parallelism <= 1 {
        for combo in pending {
            if abort.load(Ordering::SeqCst) {
                return Err(SweepError::Interrupted);
            }
            let execution = runner.execute(&combo);
            if let Some((units, intact)) = &execution.output {
                store.record_output(project, combo.serial, units, *intact)?;
            }
            store.record_result(project, combo.serial, &execution.result)?;
            executed += 1;
            progress(&ProgressLine::from_result(&combo.label(), &execution.result));
        }
        return Ok(executed);
    }

    // Worker pool: combinations are pulled from a shared queue; the main
    // thread records results in arrival order so all store writes stay on
    // one connection.
    let queue: Mutex<Vec<Combination>> = Mutex::new({
        let mut q = pending;
        q.reverse(); // pop() yields ascending serials
        q
    });
    let (tx, rx) = mpsc::channel::<(Combination, ComboExecution)>();
    let mut interrupted = false;
    std::thread::scope(|scope| -> Result<(), SweepError> {
        for _ in 0..parallelism {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let Some(combo) = queue.lock().expect("queue lock").pop() else {
                    break;
                };
                let execution = runner.execute(&combo);
                if tx.send((combo, execution)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (combo, execution) in rx {
            if let Some((units, intact)) = &execution.output {
                store.record_output(project, combo.serial, units, *intact)?;
            }
            store.record_result(project, combo.serial, &execution.result)?;
            executed += 1;
            progress(&ProgressLine::from_result(&combo.label(), &execution.result));
        }
        interrupted = abort.load(Ordering::SeqCst);
        Ok(())
    })?;
    if interrupted {
        return Err(SweepError::Interrupted);
    }
    Ok(executed)
}

/// The production runner: transforms sources through the backend stack and
/// executes jobs locally or through scheduler command templates.
pub struct RealRunner<'a> {
    pub instrumented: &'a InstrumentedSource,
    pub backends: &'a [BackendSpec],
    pub aux_files: &'a [SourceUnit],
    pub build: BuildConfig,
    pub test_script: Option<PathBuf>,
    /// Where the golden serial stdout lives (copied there after combination
    /// 0 succeeds).
    pub serial_stdout_path: PathBuf,
    pub run_args: Vec<String>,
    pub stdin: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub repeats: u32,
    pub timeout: TimeoutPolicy,
    pub combos_dir: PathBuf,
    pub backend: JobBackendConfig,
    pub exec_command: Option<String>,
    pub poll_interval: Duration,
    baseline_total: Mutex<Option<f64>>,
}

impl<'a> RealRunner<'a> {
    pub fn new(
        instrumented: &'a InstrumentedSource,
        backends: &'a [BackendSpec],
        aux_files: &'a [SourceUnit],
        config: &SweepConfig,
        project_dir: &Path,
    ) -> RealRunner<'a> {
        RealRunner {
            instrumented,
            backends,
            aux_files,
            build: config.build.clone(),
            test_script: config.test_script.clone(),
            serial_stdout_path: project_dir.join(SERIAL_STDOUT_FILE),
            run_args: config.run_args.clone(),
            stdin: config.stdin.clone(),
            env: config.env.clone(),
            repeats: config.repeats,
            timeout: config.timeout,
            combos_dir: project_dir.join(COMBOS_DIR),
            backend: config.job_backend.clone(),
            exec_command: config.exec_command.clone(),
            poll_interval: Duration::from_secs_f64(DEFAULT_POLL_INTERVAL_SECONDS),
            baseline_total: Mutex::new(None),
        }
    }

    pub fn combo_dir(&self, serial: u64) -> PathBuf {
        self.combos_dir.join(format!("{serial:05}"))
    }

    /// Regenerate the golden serial stdout without touching the store (used
    /// when continuing after the file was cleaned up).
    pub fn ensure_golden_stdout(&self) -> Result<(), SweepError> {
        if self.serial_stdout_path.exists() {
            return Ok(());
        }
        let combo = Combination::serial_baseline();
        let execution = self.execute(&combo);
        if execution.result.status != RunStatus::Ok {
            return Err(SweepError::Fatal(format!(
                "could not regenerate the serial stdout: {}",
                execution.result.log_excerpt
            )));
        }
        Ok(())
    }

    fn job_spec(&self, combo: &Combination, outcome: Option<&BackendOutcome>) -> JobSpec {
        let baseline = *self.baseline_total.lock().expect("baseline lock");
        let mut spec = JobSpec::new(
            combo.serial,
            combo.label(),
            outcome
                .map(|o| o.units.clone())
                .unwrap_or_else(|| self.instrumented.units.clone()),
        );
        spec.aux = self.aux_files.to_vec();
        spec.build = self.build.clone();
        spec.args = self.run_args.clone();
        spec.stdin = self.stdin.clone();
        spec.env = self.env.clone();
        spec.repeats = self.repeats;
        spec.markers_intact = outcome.map(|o| o.markers_intact).unwrap_or(true);
        spec.expected_loops = self.instrumented.loops.iter().map(|r| r.id).collect();
        if combo.is_serial() {
            // The baseline defines correctness; nothing to compare against.
            spec.timeout_seconds = self.timeout.serial_timeout_seconds();
            spec.test_script = None;
            spec.serial_stdout = None;
        } else {
            spec.timeout_seconds = baseline
                .map(|t| self.timeout.combo_timeout_seconds(t))
                .unwrap_or_else(|| self.timeout.serial_timeout_seconds());
            spec.test_script = self.test_script.clone();
            spec.serial_stdout = self
                .serial_stdout_path
                .exists()
                .then(|| self.serial_stdout_path.clone());
        }
        spec
    }

    fn run_job(&self, spec: &JobSpec, run_dir: &Path) -> RunResult {
        match &self.backend {
            JobBackendConfig::Local { .. } => executor::execute_job(spec, run_dir),
            JobBackendConfig::SchedulerTemplate {
                submit_template,
                poll_template,
                cancel_template,
                env,
            } => self.run_scheduled(
                spec,
                run_dir,
                submit_template,
                poll_template,
                cancel_template,
                env,
            ),
        }
    }

    fn run_scheduled(
        &self,
        spec: &JobSpec,
        job_dir: &Path,
        submit_template: &str,
        poll_template: &str,
        cancel_template: &str,
        env: &[(String, String)],
    ) -> RunResult {
        let fail = |detail: String| RunResult::failed(spec.serial, RunStatus::RunFailed, detail);
        let exec_command = self
            .exec_command
            .clone()
            .unwrap_or_else(|| format!("{} exec-job {{job_dir}}", current_exe_string()));
        let job_dir_str = job_dir.to_string_lossy().into_owned();
        let exec_command = exec_command.replace("{job_dir}", &job_dir_str);
        if let Err(e) = executor::write_job_bundle(job_dir, spec, &exec_command) {
            return fail(format!("cannot stage job bundle: {e}"));
        }

        let tool_timeout = Duration::from_secs_f64(executor::TOOL_TIMEOUT_SECONDS);
        let substitute = |template: &str, job_id: &str| {
            template
                .replace("{job_dir}", &job_dir_str)
                .replace("{job_id}", job_id)
        };

        let submit = substitute(submit_template, "");
        let job_id = match executor::run_shell(&submit, Some(job_dir), env, tool_timeout) {
            Ok((true, stdout, _)) => stdout.trim().to_string(),
            Ok((false, stdout, stderr)) => {
                return fail(format!("submit failed: {}", excerpt_pair(&stdout, &stderr)));
            }
            Err(e) => return fail(format!("submit failed: {e}")),
        };

        // Poll until DONE/FAILED; the job's own timeout is enforced on the
        // node, and a generous outer deadline guards against lost jobs.
        let deadline =
            std::time::Instant::now() + Duration::from_secs_f64(spec.timeout_seconds * 2.0 + 300.0);
        loop {
            let poll = substitute(poll_template, &job_id);
            let state = match executor::run_shell(&poll, Some(job_dir), env, tool_timeout) {
                Ok((_, stdout, _)) => stdout.trim().to_uppercase(),
                Err(e) => return fail(format!("poll failed: {e}")),
            };
            if state.contains("DONE") {
                break;
            }
            if state.contains("FAILED") {
                // The node may still have produced a result file with the
                // real (more specific) status.
                return executor::read_job_result(job_dir)
                    .unwrap_or_else(|_| fail("scheduler reported FAILED".to_string()));
            }
            if std::time::Instant::now() > deadline {
                let cancel = substitute(cancel_template, &job_id);
                let _ = executor::run_shell(&cancel, Some(job_dir), env, tool_timeout);
                return RunResult::failed(
                    spec.serial,
                    RunStatus::Timeout,
                    "scheduler job exceeded the outer deadline and was cancelled".to_string(),
                );
            }
            std::thread::sleep(self.poll_interval);
        }
        match executor::read_job_result(job_dir) {
            Ok(result) => result,
            Err(e) => fail(format!("job finished but left no result: {e}")),
        }
    }
}

fn current_exe_string() -> String {
    std::env::current_exe()
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| "parsweep".to_string())
}

fn excerpt_pair(stdout: &str, stderr: &str) -> String {
    let mut s = String::new();
    if !stdout.trim().is_empty() {
        s.push_str(stdout.trim());
    }
    if !stderr.trim().is_empty() {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str(stderr.trim());
    }
    s.chars().take(500).collect()
}

impl CombinationRunner for RealRunner<'_> {
    fn execute(&self, combo: &Combination) -> ComboExecution {
        let run_dir = self.combo_dir(combo.serial);
        if combo.is_serial() {
            let spec = self.job_spec(combo, None);
            let result = self.run_job(&spec, &run_dir);
            if result.status == RunStatus::Ok {
                let stdout = if matches!(self.backend, JobBackendConfig::Local { .. }) {
                    run_dir.join(executor::STDOUT_FILE_NAME)
                } else {
                    run_dir.join("run").join(executor::STDOUT_FILE_NAME)
                };
                if let Some(parent) = self.serial_stdout_path.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                if let Err(e) = fs::copy(&stdout, &self.serial_stdout_path) {
                    return ComboExecution {
                        result: RunResult::failed(
                            combo.serial,
                            RunStatus::RunFailed,
                            format!("cannot preserve serial stdout: {e}"),
                        ),
                        output: None,
                    };
                }
                *self.baseline_total.lock().expect("baseline lock") = result.total_seconds;
            }
            return ComboExecution {
                result,
                output: Some((self.instrumented.units.clone(), true)),
            };
        }

        let outcome = match backends::produce(self.instrumented, combo, self.backends, self.aux_files)
        {
            Ok(outcome) => outcome,
            Err(e) => {
                return ComboExecution {
                    result: RunResult::failed(combo.serial, RunStatus::BuildFailed, e.to_string()),
                    output: None,
                }
            }
        };
        let spec = self.job_spec(combo, Some(&outcome));
        let result = self.run_job(&spec, &run_dir);
        ComboExecution {
            result,
            output: Some((outcome.units, outcome.markers_intact)),
        }
    }

    fn baseline(&self, result: &RunResult) {
        *self.baseline_total.lock().expect("baseline lock") = result.total_seconds;
    }
}

/// Everything `run`/`continue` produce for the caller.
pub struct SweepOutcome {
    pub effective_project: String,
    pub project_dir: PathBuf,
    pub executed: usize,
    pub report: SweepReport,
    pub plan: FusionPlan,
    pub validation: FusedValidation,
}

/// Build the fusion plan from the store, emit and validate the fused code,
/// and write `<project>/optimal/` plus the reports. `validator` builds,
/// runs, and tests one shipping candidate.
pub fn finalize(
    store: &mut Store,
    project: &str,
    instrumented: &InstrumentedSource,
    originals: &[SourceUnit],
    paper_formula_combinations: u64,
    validator: &mut dyn FnMut(&str, &[SourceUnit]) -> RunResult,
    project_dir: &Path,
) -> Result<(SweepReport, FusionPlan, FusedValidation), SweepError> {
    let winners = store.query_best(project)?;
    let rows = store.rows(project)?;
    let combos: BTreeMap<u64, Combination> =
        rows.iter().map(|r| (r.serial, r.combo.clone())).collect();
    let any_parallel_ok = rows.iter().any(|r| {
        !r.combo.is_serial()
            && r.result
                .as_ref()
                .map(|res| res.status == RunStatus::Ok)
                .unwrap_or(false)
    });

    // Fetch the stored outputs of every winning serial (pragma extraction)
    // plus the whole-program winner (fallback shipping).
    let mut wanted: BTreeSet<u64> = winners.per_loop.values().map(|w| w.serial).collect();
    wanted.insert(winners.whole_program);
    wanted.remove(&0);
    let mut outputs: BTreeMap<u64, Vec<SourceUnit>> = BTreeMap::new();
    for serial in wanted {
        if let Some((units, _intact)) = store.output(project, serial)? {
            outputs.insert(serial, units);
        }
    }

    let plan = fuser::build_plan(
        &winners,
        &instrumented.loops,
        &combos,
        &outputs,
        any_parallel_ok,
    );

    let fused_units = match plan.plan_source {
        fuser::PlanSource::PerLoopFusion => {
            Some(fuser::emit_fused(&plan, originals, &instrumented.loops)?)
        }
        fuser::PlanSource::WholeProgramFallback => None,
    };
    let whole_units = if plan.whole_program_winner != 0 {
        outputs
            .get(&plan.whole_program_winner)
            .map(|units| fuser::ship_stored_output(units, instrumented))
    } else {
        None
    };

    let validation = fuser::validate_fused(
        fused_units,
        plan.whole_program_winner,
        whole_units,
        originals.to_vec(),
        validator,
    );
    let report = fuser::render_report(
        project,
        &rows,
        &winners,
        &plan,
        &validation,
        paper_formula_combinations,
        &instrumented.loops,
    );

    let optimal = project_dir.join(OPTIMAL_DIR);
    fs::create_dir_all(&optimal)?;
    for unit in &validation.units {
        let path = optimal.join(&unit.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &unit.content)?;
    }
    fs::write(
        optimal.join(REPORT_JSON_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    fs::write(optimal.join(REPORT_TEXT_FILE), fuser::report_text(&report))?;
    fs::write(
        optimal.join(FUSION_PLAN_FILE),
        serde_json::to_string_pretty(&plan).expect("plan serializes"),
    )?;

    Ok((report, plan, validation))
}

/// A validator for the production path: stages a candidate under
/// `<project>/validate/<name>/`, builds, runs, and black-box-tests it.
#[allow(clippy::too_many_arguments)]
pub fn real_validator<'a>(
    config: &'a SweepConfig,
    aux_files: &'a [SourceUnit],
    project_dir: &'a Path,
    serial_total: f64,
) -> impl FnMut(&str, &[SourceUnit]) -> RunResult + 'a {
    let validate_dir = project_dir.join(VALIDATE_DIR);
    let golden = project_dir.join(SERIAL_STDOUT_FILE);
    let build = config.build.clone();
    let test_script = config.test_script.clone();
    let run_args = config.run_args.clone();
    let stdin = config.stdin.clone();
    let env = config.env.clone();
    let timeout = config.timeout.combo_timeout_seconds(serial_total);
    move |name: &str, units: &[SourceUnit]| {
        let slug: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let mut spec = JobSpec::new(0, format!("validate {name}"), units.to_vec());
        spec.aux = aux_files.to_vec();
        spec.build = build.clone();
        spec.args = run_args.clone();
        spec.stdin = stdin.clone();
        spec.env = env.clone();
        spec.timeout_seconds = timeout;
        // Shipping candidates carry no instrumentation: no loops expected.
        spec.expected_loops = Vec::new();
        if name != "serial" {
            spec.test_script = test_script.clone();
            spec.serial_stdout = golden.exists().then(|| golden.clone());
        }
        executor::execute_job(&spec, &validate_dir.join(slug))
    }
}

/// Run (or continue) a full sweep: enumerate, persist, execute everything
/// pending, fuse, validate, and write the optimal output.
pub fn run_sweep(
    config: &SweepConfig,
    mode: OpenMode,
    extend: bool,
    abort: &AtomicBool,
    progress: &mut dyn FnMut(&ProgressLine),
) -> Result<SweepOutcome, SweepError> {
    if config.repeats == 0 {
        return Err(SweepError::Config("--repeats must be at least 1".to_string()));
    }
    config.job_backend.validate()?;
    if let Some(script) = &config.test_script {
        executor::validate_test_script(script)?;
    }

    let spec = load_param_spec(&config.spec_paths)?;
    let combos = combinator::enumerate(&spec)?;
    let formula = combinator::count_paper_formula(&spec);
    let formula_u64 = u64::try_from(formula).unwrap_or(u64::MAX);

    let (originals, aux_files) = load_sources(config)?;
    let instrumented = fragmentor::annotate(&originals)?;
    let digest = spec_digest(&spec, &originals, &aux_files);
    let config_json = serde_json::to_string(config).expect("config serializes");

    let _lock = crate::store::acquire_sweep_lock(&config.db_path)?;
    let mut store = Store::open(&config.db_path)?;
    let record = if extend {
        store.extend_project(&config.project, &digest, &config_json, &combos)?;
        store.set_project_status(&config.project, crate::store::ProjectStatus::Running)?;
        store
            .project(&config.project)?
            .ok_or_else(|| SweepError::Fatal("extended project vanished".to_string()))?
    } else {
        store.open_project(&config.project, mode, &digest, &config_json, &combos)?
    };
    let effective = record.effective_name.clone();
    let project_dir = config.out_dir.join(&effective);
    fs::create_dir_all(project_dir.join(COMBOS_DIR))?;

    let runner = RealRunner::new(&instrumented, &spec.backends, &aux_files, config, &project_dir);
    let parallelism = match &config.job_backend {
        JobBackendConfig::Local { parallelism } => *parallelism as usize,
        // One in-flight job per poll loop; the resource manager itself
        // spreads jobs over nodes when several sweeps or workers run.
        JobBackendConfig::SchedulerTemplate { .. } => 1,
    };

    // When continuing, the golden stdout may have been cleaned up.
    let rows = store.rows(&effective)?;
    let baseline_done = rows
        .first()
        .and_then(|r| r.result.as_ref())
        .map(|r| r.status == RunStatus::Ok)
        .unwrap_or(false);
    if baseline_done && config.test_script.is_some() {
        runner.ensure_golden_stdout()?;
    }

    let executed = match execute_pending(
        &mut store,
        &effective,
        &runner,
        parallelism,
        abort,
        progress,
    ) {
        Ok(n) => n,
        Err(SweepError::Interrupted) => {
            store.set_project_status(&effective, crate::store::ProjectStatus::Aborted)?;
            return Err(SweepError::Interrupted);
        }
        Err(e) => {
            store.set_project_status(&effective, crate::store::ProjectStatus::Aborted)?;
            return Err(e);
        }
    };

    let winners = store.query_best(&effective)?;
    let (report, plan, validation) = {
        let mut validator =
            real_validator(config, &aux_files, &project_dir, winners.serial_total);
        finalize(
            &mut store,
            &effective,
            &instrumented,
            &originals,
            formula_u64,
            &mut validator,
            &project_dir,
        )?
    };
    store.set_project_status(&effective, crate::store::ProjectStatus::Complete)?;

    if !config.save_all {
        let _ = fs::remove_dir_all(project_dir.join(COMBOS_DIR));
        let _ = fs::remove_dir_all(project_dir.join(VALIDATE_DIR));
        let _ = fs::remove_file(project_dir.join(SERIAL_STDOUT_FILE));
    }

    Ok(SweepOutcome {
        effective_project: effective,
        project_dir,
        executed,
        report,
        plan,
        validation,
    })
}
