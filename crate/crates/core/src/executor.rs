//! Build, run, test, and time one combination inside an isolated directory.
//!
//! The executor owns the per-combination lifecycle: stage the transformed
//! sources into a run directory, build them (compiler template or make),
//! execute the artifact `repeats` times under a timeout, apply the optional
//! black-box test script, and ingest the per-loop timing file. Every failure
//! mode maps onto a [`RunStatus`]; nothing in this module aborts a sweep, so
//! a sweep over N combinations always yields exactly N results.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::source::{LoopId, SourceUnit};

/// Multiplier applied to the serial baseline runtime to form a timeout.
pub const DEFAULT_TIMEOUT_FACTOR: f64 = 10.0;
/// Lower bound on any combination timeout, in seconds.
pub const DEFAULT_TIMEOUT_FLOOR_SECONDS: f64 = 60.0;
/// Timed executions per combination.
pub const DEFAULT_REPEATS: u32 = 1;
/// Build command used when the user does not supply one. `{sources}` expands
/// to the shell-quoted translation units, `{artifact}` to the output binary.
pub const DEFAULT_BUILD_TEMPLATE: &str = "cc -O2 -fopenmp {sources} -o {artifact} -lm";
/// Hard ceiling on build and test-script subprocesses so a wedged compiler or
/// script cannot stall the sweep.
pub const TOOL_TIMEOUT_SECONDS: f64 = 600.0;

/// File names captured inside every combination run directory.
pub const STDOUT_FILE_NAME: &str = "stdout.txt";
pub const STDERR_FILE_NAME: &str = "stderr.txt";
pub const TIMING_FILE_NAME: &str = "parsweep_timing.txt";
pub const META_FILE_NAME: &str = "meta.json";

/// Files that make up a scheduler job bundle.
pub const JOB_SPEC_FILE: &str = "job.json";
pub const JOB_RESULT_FILE: &str = "job_result.json";
pub const JOB_SCRIPT_FILE: &str = "job.sh";

/// Environment variable carrying the serial baseline stdout path to the
/// user's test script.
pub const SERIAL_STDOUT_ENV: &str = "PARSWEEP_SERIAL_STDOUT";

const LOG_EXCERPT_LIMIT: usize = 2000;

/// Final disposition of one combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Built, ran, passed the test, and produced intact per-loop timings.
    Ok,
    BuildFailed,
    RunFailed,
    Timeout,
    TestFailed,
    /// Ran and passed the test but per-loop timings are unusable (markers
    /// dropped by the backend, or the timing file was missing/garbled). The
    /// combination still competes for the whole-program winner.
    MarkersLostWholeProgramOnly,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::BuildFailed => "build_failed",
            RunStatus::RunFailed => "run_failed",
            RunStatus::Timeout => "timeout",
            RunStatus::TestFailed => "test_failed",
            RunStatus::MarkersLostWholeProgramOnly => "markers_lost_whole_program_only",
        }
    }

    pub fn parse(s: &str) -> Option<RunStatus> {
        Some(match s {
            "ok" => RunStatus::Ok,
            "build_failed" => RunStatus::BuildFailed,
            "run_failed" => RunStatus::RunFailed,
            "timeout" => RunStatus::Timeout,
            "test_failed" => RunStatus::TestFailed,
            "markers_lost_whole_program_only" => RunStatus::MarkersLostWholeProgramOnly,
            _ => return None,
        })
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of one combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    /// Combination serial this result belongs to.
    pub serial: u64,
    pub status: RunStatus,
    /// Minimum wall-clock seconds across repeats. Present only for `ok` and
    /// `markers_lost_whole_program_only` (those rows still compete on total).
    pub total_seconds: Option<f64>,
    /// Accumulated seconds per loop, from the repeat that achieved the
    /// minimum total. Empty unless status is `ok`.
    pub loop_seconds: BTreeMap<LoopId, f64>,
    /// Number of timed executions performed.
    pub repeats: u32,
    /// Diagnostics: compiler errors, runtime stderr, or notes explaining a
    /// degraded status.
    pub log_excerpt: String,
}

impl RunResult {
    pub fn failed(serial: u64, status: RunStatus, log_excerpt: impl Into<String>) -> Self {
        RunResult {
            serial,
            status,
            total_seconds: None,
            loop_seconds: BTreeMap::new(),
            repeats: 0,
            log_excerpt: log_excerpt.into(),
        }
    }

    /// Eligible for per-loop winner tables.
    pub fn loop_eligible(&self) -> bool {
        self.status == RunStatus::Ok
    }

    /// Eligible for the whole-program winner table.
    pub fn whole_program_eligible(&self) -> bool {
        matches!(
            self.status,
            RunStatus::Ok | RunStatus::MarkersLostWholeProgramOnly
        )
    }
}

/// How to turn staged sources into a runnable artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BuildConfig {
    /// Single- or multi-file mode: one command with `{sources}` and
    /// `{artifact}` placeholders, run through `sh -c` in the run directory.
    CompilerTemplate { template: String },
    /// Makefile mode: run `command` in the run directory, then pick up the
    /// named artifact it must have produced.
    Make { command: String, artifact: String },
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig::CompilerTemplate {
            template: DEFAULT_BUILD_TEMPLATE.to_string(),
        }
    }
}

impl BuildConfig {
    pub fn template(template: impl Into<String>) -> Self {
        BuildConfig::CompilerTemplate {
            template: template.into(),
        }
    }

    pub fn make(command: impl Into<String>, artifact: impl Into<String>) -> Self {
        BuildConfig::Make {
            command: command.into(),
            artifact: artifact.into(),
        }
    }
}

/// Timeout rule for timed runs.
///
/// A combination is allowed `max(factor x serial_total, floor)` seconds; the
/// serial baseline itself, which has no reference runtime yet, gets
/// `floor x factor` bounded by the optional absolute cap. The cap also bounds
/// every derived timeout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeoutPolicy {
    pub factor: f64,
    pub floor_seconds: f64,
    pub cap_seconds: Option<f64>,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        TimeoutPolicy {
            factor: DEFAULT_TIMEOUT_FACTOR,
            floor_seconds: DEFAULT_TIMEOUT_FLOOR_SECONDS,
            cap_seconds: None,
        }
    }
}

impl TimeoutPolicy {
    /// Timeout for the serial baseline run.
    pub fn serial_timeout_seconds(&self) -> f64 {
        self.clamp(self.floor_seconds * self.factor)
    }

    /// Timeout for a combination once the serial total is known.
    pub fn combo_timeout_seconds(&self, serial_total_seconds: f64) -> f64 {
        self.clamp((self.factor * serial_total_seconds).max(self.floor_seconds))
    }

    fn clamp(&self, seconds: f64) -> f64 {
        match self.cap_seconds {
            Some(cap) => seconds.min(cap),
            None => seconds,
        }
    }
}

/// Where combination jobs execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobBackendConfig {
    /// In-process execution. Timed runs are serialized unless the user
    /// explicitly raises `parallelism` (co-running timed jobs on one machine
    /// corrupts measurements).
    Local { parallelism: u32 },
    /// External resource manager driven by command templates. Every template
    /// must contain `{job_dir}`; `poll` must print RUNNING, DONE, or FAILED.
    SchedulerTemplate {
        submit_template: String,
        poll_template: String,
        cancel_template: String,
        #[serde(default)]
        env: Vec<(String, String)>,
    },
}

impl Default for JobBackendConfig {
    fn default() -> Self {
        JobBackendConfig::Local { parallelism: 1 }
    }
}

impl JobBackendConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        match self {
            JobBackendConfig::Local { parallelism } => {
                if *parallelism == 0 {
                    return Err(ExecError::InvalidJobBackend {
                        detail: "local parallelism must be at least 1".to_string(),
                    });
                }
            }
            JobBackendConfig::SchedulerTemplate {
                submit_template,
                poll_template,
                cancel_template,
                ..
            } => {
                for (name, template) in [
                    ("submit", submit_template),
                    ("poll", poll_template),
                    ("cancel", cancel_template),
                ] {
                    if !template.contains("{job_dir}") {
                        return Err(ExecError::InvalidJobBackend {
                            detail: format!(
                                "scheduler {name} template is missing the {{job_dir}} placeholder"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// On-disk scheduler template file: JSON with submit/poll/cancel command
/// strings and optional extra environment.
#[derive(Debug, Deserialize)]
struct SchedulerTemplateFile {
    submit: String,
    poll: String,
    cancel: String,
    #[serde(default)]
    env: BTreeMap<String, String>,
}

/// Parse a scheduler template file into a validated backend config.
pub fn load_scheduler_template(path: &Path) -> Result<JobBackendConfig, ExecError> {
    let text = fs::read_to_string(path).map_err(|e| ExecError::InvalidJobBackend {
        detail: format!("cannot read scheduler template {}: {e}", path.display()),
    })?;
    let file: SchedulerTemplateFile =
        serde_json::from_str(&text).map_err(|e| ExecError::InvalidJobBackend {
            detail: format!("scheduler template {} is not valid: {e}", path.display()),
        })?;
    let config = JobBackendConfig::SchedulerTemplate {
        submit_template: file.submit,
        poll_template: file.poll,
        cancel_template: file.cancel,
        env: file.env.into_iter().collect(),
    };
    config.validate()?;
    Ok(config)
}

/// Configuration problems surfaced before the sweep starts.
#[derive(Debug, Error)]
pub enum ExecError {
    #[error("test script {path} is not an executable file")]
    TestScriptNotExecutable { path: PathBuf },
    #[error("invalid job backend: {detail}")]
    InvalidJobBackend { detail: String },
}

/// Timing-file parse failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimingError {
    #[error("malformed timing line {line}: {detail}")]
    MalformedTimingLine { line: usize, detail: String },
}

/// Everything needed to build, run, and judge one combination. Serializable
/// so scheduler jobs can carry it to another node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobSpec {
    pub serial: u64,
    /// Human-readable combination label for logs and meta.json.
    pub label: String,
    /// Transformed translation units to compile.
    pub units: Vec<SourceUnit>,
    /// Extra project files staged verbatim (headers, Makefile, data).
    pub aux: Vec<SourceUnit>,
    pub build: BuildConfig,
    pub args: Vec<String>,
    /// File piped to the program's stdin, if any.
    pub stdin: Option<PathBuf>,
    /// Extra environment variables for the timed runs.
    pub env: Vec<(String, String)>,
    pub repeats: u32,
    pub timeout_seconds: f64,
    /// Optional black-box test script (absolute path).
    pub test_script: Option<PathBuf>,
    /// Serial baseline stdout, exported to the test script.
    pub serial_stdout: Option<PathBuf>,
    /// Whether the backend preserved every loop marker. When false the
    /// per-loop timings are discarded up front.
    pub markers_intact: bool,
    /// Loop ids the instrumented program is expected to report.
    pub expected_loops: Vec<LoopId>,
}

impl JobSpec {
    pub fn new(serial: u64, label: impl Into<String>, units: Vec<SourceUnit>) -> Self {
        JobSpec {
            serial,
            label: label.into(),
            units,
            aux: Vec::new(),
            build: BuildConfig::default(),
            args: Vec::new(),
            stdin: None,
            env: Vec::new(),
            repeats: DEFAULT_REPEATS,
            timeout_seconds: DEFAULT_TIMEOUT_FLOOR_SECONDS * DEFAULT_TIMEOUT_FACTOR,
            test_script: None,
            serial_stdout: None,
            markers_intact: true,
            expected_loops: Vec::new(),
        }
    }
}

/// Verify the user's test script up front; a missing or non-executable
/// script is a configuration error, not a per-run failure.
pub fn validate_test_script(path: &Path) -> Result<(), ExecError> {
    let meta = match fs::metadata(path) {
        Ok(m) if m.is_file() => m,
        _ => {
            return Err(ExecError::TestScriptNotExecutable {
                path: path.to_path_buf(),
            })
        }
    };
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        if meta.permissions().mode() & 0o111 == 0 {
            return Err(ExecError::TestScriptNotExecutable {
                path: path.to_path_buf(),
            });
        }
    }
    #[cfg(not(unix))]
    let _ = meta;
    Ok(())
}

/// Write units and aux files under `run_dir`, returning the relative paths of
/// the compilable units in order. Paths must stay inside the run directory.
pub fn stage_sources(
    run_dir: &Path,
    units: &[SourceUnit],
    aux: &[SourceUnit],
) -> io::Result<Vec<String>> {
    let mut sources = Vec::with_capacity(units.len());
    for unit in units.iter().chain(aux.iter()) {
        let rel = Path::new(&unit.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("refusing to stage source outside the run directory: {}", unit.path),
            ));
        }
        let dest = run_dir.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&dest, &unit.content)?;
    }
    for unit in units {
        sources.push(unit.path.clone());
    }
    Ok(sources)
}

/// Build the staged sources. Returns the absolute artifact path, or the
/// compiler/make diagnostics on failure.
pub fn build(run_dir: &Path, sources: &[String], config: &BuildConfig) -> Result<PathBuf, String> {
    let (command, artifact) = match config {
        BuildConfig::CompilerTemplate { template } => {
            let joined = sources
                .iter()
                .map(|s| shell_quote(s))
                .collect::<Vec<_>>()
                .join(" ");
            let artifact = "prog".to_string();
            let command = template
                .replace("{sources}", &joined)
                .replace("{artifact}", &shell_quote(&artifact));
            (command, artifact)
        }
        BuildConfig::Make { command, artifact } => (command.clone(), artifact.clone()),
    };

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .current_dir(run_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let output = match run_tool(cmd, Duration::from_secs_f64(TOOL_TIMEOUT_SECONDS)) {
        Ok(out) => out,
        Err(detail) => return Err(detail),
    };
    if !output.success {
        let mut diag = String::new();
        diag.push_str(&output.stderr);
        if output.stderr.trim().is_empty() {
            diag.push_str(&output.stdout);
        }
        return Err(format!(
            "build command failed ({}): {}",
            command,
            excerpt(&diag)
        ));
    }
    let artifact_path = run_dir.join(&artifact);
    if !artifact_path.is_file() {
        return Err(format!(
            "build command succeeded but did not produce the artifact {artifact}"
        ));
    }
    Ok(artifact_path)
}

/// Parse the fragmentor timing wire format: one `LOOP <id> <seconds>` line
/// per loop, duplicates rejected, blank lines ignored.
pub fn ingest_timing(text: &str) -> Result<BTreeMap<LoopId, f64>, TimingError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |detail: String| TimingError::MalformedTimingLine {
            line: line_no,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "LOOP" {
            return Err(malformed(format!(
                "expected `LOOP <id> <seconds>`, got {line:?}"
            )));
        }
        let id: u32 = fields[1]
            .parse()
            .map_err(|_| malformed(format!("invalid loop id {:?}", fields[1])))?;
        if id == 0 {
            return Err(malformed("loop ids start at 1".to_string()));
        }
        let seconds: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("invalid seconds value {:?}", fields[2])))?;
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(malformed(format!(
                "seconds must be finite and non-negative, got {seconds}"
            )));
        }
        if map.insert(LoopId(id), seconds).is_some() {
            return Err(malformed(format!("duplicate entry for loop {id}")));
        }
    }
    Ok(map)
}

/// Run the user's test script against one captured stdout. Exit 0 is a pass.
/// The serial baseline stdout, when available, is exported via
/// `PARSWEEP_SERIAL_STDOUT` so scripts can diff against it.
pub fn black_box_test(
    script: &Path,
    stdout_file: &Path,
    run_dir: &Path,
    serial_stdout: Option<&Path>,
) -> Result<bool, String> {
    let mut cmd = Command::new(absolute(script));
    cmd.arg(absolute(stdout_file))
        .arg(absolute(run_dir))
        .current_dir(run_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(golden) = serial_stdout {
        cmd.env(SERIAL_STDOUT_ENV, absolute(golden));
    }
    let output = run_tool(cmd, Duration::from_secs_f64(TOOL_TIMEOUT_SECONDS))?;
    Ok(output.success)
}

/// Execute a full job: stage, build, run `repeats` times, test, ingest
/// timings, and capture artifacts. Total by construction; every failure is a
/// status, never a panic or error.
pub fn execute_job(spec: &JobSpec, run_dir: &Path) -> RunResult {
    let result = execute_job_inner(spec, run_dir);
    let _ = write_meta(run_dir, spec, &result);
    result
}

fn execute_job_inner(spec: &JobSpec, run_dir: &Path) -> RunResult {
    if let Err(e) = fs::create_dir_all(run_dir) {
        return RunResult::failed(
            spec.serial,
            RunStatus::BuildFailed,
            format!("cannot create run directory {}: {e}", run_dir.display()),
        );
    }
    let run_dir = match fs::canonicalize(run_dir) {
        Ok(d) => d,
        Err(e) => {
            return RunResult::failed(
                spec.serial,
                RunStatus::BuildFailed,
                format!("cannot resolve run directory {}: {e}", run_dir.display()),
            )
        }
    };
    let sources = match stage_sources(&run_dir, &spec.units, &spec.aux) {
        Ok(s) => s,
        Err(e) => {
            return RunResult::failed(
                spec.serial,
                RunStatus::BuildFailed,
                format!("failed to stage sources: {e}"),
            )
        }
    };
    let artifact = match build(&run_dir, &sources, &spec.build) {
        Ok(a) => a,
        Err(diag) => return RunResult::failed(spec.serial, RunStatus::BuildFailed, diag),
    };
    run_built(spec, &run_dir, &artifact)
}

/// Run an already-built artifact through the timed repeats, the black-box
/// test, and timing ingestion.
pub fn run_built(spec: &JobSpec, run_dir: &Path, artifact: &Path) -> RunResult {
    let timeout = Duration::from_secs_f64(spec.timeout_seconds.max(0.001));
    let timing_path = run_dir.join(TIMING_FILE_NAME);
    let stdout_path = run_dir.join(STDOUT_FILE_NAME);
    let stderr_path = run_dir.join(STDERR_FILE_NAME);
    let repeats = spec.repeats.max(1);

    let mut best: Option<(f64, Option<String>)> = None;
    for _ in 0..repeats {
        let _ = fs::remove_file(&timing_path);
        let mut cmd = Command::new(absolute(artifact));
        cmd.args(&spec.args)
            .current_dir(run_dir)
            .env("PARSWEEP_TIMING_FILE", &timing_path);
        for (key, value) in &spec.env {
            cmd.env(key, value);
        }
        match &spec.stdin {
            Some(path) => match File::open(path) {
                Ok(f) => {
                    cmd.stdin(Stdio::from(f));
                }
                Err(e) => {
                    return RunResult::failed(
                        spec.serial,
                        RunStatus::RunFailed,
                        format!("cannot open stdin file {}: {e}", path.display()),
                    )
                }
            },
            None => {
                cmd.stdin(Stdio::null());
            }
        }
        match (File::create(&stdout_path), File::create(&stderr_path)) {
            (Ok(out), Ok(err)) => {
                cmd.stdout(Stdio::from(out)).stderr(Stdio::from(err));
            }
            _ => {
                return RunResult::failed(
                    spec.serial,
                    RunStatus::RunFailed,
                    "cannot create stdout/stderr capture files".to_string(),
                )
            }
        }

        let (status, elapsed) = match run_child(cmd, timeout) {
            Ok(ChildOutcome::Finished { status, elapsed }) => (status, elapsed),
            Ok(ChildOutcome::TimedOut) => {
                return RunResult {
                    serial: spec.serial,
                    status: RunStatus::Timeout,
                    total_seconds: None,
                    loop_seconds: BTreeMap::new(),
                    repeats,
                    log_excerpt: format!(
                        "killed after exceeding the {:.1}s timeout",
                        timeout.as_secs_f64()
                    ),
                };
            }
            Err(e) => {
                return RunResult::failed(
                    spec.serial,
                    RunStatus::RunFailed,
                    format!("failed to launch artifact: {e}"),
                )
            }
        };
        if !status.success() {
            let stderr_tail = fs::read_to_string(&stderr_path).unwrap_or_default();
            return RunResult {
                serial: spec.serial,
                status: RunStatus::RunFailed,
                total_seconds: None,
                loop_seconds: BTreeMap::new(),
                repeats,
                log_excerpt: format!("{}; stderr: {}", describe_exit(&status), excerpt(&stderr_tail)),
            };
        }
        let total = elapsed.as_secs_f64();
        let timing_text = fs::read_to_string(&timing_path).ok();
        if best.as_ref().map_or(true, |(t, _)| total < *t) {
            best = Some((total, timing_text));
        }
    }
    let (total, timing_text) = best.expect("at least one repeat ran");

    if let Some(script) = &spec.test_script {
        match black_box_test(script, &stdout_path, run_dir, spec.serial_stdout.as_deref()) {
            Ok(true) => {}
            Ok(false) => {
                return RunResult {
                    serial: spec.serial,
                    status: RunStatus::TestFailed,
                    total_seconds: None,
                    loop_seconds: BTreeMap::new(),
                    repeats,
                    log_excerpt: "test script exited nonzero".to_string(),
                }
            }
            Err(detail) => {
                return RunResult {
                    serial: spec.serial,
                    status: RunStatus::TestFailed,
                    total_seconds: None,
                    loop_seconds: BTreeMap::new(),
                    repeats,
                    log_excerpt: format!("test script could not be run: {detail}"),
                }
            }
        }
    }

    let mut result = RunResult {
        serial: spec.serial,
        status: RunStatus::Ok,
        total_seconds: Some(total.max(f64::MIN_POSITIVE)),
        loop_seconds: BTreeMap::new(),
        repeats,
        log_excerpt: String::new(),
    };

    let demote = |result: &mut RunResult, note: String| {
        result.status = RunStatus::MarkersLostWholeProgramOnly;
        result.loop_seconds.clear();
        result.log_excerpt = note;
    };

    if !spec.markers_intact {
        demote(
            &mut result,
            "backend dropped loop markers; per-loop timings discarded".to_string(),
        );
        return result;
    }
    match timing_text {
        None => {
            // Programs with no enumerated loops produce no timing file; that
            // is fine. Instrumented programs that fail to report are not.
            if !spec.expected_loops.is_empty() {
                demote(
                    &mut result,
                    format!("timing file {TIMING_FILE_NAME} was not produced"),
                );
            }
        }
        Some(text) => match ingest_timing(&text) {
            Ok(map) => {
                let unknown: Vec<u32> = map
                    .keys()
                    .filter(|id| !spec.expected_loops.contains(id))
                    .map(|id| id.0)
                    .collect();
                if unknown.is_empty() {
                    result.loop_seconds = map;
                } else {
                    demote(
                        &mut result,
                        format!("timing file reports unknown loop ids {unknown:?}"),
                    );
                }
            }
            Err(e) => demote(&mut result, format!("unusable timing file: {e}")),
        },
    }
    result
}

#[derive(Serialize)]
struct Meta<'a> {
    serial: u64,
    label: &'a str,
    status: &'a str,
    total_seconds: Option<f64>,
    repeats: u32,
    loop_count: usize,
}

/// Persist `meta.json` next to the other captured artifacts.
pub fn write_meta(run_dir: &Path, spec: &JobSpec, result: &RunResult) -> io::Result<()> {
    fs::create_dir_all(run_dir)?;
    let meta = Meta {
        serial: result.serial,
        label: &spec.label,
        status: result.status.as_str(),
        total_seconds: result.total_seconds,
        repeats: result.repeats,
        loop_count: result.loop_seconds.len(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(run_dir.join(META_FILE_NAME), text)
}

/// Write a scheduler job bundle: the serialized spec plus a `job.sh` the
/// scheduler can launch. `exec_command` re-enters this program's job runner
/// (for example `'/path/to/parsweep' exec-job --job-dir '<dir>'`).
pub fn write_job_bundle(job_dir: &Path, spec: &JobSpec, exec_command: &str) -> io::Result<()> {
    fs::create_dir_all(job_dir)?;
    let spec_text = serde_json::to_string_pretty(spec).expect("job spec serializes");
    fs::write(job_dir.join(JOB_SPEC_FILE), spec_text)?;
    let script = format!("#!/bin/sh\nexec {exec_command}\n");
    let script_path = job_dir.join(JOB_SCRIPT_FILE);
    fs::write(&script_path, script)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&script_path, fs::Permissions::from_mode(0o755))?;
    }
    Ok(())
}

/// Execute the job described by `job_dir/job.json` and persist the result as
/// `job_result.json`. This is the entry point scheduler jobs call back into.
pub fn run_job_dir(job_dir: &Path) -> Result<RunResult, String> {
    let spec_path = job_dir.join(JOB_SPEC_FILE);
    let text = fs::read_to_string(&spec_path)
        .map_err(|e| format!("cannot read {}: {e}", spec_path.display()))?;
    let spec: JobSpec =
        serde_json::from_str(&text).map_err(|e| format!("invalid job spec: {e}"))?;
    let result = execute_job(&spec, &job_dir.join("run"));
    let result_text = serde_json::to_string_pretty(&result).expect("result serializes");
    let tmp = job_dir.join(format!("{JOB_RESULT_FILE}.tmp"));
    fs::write(&tmp, result_text).map_err(|e| format!("cannot write job result: {e}"))?;
    fs::rename(&tmp, job_dir.join(JOB_RESULT_FILE))
        .map_err(|e| format!("cannot finalize job result: {e}"))?;
    Ok(result)
}

/// Read back a finished scheduler job's result.
pub fn read_job_result(job_dir: &Path) -> Result<RunResult, String> {
    let path = job_dir.join(JOB_RESULT_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid job result: {e}"))
}

enum ChildOutcome {
    Finished { status: ExitStatus, elapsed: Duration },
    TimedOut,
}

/// Spawn a child in its own process group, wait up to `timeout`, and kill the
/// whole group on expiry. Elapsed time is measured around the actual wait, so
/// totals carry no polling slack.
fn run_child(mut cmd: Command, timeout: Duration) -> io::Result<ChildOutcome> {
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pid = child.id() as i32;
    let (tx, rx) = mpsc::channel();
    let waiter = thread::spawn(move || {
        let status = child.wait();
        let elapsed = start.elapsed();
        let _ = tx.send((status, elapsed));
    });
    match rx.recv_timeout(timeout) {
        Ok((status, elapsed)) => {
            let _ = waiter.join();
            Ok(ChildOutcome::Finished {
                status: status?,
                elapsed,
            })
        }
        Err(_) => {
            #[cfg(unix)]
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            #[cfg(not(unix))]
            let _ = pid;
            let _ = rx.recv();
            let _ = waiter.join();
            Ok(ChildOutcome::TimedOut)
        }
    }
}

struct ToolOutput {
    success: bool,
    stdout: String,
    stderr: String,
}

/// True when a working C compiler answers as `cc`.
pub fn have_c_compiler() -> bool {
    Command::new("cc")
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Run one shell command line (via `sh -c`) with captured output and a hard
/// timeout. Scheduler command templates go through this.
pub fn run_shell(
    command: &str,
    cwd: Option<&Path>,
    env: &[(String, String)],
    timeout: Duration,
) -> Result<(bool, String, String), String> {
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(command);
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    for (key, value) in env {
        cmd.env(key, value);
    }
    let out = run_tool(cmd, timeout)?;
    Ok((out.success, out.stdout, out.stderr))
}

/// Run a helper subprocess (compiler, make, test script) with captured output
/// and a hard timeout.
fn run_tool(mut cmd: Command, timeout: Duration) -> Result<ToolOutput, String> {
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
    let child = cmd.spawn().map_err(|e| format!("failed to spawn: {e}"))?;
    let pid = child.id() as i32;
    let (tx, rx) = mpsc::channel();
    let waiter = thread::spawn(move || {
        let output = child.wait_with_output();
        let _ = tx.send(output);
    });
    match rx.recv_timeout(timeout) {
        Ok(output) => {
            let _ = waiter.join();
            let output = output.map_err(|e| format!("failed to collect output: {e}"))?;
            Ok(ToolOutput {
                success: output.status.success(),
                stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
                stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
            })
        }
        Err(_) => {
            #[cfg(unix)]
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            #[cfg(not(unix))]
            let _ = pid;
            let _ = rx.recv();
            let _ = waiter.join();
            Err(format!(
                "command did not finish within {:.0}s and was killed",
                timeout.as_secs_f64()
            ))
        }
    }
}

fn describe_exit(status: &ExitStatus) -> String {
    match status.code() {
        Some(code) => format!("program exited with status {code}"),
        None => "program was terminated by a signal".to_string(),
    }
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/' | '+'))
    {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', "'\\''"))
    }
}

fn excerpt(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.len() <= LOG_EXCERPT_LIMIT {
        return trimmed.to_string();
    }
    let mut cut = LOG_EXCERPT_LIMIT;
    while !trimmed.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}... [truncated]", &trimmed[..cut])
}
