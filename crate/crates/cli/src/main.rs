//! parsweep: empirical OpenMP auto-parallelization sweeps for C programs.
//!
//! `run` enumerates the configured parameter space, measures every
//! combination per loop, and fuses the fastest scheme for each loop into one
//! optimal parallel source under `<out-dir>/<project>/optimal/`.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};

use parsweep_core::combinator;
use parsweep_core::executor::{self, BuildConfig, JobBackendConfig, TimeoutPolicy};
use parsweep_core::fragmentor;
use parsweep_core::store::{OpenMode, Store, DEFAULT_DB_PATH};
use parsweep_core::sweep::{
    self, InputKind, ProgressLine, SweepConfig, SweepError, OPTIMAL_DIR, REPORT_JSON_FILE,
    REPORT_TEXT_FILE,
};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_signal: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_sigint_handler() {
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
    }
}

#[derive(Parser)]
#[command(
    name = "parsweep",
    version,
    about = "Sweep OpenMP parallelization schemes per loop and fuse the empirically fastest into one optimal source"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep: enumerate, execute, and fuse the winners.
    Run(RunArgs),
    /// Resume a project from its stored configuration.
    Continue(ContinueArgs),
    /// Print a project's report.
    Report(ReportArgs),
    /// Export a project's rows as JSON lines.
    Export(ExportArgs),
    /// Remove sweep instrumentation from source files, keeping pragmas.
    Strip(StripArgs),
    /// Count the combinations a parameter spec enumerates (no execution).
    Enumerate(EnumerateArgs),
    /// Execute one staged job bundle (scheduler worker entry point).
    #[command(hide = true, name = "exec-job")]
    ExecJob(ExecJobArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Project name (directory under --out-dir and key in the store).
    #[arg(short, long)]
    project: String,
    /// new (suffixes the name if taken), overwrite, or continue.
    #[arg(long, default_value = "new")]
    mode: String,
    /// Source file; repeatable. A directory with --input-kind makefile.
    #[arg(short, long, required = true)]
    input: Vec<PathBuf>,
    /// single, multi, or makefile.
    #[arg(long = "input-kind", default_value = "single")]
    input_kind: String,
    /// Parameter-space JSON; repeatable, later files override earlier keys.
    #[arg(long = "spec", required = true)]
    spec: Vec<PathBuf>,
    /// Build command template with {sources} and {artifact} placeholders.
    #[arg(long = "build-cmd", conflicts_with = "make_cmd")]
    build_cmd: Option<String>,
    /// Build through make with this command (requires --artifact).
    #[arg(long = "make-cmd")]
    make_cmd: Option<String>,
    /// Artifact the make build produces.
    #[arg(long)]
    artifact: Option<String>,
    /// Black-box correctness test; receives the run's stdout path, exit 0 = pass.
    #[arg(long = "test-script")]
    test_script: Option<PathBuf>,
    /// local or scheduler.
    #[arg(long = "jobs-backend", default_value = "local")]
    jobs_backend: String,
    /// Scheduler command-template JSON (submit/poll/cancel).
    #[arg(long = "scheduler-template")]
    scheduler_template: Option<PathBuf>,
    /// Command that executes a staged job bundle on a node ({job_dir} substituted).
    #[arg(long = "exec-command")]
    exec_command: Option<String>,
    /// Timed repetitions per combination; the minimum total is kept.
    #[arg(long, default_value_t = executor::DEFAULT_REPEATS)]
    repeats: u32,
    /// Per-combination timeout = max(factor x serial total, floor).
    #[arg(long = "timeout-factor", default_value_t = executor::DEFAULT_TIMEOUT_FACTOR)]
    timeout_factor: f64,
    #[arg(long = "timeout-floor", default_value_t = executor::DEFAULT_TIMEOUT_FLOOR_SECONDS)]
    timeout_floor: f64,
    /// Absolute timeout ceiling in seconds.
    #[arg(long = "timeout-cap")]
    timeout_cap: Option<f64>,
    /// Keep every combination's artifacts (false leaves only optimal/ and the store).
    #[arg(long = "save-all", default_value_t = true, action = clap::ArgAction::Set)]
    save_all: bool,
    #[arg(long = "db-path", default_value = DEFAULT_DB_PATH)]
    db_path: PathBuf,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    /// Concurrent jobs on the local backend (1 = isolated measurements).
    #[arg(long, default_value_t = 1)]
    parallelism: u32,
    /// Extra argument passed to the measured program; repeatable.
    #[arg(long = "run-arg")]
    run_arg: Vec<String>,
    /// File piped to the measured program's stdin.
    #[arg(long)]
    stdin: Option<PathBuf>,
    /// KEY=VALUE environment for the measured program; repeatable.
    #[arg(long = "env")]
    env: Vec<String>,
    /// Extra file staged beside the sources (header, data file); repeatable.
    #[arg(long = "aux")]
    aux: Vec<PathBuf>,
    /// With --mode continue: append combinations a grown spec enumerates.
    #[arg(long)]
    extend: bool,
}

#[derive(Args)]
struct ContinueArgs {
    /// Effective project name as stored.
    #[arg(short, long)]
    project: String,
    #[arg(long = "db-path", default_value = DEFAULT_DB_PATH)]
    db_path: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(short, long)]
    project: String,
    #[arg(long = "db-path", default_value = DEFAULT_DB_PATH)]
    db_path: PathBuf,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    /// Print report.json instead of the text rendering.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(short, long)]
    project: String,
    #[arg(long = "db-path", default_value = DEFAULT_DB_PATH)]
    db_path: PathBuf,
    /// Write here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StripArgs {
    /// File to clean; repeatable.
    #[arg(short, long, required = true)]
    input: Vec<PathBuf>,
    /// Write cleaned files here; stdout when omitted (single input only).
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long = "spec", required = true)]
    spec: Vec<PathBuf>,
    /// Also list every combination label.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct ExecJobArgs {
    /// Directory holding job.json as staged by the sweep.
    job_dir: PathBuf,
}

fn main() {
    // Die quietly when the consumer of a pipe goes away (head, less).
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<(), SweepError> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Continue(args) => cmd_continue(args),
        Command::Report(args) => cmd_report(args),
        Command::Export(args) => cmd_export(args),
        Command::Strip(args) => cmd_strip(args),
        Command::Enumerate(args) => cmd_enumerate(args),
        Command::ExecJob(args) => cmd_exec_job(args),
    }
}

fn parse_env(entries: &[String]) -> Result<Vec<(String, String)>, SweepError> {
    entries
        .iter()
        .map(|entry| {
            entry
                .split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| SweepError::Config(format!("--env wants KEY=VALUE, got `{entry}`")))
        })
        .collect()
}

fn build_config_from(args: &RunArgs, input_kind: InputKind) -> Result<BuildConfig, SweepError> {
    if args.make_cmd.is_some() || input_kind == InputKind::Makefile {
        let artifact = args.artifact.clone().ok_or_else(|| {
            SweepError::Config("make builds need --artifact <name the build produces>".to_string())
        })?;
        Ok(BuildConfig::make(
            args.make_cmd.clone().unwrap_or_else(|| "make".to_string()),
            artifact,
        ))
    } else {
        Ok(BuildConfig::template(
            args.build_cmd
                .clone()
                .unwrap_or_else(|| executor::DEFAULT_BUILD_TEMPLATE.to_string()),
        ))
    }
}

fn job_backend_from(args: &RunArgs) -> Result<JobBackendConfig, SweepError> {
    match args.jobs_backend.as_str() {
        "local" => Ok(JobBackendConfig::Local {
            parallelism: args.parallelism,
        }),
        "scheduler" => {
            let path = args.scheduler_template.as_ref().ok_or_else(|| {
                SweepError::Config(
                    "--jobs-backend scheduler needs --scheduler-template <file>".to_string(),
                )
            })?;
            Ok(executor::load_scheduler_template(path)?)
        }
        other => Err(SweepError::Config(format!(
            "unknown jobs backend `{other}` (expected local or scheduler)"
        ))),
    }
}

fn sweep_config_from(args: &RunArgs) -> Result<(SweepConfig, OpenMode), SweepError> {
    let mode = OpenMode::parse(&args.mode)
        .ok_or_else(|| SweepError::Config(format!("unknown mode `{}`", args.mode)))?;
    let input_kind = InputKind::parse(&args.input_kind).ok_or_else(|| {
        SweepError::Config(format!(
            "unknown input kind `{}` (expected single, multi, or makefile)",
            args.input_kind
        ))
    })?;
    if args.extend && mode != OpenMode::Continue {
        return Err(SweepError::Config(
            "--extend only makes sense with --mode continue".to_string(),
        ));
    }
    let mut config = SweepConfig::new(args.project.clone(), input_kind, args.input.clone());
    config.aux_files = args.aux.clone();
    config.spec_paths = args.spec.clone();
    config.build = build_config_from(args, input_kind)?;
    config.test_script = args.test_script.clone();
    config.job_backend = job_backend_from(args)?;
    config.exec_command = args.exec_command.clone();
    config.repeats = args.repeats;
    config.timeout = TimeoutPolicy {
        factor: args.timeout_factor,
        floor_seconds: args.timeout_floor,
        cap_seconds: args.timeout_cap,
    };
    config.save_all = args.save_all;
    config.db_path = args.db_path.clone();
    config.out_dir = args.out_dir.clone();
    config.run_args = args.run_arg.clone();
    config.stdin = args.stdin.clone();
    config.env = parse_env(&args.env)?;
    Ok((config, mode))
}

fn run_and_summarize(
    config: &SweepConfig,
    mode: OpenMode,
    extend: bool,
) -> Result<(), SweepError> {
    install_sigint_handler();
    let mut progress = |line: &ProgressLine| eprintln!("{}", line.render());
    let outcome = sweep::run_sweep(config, mode, extend, &INTERRUPTED, &mut progress)?;
    println!("project: {}", outcome.effective_project);
    println!(
        "combinations: {} recorded ({} executed this run, formula count {})",
        outcome.report.enumerated_combinations,
        outcome.executed,
        outcome.report.paper_formula_combinations
    );
    let fused = &outcome.report.fused;
    let total = fused
        .total_seconds
        .map(|t| format!("{t:.6}s"))
        .unwrap_or_else(|| "-".to_string());
    let speedup = fused
        .speedup
        .map(|s| format!("{s:.3}x"))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "shipped: {} (status {}, total {}, speedup {})",
        fused.shipped, fused.status, total, speedup
    );
    println!(
        "optimal: {}",
        outcome.project_dir.join(OPTIMAL_DIR).display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), SweepError> {
    let (config, mode) = sweep_config_from(&args)?;
    run_and_summarize(&config, mode, args.extend)
}

fn cmd_continue(args: ContinueArgs) -> Result<(), SweepError> {
    let store = Store::open(&args.db_path)?;
    let record = store.project(&args.project)?.ok_or(
        parsweep_core::store::StoreError::ContinueWithoutProject {
            name: args.project.clone(),
        },
    )?;
    drop(store);
    let mut config: SweepConfig = serde_json::from_str(&record.config_json).map_err(|e| {
        SweepError::Fatal(format!("stored configuration does not parse: {e}"))
    })?;
    config.project = args.project.clone();
    config.db_path = args.db_path.clone();
    run_and_summarize(&config, OpenMode::Continue, false)
}

fn cmd_report(args: ReportArgs) -> Result<(), SweepError> {
    let optimal = args.out_dir.join(&args.project).join(OPTIMAL_DIR);
    let file = if args.json {
        optimal.join(REPORT_JSON_FILE)
    } else {
        optimal.join(REPORT_TEXT_FILE)
    };
    if file.exists() {
        print!("{}", fs::read_to_string(&file)?);
        return Ok(());
    }

    // Not finalized yet: render what the store has.
    let store = Store::open(&args.db_path)?;
    if store.project(&args.project)?.is_none() {
        return Err(SweepError::Store(
            parsweep_core::store::StoreError::ContinueWithoutProject {
                name: args.project.clone(),
            },
        ));
    }
    if args.json {
        return Err(SweepError::Config(format!(
            "{} does not exist yet (sweep not finalized); text report follows from the store",
            file.display()
        )));
    }
    println!("Project: {} (sweep not finalized)", args.project);
    let rows = store.rows(&args.project)?;
    println!("  serial  state    status                            total(s)   label");
    for row in &rows {
        let (status, total) = match &row.result {
            Some(r) => (
                r.status.as_str().to_string(),
                r.total_seconds
                    .map(|t| format!("{t:>10.6}"))
                    .unwrap_or_else(|| format!("{:>10}", "-")),
            ),
            None => ("-".to_string(), format!("{:>10}", "-")),
        };
        println!(
            "  {:>6}  {:<7}  {:<32}  {}  {}",
            row.serial,
            row.state.as_str(),
            status,
            total,
            row.combo.label()
        );
    }
    match store.query_best(&args.project) {
        Ok(winners) => {
            println!("\nPer-loop winners so far:");
            for (loop_id, winner) in &winners.per_loop {
                println!(
                    "  loop {:>3} -> combination {} ({:.6}s)",
                    loop_id, winner.serial, winner.seconds
                );
            }
            println!(
                "Whole-program winner so far: combination {} ({:.6}s)",
                winners.whole_program, winners.whole_program_seconds
            );
        }
        Err(_) => println!("\n(no serial baseline recorded yet; winners undefined)"),
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), SweepError> {
    let store = Store::open(&args.db_path)?;
    match &args.output {
        Some(path) => {
            let mut file = fs::File::create(path)?;
            store.export_json_lines(&args.project, &mut file)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            store.export_json_lines(&args.project, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn cmd_strip(args: StripArgs) -> Result<(), SweepError> {
    if args.out_dir.is_none() && args.input.len() > 1 {
        return Err(SweepError::Config(
            "several inputs need --out-dir (stdout fits one file)".to_string(),
        ));
    }
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
    }
    for input in &args.input {
        let text = fs::read_to_string(input).map_err(|e| {
            SweepError::Config(format!("cannot read {}: {e}", input.display()))
        })?;
        let cleaned = fragmentor::strip_lenient_text(&text);
        match &args.out_dir {
            Some(dir) => {
                let name = input.file_name().ok_or_else(|| {
                    SweepError::Config(format!("bad input path {}", input.display()))
                })?;
                fs::write(dir.join(name), cleaned)?;
            }
            None => print!("{cleaned}"),
        }
    }
    Ok(())
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<(), SweepError> {
    let spec = sweep::load_param_spec(&args.spec)?;
    combinator::validate(&spec)?;
    let enumerated = combinator::count_enumerated(&spec);
    let formula = combinator::count_paper_formula(&spec);
    println!("enumerated: {enumerated} (including the serial baseline)");
    println!("paper formula: {formula}");
    if args.list {
        for combo in combinator::enumerate(&spec)? {
            println!("[{:>5}] {}", combo.serial, combo.label());
        }
    }
    Ok(())
}

fn cmd_exec_job(args: ExecJobArgs) -> Result<(), SweepError> {
    match executor::run_job_dir(&args.job_dir) {
        Ok(result) => {
            eprintln!(
                "job {} finished with status {}",
                args.job_dir.display(),
                result.status.as_str()
            );
            Ok(())
        }
        Err(e) => Err(SweepError::Fatal(format!(
            "job bundle {} failed: {e}",
            args.job_dir.display()
        ))),
    }
}
