//! Persistent sweep state: projects, combination rows, results, and the
//! transformed sources each combination produced.
//!
//! Storage is a single-file embedded SQLite database. Crash-safe resume is
//! the requirement behind continue mode, so every result lands in its own
//! committed transaction; an interrupt between combinations loses nothing,
//! and an interrupt mid-record rolls back to a pending row.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinator::Combination;
use crate::executor::{RunResult, RunStatus};
use crate::source::{LoopId, SourceUnit};

/// Default store location; overridable with `--db-path`.
pub const DEFAULT_DB_PATH: &str = "./parsweep.db";

/// Test hook: when this environment variable is set, `record_result` aborts
/// the process after writing but before committing, so crash-durability can
/// be exercised from a real subprocess.
pub const CRASH_BEFORE_COMMIT_ENV: &str = "PARSWEEP_TEST_CRASH_BEFORE_COMMIT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    New,
    Overwrite,
    Continue,
}

impl OpenMode {
    pub fn parse(s: &str) -> Option<OpenMode> {
        Some(match s {
            "new" => OpenMode::New,
            "overwrite" => OpenMode::Overwrite,
            "continue" => OpenMode::Continue,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectStatus {
    Running,
    Complete,
    Aborted,
}

impl ProjectStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectStatus::Running => "running",
            ProjectStatus::Complete => "complete",
            ProjectStatus::Aborted => "aborted",
        }
    }

    fn parse(s: &str) -> Option<ProjectStatus> {
        Some(match s {
            "running" => ProjectStatus::Running,
            "complete" => ProjectStatus::Complete,
            "aborted" => ProjectStatus::Aborted,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectRecord {
    /// Name the user asked for.
    pub name: String,
    /// Actual unique name in the store (possibly index-suffixed).
    pub effective_name: String,
    /// Unix seconds at creation.
    pub created_at: u64,
    /// Checksum over the parameter spec and source checksums; immutable
    /// except through an explicit extend.
    pub spec_digest: String,
    pub status: ProjectStatus,
    /// Opaque sweep configuration blob, so `continue` needs nothing but the
    /// project name.
    pub config_json: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowState {
    Pending,
    Done,
}

impl RowState {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowState::Pending => "pending",
            RowState::Done => "done",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CombinationRow {
    pub serial: u64,
    pub combo: Combination,
    pub state: RowState,
    pub result: Option<RunResult>,
}

/// Winning combination for one loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopWinner {
    pub serial: u64,
    pub seconds: f64,
}

/// Output of `query_best`: per-loop winners plus the whole-program winner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Winners {
    pub per_loop: BTreeMap<LoopId, LoopWinner>,
    pub whole_program: u64,
    pub whole_program_seconds: f64,
    pub serial_total: f64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("store contains invalid data: {detail}")]
    Corrupt { detail: String },
    #[error("cannot continue: no project named {name} in the store")]
    ContinueWithoutProject { name: String },
    #[error(
        "cannot continue {name}: the parameter spec or sources changed since the sweep started \
         (digest mismatch); rerun in a fresh project or pass an explicit extend"
    )]
    ContinueSpecMismatch { name: String },
    #[error("combination {serial} of project {project} already has a recorded result")]
    DoubleRecord { project: String, serial: u64 },
    #[error("project {project} has no combination with serial {serial}")]
    UnknownRow { project: String, serial: u64 },
    #[error("no successful serial baseline (combination 0) recorded yet")]
    NoSerialBaseline,
    #[error("another sweep holds the lock on {path}")]
    ProjectLocked { path: PathBuf },
    #[error("cannot extend {name}: {detail}")]
    ExtendMismatch { name: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Advisory lock guaranteeing one sweep process per store file. Dropping the
/// guard releases the lock.
pub struct StoreLock {
    _file: File,
    path: PathBuf,
}

impl std::fmt::Debug for StoreLock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreLock").field("path", &self.path).finish()
    }
}

/// Acquire the sweep lock for a store file (creates `<db>.lock` next to it).
pub fn acquire_sweep_lock(db_path: &Path) -> Result<StoreLock, StoreError> {
    let mut name = db_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "parsweep.db".to_string());
    name.push_str(".lock");
    let lock_path = db_path.with_file_name(name);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .open(&lock_path)
        .map_err(|source| StoreError::Io {
            path: lock_path.clone(),
            source,
        })?;
    #[cfg(unix)]
    {
        use std::os::unix::io::AsRawFd;
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(StoreError::ProjectLocked { path: lock_path });
        }
    }
    Ok(StoreLock {
        _file: file,
        path: lock_path,
    })
}

pub struct Store {
    conn: Connection,
    path: PathBuf,
}

impl Store {
    /// Open (creating if necessary) the store at `path` and ensure the
    /// schema exists.
    pub fn open(path: &Path) -> Result<Store, StoreError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|source| StoreError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "foreign_keys", true)?;
        // Durability over speed: a recorded result must survive a crash
        // immediately after record_result returns.
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS projects (
                 effective_name TEXT PRIMARY KEY,
                 name TEXT NOT NULL,
                 created_at INTEGER NOT NULL,
                 spec_digest TEXT NOT NULL,
                 status TEXT NOT NULL CHECK (status IN ('running','complete','aborted')),
                 config_json TEXT NOT NULL
             );
             CREATE TABLE IF NOT EXISTS combinations (
                 project TEXT NOT NULL REFERENCES projects(effective_name) ON DELETE CASCADE,
                 serial INTEGER NOT NULL,
                 combo_json TEXT NOT NULL,
                 state TEXT NOT NULL CHECK (state IN ('pending','done')),
                 result_json TEXT,
                 PRIMARY KEY (project, serial),
                 CHECK ((state = 'done') = (result_json IS NOT NULL))
             );
             CREATE TABLE IF NOT EXISTS outputs (
                 project TEXT NOT NULL REFERENCES projects(effective_name) ON DELETE CASCADE,
                 serial INTEGER NOT NULL,
                 units_json TEXT NOT NULL,
                 markers_intact INTEGER NOT NULL,
                 PRIMARY KEY (project, serial)
             );",
        )?;
        Ok(Store {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Open a project in one of the three operational modes and schedule the
    /// enumerated combinations.
    ///
    /// `new` never clobbers: an existing name gets an incremental index
    /// (`name`, `name_1`, `name_2`, ...). `overwrite` deletes any previous
    /// project of the same name first. `continue` resumes an existing
    /// project: the digest must match and done rows are kept; `combos` must
    /// re-enumerate to the stored set.
    pub fn open_project(
        &mut self,
        name: &str,
        mode: OpenMode,
        spec_digest: &str,
        config_json: &str,
        combos: &[Combination],
    ) -> Result<ProjectRecord, StoreError> {
        match mode {
            OpenMode::New => {
                let effective = self.free_name(name)?;
                self.insert_project(name, &effective, spec_digest, config_json, combos)
            }
            OpenMode::Overwrite => {
                let tx = self.conn.transaction()?;
                tx.execute(
                    "DELETE FROM projects WHERE effective_name = ?1",
                    params![name],
                )?;
                tx.commit()?;
                self.insert_project(name, name, spec_digest, config_json, combos)
            }
            OpenMode::Continue => {
                let record = self
                    .project(name)?
                    .ok_or_else(|| StoreError::ContinueWithoutProject {
                        name: name.to_string(),
                    })?;
                if record.spec_digest != spec_digest {
                    return Err(StoreError::ContinueSpecMismatch {
                        name: name.to_string(),
                    });
                }
                self.verify_combos_match(name, combos)?;
                self.set_project_status(name, ProjectStatus::Running)?;
                self.project(name)?
                    .ok_or_else(|| StoreError::ContinueWithoutProject {
                        name: name.to_string(),
                    })
            }
        }
    }

    /// Append NEW combinations to an existing project (the explicit extend
    /// acknowledgement). The new enumeration must contain the stored
    /// combinations as an exact prefix; the digest and config are refreshed.
    pub fn extend_project(
        &mut self,
        name: &str,
        new_digest: &str,
        new_config_json: &str,
        combos: &[Combination],
    ) -> Result<usize, StoreError> {
        let record = self
            .project(name)?
            .ok_or_else(|| StoreError::ContinueWithoutProject {
                name: name.to_string(),
            })?;
        let existing = self.rows(name)?;
        if combos.len() < existing.len() {
            return Err(StoreError::ExtendMismatch {
                name: name.to_string(),
                detail: format!(
                    "extended spec enumerates {} combinations but {} are already stored",
                    combos.len(),
                    existing.len()
                ),
            });
        }
        for (row, combo) in existing.iter().zip(combos.iter()) {
            if &row.combo != combo {
                return Err(StoreError::ExtendMismatch {
                    name: name.to_string(),
                    detail: format!(
                        "combination {} differs from the stored sweep; an extension may only \
                         append new combinations after the existing ones",
                        combo.serial
                    ),
                });
            }
        }
        let appended = &combos[existing.len()..];
        let tx = self.conn.transaction()?;
        for combo in appended {
            let combo_json = to_json(combo)?;
            tx.execute(
                "INSERT INTO combinations (project, serial, combo_json, state, result_json)
                 VALUES (?1, ?2, ?3, 'pending', NULL)",
                params![name, combo.serial as i64, combo_json],
            )?;
        }
        tx.execute(
            "UPDATE projects SET spec_digest = ?2, config_json = ?3, status = 'running'
             WHERE effective_name = ?1",
            params![name, new_digest, new_config_json],
        )?;
        tx.commit()?;
        let _ = record;
        Ok(appended.len())
    }

    fn insert_project(
        &mut self,
        name: &str,
        effective: &str,
        spec_digest: &str,
        config_json: &str,
        combos: &[Combination],
    ) -> Result<ProjectRecord, StoreError> {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO projects (effective_name, name, created_at, spec_digest, status, config_json)
             VALUES (?1, ?2, ?3, ?4, 'running', ?5)",
            params![effective, name, created_at as i64, spec_digest, config_json],
        )?;
        for combo in combos {
            let combo_json = to_json(combo)?;
            tx.execute(
                "INSERT INTO combinations (project, serial, combo_json, state, result_json)
                 VALUES (?1, ?2, ?3, 'pending', NULL)",
                params![effective, combo.serial as i64, combo_json],
            )?;
        }
        tx.commit()?;
        Ok(ProjectRecord {
            name: name.to_string(),
            effective_name: effective.to_string(),
            created_at,
            spec_digest: spec_digest.to_string(),
            status: ProjectStatus::Running,
            config_json: config_json.to_string(),
        })
    }

    fn free_name(&self, name: &str) -> Result<String, StoreError> {
        if self.project(name)?.is_none() {
            return Ok(name.to_string());
        }
        for index in 1.. {
            let candidate = format!("{name}_{index}");
            if self.project(&candidate)?.is_none() {
                return Ok(candidate);
            }
        }
        unreachable!("indexes are unbounded")
    }

    fn verify_combos_match(&self, name: &str, combos: &[Combination]) -> Result<(), StoreError> {
        let existing = self.rows(name)?;
        if existing.len() != combos.len() {
            return Err(StoreError::ContinueSpecMismatch {
                name: name.to_string(),
            });
        }
        for (row, combo) in existing.iter().zip(combos.iter()) {
            if &row.combo != combo {
                return Err(StoreError::ContinueSpecMismatch {
                    name: name.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn project(&self, effective_name: &str) -> Result<Option<ProjectRecord>, StoreError> {
        let row = self
            .conn
            .query_row(
                "SELECT name, effective_name, created_at, spec_digest, status, config_json
                 FROM projects WHERE effective_name = ?1",
                params![effective_name],
                |row| {
                    Ok((
                        row.get::<_, String>(0)?,
                        row.get::<_, String>(1)?,
                        row.get::<_, i64>(2)?,
                        row.get::<_, String>(3)?,
                        row.get::<_, String>(4)?,
                        row.get::<_, String>(5)?,
                    ))
                },
            )
            .optional()?;
        row.map(|(name, effective_name, created_at, spec_digest, status, config_json)| {
            let status = ProjectStatus::parse(&status).ok_or_else(|| StoreError::Corrupt {
                detail: format!("unknown project status {status:?}"),
            })?;
            Ok(ProjectRecord {
                name,
                effective_name,
                created_at: created_at as u64,
                spec_digest,
                status,
                config_json,
            })
        })
        .transpose()
    }

    pub fn projects(&self) -> Result<Vec<String>, StoreError> {
        let mut stmt = self
            .conn
            .prepare("SELECT effective_name FROM projects ORDER BY effective_name")?;
        let names = stmt
            .query_map([], |row| row.get::<_, String>(0))?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(names)
    }

    pub fn set_project_status(
        &mut self,
        effective_name: &str,
        status: ProjectStatus,
    ) -> Result<(), StoreError> {
        let changed = self.conn.execute(
            "UPDATE projects SET status = ?2 WHERE effective_name = ?1",
            params![effective_name, status.as_str()],
        )?;
        if changed == 0 {
            return Err(StoreError::ContinueWithoutProject {
                name: effective_name.to_string(),
            });
        }
        Ok(())
    }

    /// All combination rows of a project, ordered by serial.
    pub fn rows(&self, project: &str) -> Result<Vec<CombinationRow>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT serial, combo_json, state, result_json
             FROM combinations WHERE project = ?1 ORDER BY serial",
        )?;
        let rows = stmt.query_map(params![project], |row| {
            Ok((
                row.get::<_, i64>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, String>(2)?,
                row.get::<_, Option<String>>(3)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (serial, combo_json, state, result_json) = row?;
            let combo: Combination = from_json(&combo_json)?;
            let state = match state.as_str() {
                "pending" => RowState::Pending,
                "done" => RowState::Done,
                other => {
                    return Err(StoreError::Corrupt {
                        detail: format!("unknown row state {other:?}"),
                    })
                }
            };
            let result = match result_json {
                Some(text) => Some(from_json::<RunResult>(&text)?),
                None => None,
            };
            out.push(CombinationRow {
                serial: serial as u64,
                combo,
                state,
                result,
            });
        }
        Ok(out)
    }

    /// Combinations still awaiting execution, ordered by serial.
    pub fn pending(&self, project: &str) -> Result<Vec<Combination>, StoreError> {
        Ok(self
            .rows(project)?
            .into_iter()
            .filter(|r| r.state == RowState::Pending)
            .map(|r| r.combo)
            .collect())
    }

    /// Record one combination's result: the row transitions from pending to
    /// done in a single durable transaction.
    pub fn record_result(
        &mut self,
        project: &str,
        serial: u64,
        result: &RunResult,
    ) -> Result<(), StoreError> {
        let result_json = to_json(result)?;
        let tx = self.conn.transaction()?;
        let state: Option<String> = tx
            .query_row(
                "SELECT state FROM combinations WHERE project = ?1 AND serial = ?2",
                params![project, serial as i64],
                |row| row.get(0),
            )
            .optional()?;
        match state.as_deref() {
            None => {
                return Err(StoreError::UnknownRow {
                    project: project.to_string(),
                    serial,
                })
            }
            Some("done") => {
                return Err(StoreError::DoubleRecord {
                    project: project.to_string(),
                    serial,
                })
            }
            _ => {}
        }
        tx.execute(
            "UPDATE combinations SET state = 'done', result_json = ?3
             WHERE project = ?1 AND serial = ?2",
            params![project, serial as i64, result_json],
        )?;
        // Test hook: die between write and commit to prove that a crash here
        // leaves the row pending on reopen.
        if std::env::var_os(CRASH_BEFORE_COMMIT_ENV).is_some() {
            std::process::abort();
        }
        tx.commit()?;
        Ok(())
    }

    /// Persist the transformed sources a combination produced (the fuser
    /// splices winning pragmas out of these). Idempotent.
    pub fn record_output(
        &mut self,
        project: &str,
        serial: u64,
        units: &[SourceUnit],
        markers_intact: bool,
    ) -> Result<(), StoreError> {
        let units_json = to_json(&units)?;
        self.conn.execute(
            "INSERT INTO outputs (project, serial, units_json, markers_intact)
             VALUES (?1, ?2, ?3, ?4)
             ON CONFLICT (project, serial) DO UPDATE
             SET units_json = excluded.units_json, markers_intact = excluded.markers_intact",
            params![project, serial as i64, units_json, markers_intact],
        )?;
        Ok(())
    }

    /// Fetch a combination's stored transformed sources.
    pub fn output(
        &self,
        project: &str,
        serial: u64,
    ) -> Result<Option<(Vec<SourceUnit>, bool)>, StoreError> {
        let row = self
            .conn
            .query_row(
                "SELECT units_json, markers_intact FROM outputs
                 WHERE project = ?1 AND serial = ?2",
                params![project, serial as i64],
                |row| Ok((row.get::<_, String>(0)?, row.get::<_, i64>(1)?)),
            )
            .optional()?;
        row.map(|(units_json, intact)| {
            let units: Vec<SourceUnit> = from_json(&units_json)?;
            Ok((units, intact != 0))
        })
        .transpose()
    }

    /// Winners across all recorded rows.
    ///
    /// Per loop: the ok (test-passing, markers-intact) combination with the
    /// smallest accumulated loop time; the serial baseline participates.
    /// Whole program: the smallest total among ok rows, with
    /// markers-lost rows also eligible. Ties break to the lowest serial.
    pub fn query_best(&self, project: &str) -> Result<Winners, StoreError> {
        let rows = self.rows(project)?;
        let serial_total = rows
            .iter()
            .find(|r| r.serial == 0 && r.state == RowState::Done)
            .and_then(|r| r.result.as_ref())
            .filter(|res| res.status == RunStatus::Ok)
            .and_then(|res| res.total_seconds)
            .ok_or(StoreError::NoSerialBaseline)?;

        let mut per_loop: BTreeMap<LoopId, LoopWinner> = BTreeMap::new();
        let mut whole: Option<(u64, f64)> = None;
        for row in &rows {
            let Some(result) = row.result.as_ref() else {
                continue;
            };
            if result.loop_eligible() {
                for (loop_id, seconds) in &result.loop_seconds {
                    let better = match per_loop.get(loop_id) {
                        None => true,
                        // Strict comparison on serial-ordered rows makes ties
                        // resolve to the lowest serial.
                        Some(current) => *seconds < current.seconds,
                    };
                    if better {
                        per_loop.insert(
                            *loop_id,
                            LoopWinner {
                                serial: row.serial,
                                seconds: *seconds,
                            },
                        );
                    }
                }
            }
            if result.whole_program_eligible() {
                if let Some(total) = result.total_seconds {
                    let better = match whole {
                        None => true,
                        Some((_, best)) => total < best,
                    };
                    if better {
                        whole = Some((row.serial, total));
                    }
                }
            }
        }
        let (whole_program, whole_program_seconds) =
            whole.expect("serial baseline is always whole-program eligible");
        Ok(Winners {
            per_loop,
            whole_program,
            whole_program_seconds,
            serial_total,
        })
    }

    /// Dump all combination rows of a project as JSON lines.
    pub fn export_json_lines(
        &self,
        project: &str,
        out: &mut dyn Write,
    ) -> Result<usize, StoreError> {
        if self.project(project)?.is_none() {
            return Err(StoreError::ContinueWithoutProject {
                name: project.to_string(),
            });
        }
        let rows = self.rows(project)?;
        let mut count = 0;
        for row in &rows {
            let line = serde_json::json!({
                "project": project,
                "serial": row.serial,
                "combination": row.combo,
                "state": row.state.as_str(),
                "result": row.result,
            });
            writeln!(out, "{line}").map_err(|source| StoreError::Io {
                path: PathBuf::from("<export>"),
                source,
            })?;
            count += 1;
        }
        Ok(count)
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, StoreError> {
    serde_json::to_string(value).map_err(|e| StoreError::Corrupt {
        detail: format!("cannot serialize: {e}"),
    })
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, StoreError> {
    serde_json::from_str(text).map_err(|e| StoreError::Corrupt {
        detail: format!("cannot decode stored JSON: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::process::Command;

    fn combos(n: u64) -> Vec<Combination> {
        (0..n)
            .map(|serial| {
                if serial == 0 {
                    Combination::serial_baseline()
                } else {
                    Combination {
                        serial,
                        backend_id: Some("naive".to_string()),
                        flags: vec![format!("variant={serial}")],
                        clauses: vec![],
                        rtl: vec![],
                    }
                }
            })
            .collect()
    }

    fn ok_result(serial: u64, total: f64, loops: &[(u32, f64)]) -> RunResult {
        let mut result = RunResult::failed(serial, RunStatus::Ok, "");
        result.total_seconds = Some(total);
        result.repeats = 1;
        for (id, secs) in loops {
            result.loop_seconds.insert(LoopId(*id), *secs);
        }
        result
    }

    fn status_result(serial: u64, status: RunStatus, total: Option<f64>) -> RunResult {
        let mut result = RunResult::failed(serial, status, "");
        result.total_seconds = total;
        result.repeats = 1;
        result
    }

    fn temp_store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("parsweep.db")).unwrap();
        (dir, store)
    }

    // Opening `new` with a taken name appends an incremental index.
    #[test]
    fn new_mode_appends_incremental_indexes() {
        let (_dir, mut store) = temp_store();
        let names: Vec<String> = (0..3)
            .map(|_| {
                store
                    .open_project("proj", OpenMode::New, "digest", "{}", &combos(2))
                    .unwrap()
                    .effective_name
            })
            .collect();
        assert_eq!(names, vec!["proj", "proj_1", "proj_2"]);
    }

    // Overwrite drops every previous row of the project.
    #[test]
    fn overwrite_mode_starts_from_zero_rows() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::Overwrite, "d1", "{}", &combos(5))
            .unwrap();
        for serial in 0..5 {
            store
                .record_result("proj", serial, &ok_result(serial, 1.0, &[]))
                .unwrap();
        }
        assert_eq!(store.pending("proj").unwrap().len(), 0);

        store
            .open_project("proj", OpenMode::Overwrite, "d2", "{}", &combos(3))
            .unwrap();
        let rows = store.rows("proj").unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.state == RowState::Pending));
        assert!(rows.iter().all(|r| r.result.is_none()));
    }

    // Killing a sweep at 7 of 20 done and continuing schedules exactly the
    // 13 missing rows, with no duplicates and no re-execution.
    #[test]
    fn continue_mode_resumes_exactly_the_pending_rows() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("parsweep.db");
        let all = combos(20);
        {
            let mut store = Store::open(&db).unwrap();
            store
                .open_project("proj", OpenMode::New, "digest", "{}", &all)
                .unwrap();
            for serial in 0..7 {
                store
                    .record_result("proj", serial, &ok_result(serial, 10.0 - serial as f64, &[]))
                    .unwrap();
            }
        }
        let mut store = Store::open(&db).unwrap();
        store
            .open_project("proj", OpenMode::Continue, "digest", "{}", &all)
            .unwrap();
        let pending = store.pending("proj").unwrap();
        assert_eq!(pending.len(), 13);
        let pending_serials: BTreeSet<u64> = pending.iter().map(|c| c.serial).collect();
        assert_eq!(pending_serials, (7..20).collect::<BTreeSet<u64>>());

        let rows = store.rows("proj").unwrap();
        let done: BTreeSet<u64> = rows
            .iter()
            .filter(|r| r.state == RowState::Done)
            .map(|r| r.serial)
            .collect();
        assert_eq!(done, (0..7).collect::<BTreeSet<u64>>());
        // Resume exactness: pending and done partition the full set.
        let mut union = pending_serials;
        union.extend(done);
        assert_eq!(union, (0..20).collect::<BTreeSet<u64>>());
    }

    #[test]
    fn continue_requires_the_project_and_a_matching_digest() {
        let (_dir, mut store) = temp_store();
        let err = store
            .open_project("ghost", OpenMode::Continue, "digest", "{}", &combos(2))
            .unwrap_err();
        assert!(matches!(err, StoreError::ContinueWithoutProject { .. }));

        store
            .open_project("proj", OpenMode::New, "digest-a", "{}", &combos(2))
            .unwrap();
        let err = store
            .open_project("proj", OpenMode::Continue, "digest-b", "{}", &combos(2))
            .unwrap_err();
        assert!(matches!(err, StoreError::ContinueSpecMismatch { .. }));

        // Same digest but a different enumeration is also a mismatch.
        let err = store
            .open_project("proj", OpenMode::Continue, "digest-a", "{}", &combos(3))
            .unwrap_err();
        assert!(matches!(err, StoreError::ContinueSpecMismatch { .. }));
    }

    // Durability definition: record, reopen, still there.
    #[test]
    fn recorded_results_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("parsweep.db");
        {
            let mut store = Store::open(&db).unwrap();
            store
                .open_project("proj", OpenMode::New, "digest", "{\"k\":1}", &combos(2))
                .unwrap();
            store
                .record_result("proj", 1, &ok_result(1, 2.5, &[(1, 0.5)]))
                .unwrap();
        }
        let store = Store::open(&db).unwrap();
        let rows = store.rows("proj").unwrap();
        assert_eq!(rows[1].state, RowState::Done);
        let result = rows[1].result.as_ref().unwrap();
        assert_eq!(result.total_seconds, Some(2.5));
        assert_eq!(result.loop_seconds[&LoopId(1)], 0.5);
        let project = store.project("proj").unwrap().unwrap();
        assert_eq!(project.config_json, "{\"k\":1}");
        assert_eq!(project.status, ProjectStatus::Running);
    }

    #[test]
    fn double_record_and_unknown_rows_are_errors() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(2))
            .unwrap();
        store
            .record_result("proj", 1, &ok_result(1, 2.5, &[]))
            .unwrap();
        let err = store
            .record_result("proj", 1, &ok_result(1, 2.0, &[]))
            .unwrap_err();
        assert!(matches!(err, StoreError::DoubleRecord { serial: 1, .. }));
        let err = store
            .record_result("proj", 9, &ok_result(9, 2.0, &[]))
            .unwrap_err();
        assert!(matches!(err, StoreError::UnknownRow { serial: 9, .. }));
    }

    // Helper for the crash test below: when the hook env vars are set, this
    // "test" opens the store and records a result, which aborts the process
    // between write and commit. In a normal run it does nothing.
    #[test]
    fn crash_helper_records_under_the_hook() {
        let Some(db) = std::env::var_os("PARSWEEP_TEST_CRASH_DB") else {
            return;
        };
        let mut store = Store::open(Path::new(&db)).unwrap();
        store
            .open_project("crashy", OpenMode::New, "digest", "{}", &combos(2))
            .unwrap();
        // CRASH_BEFORE_COMMIT_ENV is set by the parent, so this aborts.
        let _ = store.record_result("crashy", 0, &ok_result(0, 1.0, &[]));
        unreachable!("the crash hook should have aborted the process");
    }

    // Fault injection: a crash between write and commit leaves the row
    // pending on reopen.
    #[test]
    fn crash_before_commit_leaves_the_row_pending() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("parsweep.db");
        let exe = std::env::current_exe().unwrap();
        let status = Command::new(&exe)
            .args([
                "store::tests::crash_helper_records_under_the_hook",
                "--exact",
                "--test-threads=1",
                "--nocapture",
            ])
            .env("PARSWEEP_TEST_CRASH_DB", &db)
            .env(CRASH_BEFORE_COMMIT_ENV, "1")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(!status.success(), "helper should abort, not exit cleanly");

        let store = Store::open(&db).unwrap();
        let rows = store.rows("crashy").unwrap();
        assert_eq!(rows.len(), 2, "project row itself was committed");
        assert_eq!(rows[0].state, RowState::Pending);
        assert!(rows[0].result.is_none());
    }

    // Simulated winners table: combo 3 wins loop 1, combo 7 wins loop 2; a
    // brute-force scan over the same rows must agree.
    #[test]
    fn query_best_picks_per_loop_and_whole_program_winners() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(8))
            .unwrap();
        let table: Vec<RunResult> = vec![
            ok_result(0, 10.0, &[(1, 6.0), (2, 3.0)]),
            ok_result(1, 9.0, &[(1, 5.0), (2, 2.9)]),
            status_result(2, RunStatus::BuildFailed, None),
            ok_result(3, 8.0, &[(1, 1.5), (2, 2.8)]),
            status_result(4, RunStatus::TestFailed, None),
            status_result(5, RunStatus::Timeout, None),
            status_result(6, RunStatus::MarkersLostWholeProgramOnly, Some(4.0)),
            ok_result(7, 7.0, &[(1, 5.5), (2, 0.9)]),
        ];
        for result in &table {
            store.record_result("proj", result.serial, result).unwrap();
        }
        let winners = store.query_best("proj").unwrap();
        assert_eq!(winners.per_loop[&LoopId(1)].serial, 3);
        assert_eq!(winners.per_loop[&LoopId(2)].serial, 7);
        assert_eq!(winners.serial_total, 10.0);
        // The markers-lost row has the best total and competes whole-program.
        assert_eq!(winners.whole_program, 6);
        assert_eq!(winners.whole_program_seconds, 4.0);

        // Brute force over the same table.
        for loop_id in [1u32, 2] {
            let best = table
                .iter()
                .filter(|r| r.status == RunStatus::Ok)
                .filter_map(|r| r.loop_seconds.get(&LoopId(loop_id)).map(|s| (r.serial, *s)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(winners.per_loop[&LoopId(loop_id)].serial, best.0);
        }
    }

    #[test]
    fn query_best_breaks_ties_toward_the_lowest_serial() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(3))
            .unwrap();
        store
            .record_result("proj", 0, &ok_result(0, 5.0, &[(1, 2.0)]))
            .unwrap();
        store
            .record_result("proj", 1, &ok_result(1, 5.0, &[(1, 2.0)]))
            .unwrap();
        store
            .record_result("proj", 2, &ok_result(2, 5.0, &[(1, 2.0)]))
            .unwrap();
        let winners = store.query_best("proj").unwrap();
        assert_eq!(winners.per_loop[&LoopId(1)].serial, 0);
        assert_eq!(winners.whole_program, 0);
    }

    // Single candidate: with only the serial baseline done, every loop's
    // winner is combination 0.
    #[test]
    fn query_best_with_only_serial_done() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(4))
            .unwrap();
        store
            .record_result("proj", 0, &ok_result(0, 5.0, &[(1, 2.0), (2, 1.0), (3, 0.5)]))
            .unwrap();
        let winners = store.query_best("proj").unwrap();
        assert_eq!(winners.per_loop.len(), 3);
        assert!(winners.per_loop.values().all(|w| w.serial == 0));
        assert_eq!(winners.whole_program, 0);
    }

    #[test]
    fn query_best_requires_a_serial_baseline() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(2))
            .unwrap();
        assert!(matches!(
            store.query_best("proj"),
            Err(StoreError::NoSerialBaseline)
        ));
        // A failed baseline does not count either.
        store
            .record_result("proj", 0, &status_result(0, RunStatus::RunFailed, None))
            .unwrap();
        assert!(matches!(
            store.query_best("proj"),
            Err(StoreError::NoSerialBaseline)
        ));
    }

    // query_best is a pure function of recorded rows: stable across reopen.
    #[test]
    fn query_best_is_stable_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("parsweep.db");
        {
            let mut store = Store::open(&db).unwrap();
            store
                .open_project("proj", OpenMode::New, "digest", "{}", &combos(3))
                .unwrap();
            store
                .record_result("proj", 0, &ok_result(0, 5.0, &[(1, 2.0)]))
                .unwrap();
            store
                .record_result("proj", 2, &ok_result(2, 3.0, &[(1, 0.4)]))
                .unwrap();
        }
        let store = Store::open(&db).unwrap();
        let first = store.query_best("proj").unwrap();
        let second = store.query_best("proj").unwrap();
        assert_eq!(first.per_loop[&LoopId(1)].serial, 2);
        assert_eq!(first.per_loop, second.per_loop);
        assert_eq!(first.whole_program, second.whole_program);
    }

    #[test]
    fn outputs_round_trip() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(2))
            .unwrap();
        assert!(store.output("proj", 1).unwrap().is_none());
        let units = vec![SourceUnit::new("a.c", "int main(void){return 0;}\n")];
        store.record_output("proj", 1, &units, true).unwrap();
        let (back, intact) = store.output("proj", 1).unwrap().unwrap();
        assert_eq!(back, units);
        assert!(intact);
        // Idempotent upsert.
        store.record_output("proj", 1, &units, false).unwrap();
        let (_, intact) = store.output("proj", 1).unwrap().unwrap();
        assert!(!intact);
    }

    #[test]
    fn extend_appends_only_new_combinations() {
        let (_dir, mut store) = temp_store();
        let original = combos(3);
        store
            .open_project("proj", OpenMode::New, "d1", "{}", &original)
            .unwrap();
        store
            .record_result("proj", 0, &ok_result(0, 5.0, &[]))
            .unwrap();

        let mut extended = combos(5);
        let appended = store
            .extend_project("proj", "d2", "{}", &extended)
            .unwrap();
        assert_eq!(appended, 2);
        let rows = store.rows("proj").unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].state, RowState::Done, "done rows are kept");
        assert_eq!(store.project("proj").unwrap().unwrap().spec_digest, "d2");

        // A changed prefix is refused.
        extended[1].flags = vec!["different".to_string()];
        let err = store
            .extend_project("proj", "d3", "{}", &extended)
            .unwrap_err();
        assert!(matches!(err, StoreError::ExtendMismatch { .. }));

        // Fewer combinations than stored is refused.
        let err = store
            .extend_project("proj", "d3", "{}", &combos(2))
            .unwrap_err();
        assert!(matches!(err, StoreError::ExtendMismatch { .. }));
    }

    #[test]
    fn sweep_lock_is_exclusive_until_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("parsweep.db");
        let lock = acquire_sweep_lock(&db).unwrap();
        let err = acquire_sweep_lock(&db).unwrap_err();
        assert!(matches!(err, StoreError::ProjectLocked { .. }));
        drop(lock);
        acquire_sweep_lock(&db).unwrap();
    }

    #[test]
    fn export_dumps_all_rows_as_json_lines() {
        let (_dir, mut store) = temp_store();
        store
            .open_project("proj", OpenMode::New, "digest", "{}", &combos(3))
            .unwrap();
        store
            .record_result("proj", 0, &ok_result(0, 5.0, &[(1, 2.0)]))
            .unwrap();
        let mut buffer = Vec::new();
        let count = store.export_json_lines("proj", &mut buffer).unwrap();
        assert_eq!(count, 3);
        let text = String::from_utf8(buffer).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in &lines {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(value["project"], "proj");
        }
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["state"], "done");
        assert_eq!(first["result"]["status"], "ok");
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["state"], "pending");
        assert!(second["result"].is_null());

        assert!(matches!(
            store.export_json_lines("ghost", &mut Vec::new()),
            Err(StoreError::ContinueWithoutProject { .. })
        ));
    }
}
