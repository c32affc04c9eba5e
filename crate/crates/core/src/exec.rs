//! Read-only query execution with a wall-clock limit.

use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::schema::open_read_only;

pub const DEFAULT_EXEC_TIMEOUT: Duration = Duration::from_secs(30);

/// One result cell as returned by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<ValueRef<'_>> for Cell {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }
}

pub type Row = Vec<Cell>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Execution {
    Ok { rows: Vec<Row> },
    Error { message: String },
}

impl Execution {
    pub fn is_ok(&self) -> bool {
        matches!(self, Execution::Ok { .. })
    }

    pub fn error_message(&self) -> Option<&str> {
        match self {
            Execution::Error { message } => Some(message),
            Execution::Ok { .. } => None,
        }
    }

    pub fn rows(&self) -> Option<&[Row]> {
        match self {
            Execution::Ok { rows } => Some(rows),
            Execution::Error { .. } => None,
        }
    }

    fn error(message: impl Into<String>) -> Self {
        Execution::Error {
            message: message.into(),
        }
    }
}

/// Runs one read-only statement. Every failure, including timeouts and
/// attempted writes, comes back as [`Execution::Error`].
pub fn execute(sql: &str, db_path: &Path, timeout: Duration) -> Execution {
    if sql.trim().is_empty() {
        return Execution::error("empty SQL");
    }
    if !db_path.is_file() {
        return Execution::error(format!("database not found: {}", db_path.display()));
    }
    let conn = match open_read_only(db_path) {
        Ok(c) => c,
        Err(e) => return Execution::error(e.to_string()),
    };
    let started = Instant::now();
    if let Err(e) = conn.progress_handler(1_000, Some(move || started.elapsed() > timeout)) {
        return Execution::error(e.to_string());
    }

    let result = (|| -> rusqlite::Result<Execution> {
        let mut stmt = conn.prepare(sql)?;
        if !stmt.readonly() {
            return Ok(Execution::error("only read-only statements may be executed"));
        }
        let width = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(Cell::from(row.get_ref(i)?));
            }
            out.push(cells);
        }
        Ok(Execution::Ok { rows: out })
    })();

    match result {
        Ok(e) => e,
        Err(e) if e.sqlite_error_code() == Some(rusqlite::ErrorCode::OperationInterrupted) => {
            Execution::error(format!("query timed out after {:.1}s", timeout.as_secs_f64()))
        }
        // Keep the engine's message without the echoed statement.
        Err(rusqlite::Error::SqlInputError { msg, .. }) => Execution::error(msg),
        Err(e) => Execution::error(e.to_string()),
    }
}
