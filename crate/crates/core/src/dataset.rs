//! Spider-format question files and database layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{self, DatabaseSchema, SchemaError};
use crate::sql_scan::{self, ScanError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("no database for db_id {db_id:?} under {db_root}")]
    MissingDatabase { db_id: String, db_root: PathBuf },
    #[error("cannot extract gold tables: {0}")]
    UnparseableGoldSql(#[from] ScanError),
    #[error("question has no gold SQL")]
    NoGoldSql,
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiderQuestion {
    pub db_id: String,
    pub question: String,
    pub gold_sql: Option<String>,
    pub gold_tables: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub split_name: String,
    pub questions: Vec<SpiderQuestion>,
    pub db_root: PathBuf,
}

#[derive(Deserialize)]
struct RawQuestion {
    db_id: String,
    question: String,
    #[serde(default)]
    query: Option<String>,
}

/// `<db_root>/<db_id>/<db_id>.sqlite`
pub fn database_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

/// Loads a question file and checks that every referenced database exists.
pub fn load_split(questions_path: &Path, db_root: &Path) -> Result<Benchmark, DatasetError> {
    let text = fs::read_to_string(questions_path).map_err(|source| DatasetError::Io {
        path: questions_path.to_path_buf(),
        source,
    })?;
    let raw: Vec<RawQuestion> =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: questions_path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    let mut checked = HashSet::new();
    let mut questions = Vec::with_capacity(raw.len());
    for q in raw {
        if !checked.contains(&q.db_id) {
            if !database_path(db_root, &q.db_id).is_file() {
                return Err(DatasetError::MissingDatabase {
                    db_id: q.db_id,
                    db_root: db_root.to_path_buf(),
                });
            }
            checked.insert(q.db_id.clone());
        }
        questions.push(SpiderQuestion {
            db_id: q.db_id,
            question: q.question,
            gold_sql: q.query,
            gold_tables: None,
        });
    }

    let split_name = questions_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Benchmark {
        split_name,
        questions,
        db_root: db_root.to_path_buf(),
    })
}

/// Tables of `schema` read by the question's gold query, nested subqueries included.
pub fn derive_gold_tables(
    q: &SpiderQuestion,
    schema: &DatabaseSchema,
) -> Result<BTreeSet<String>, DatasetError> {
    let sql = q.gold_sql.as_deref().ok_or(DatasetError::NoGoldSql)?;
    Ok(sql_scan::extract_tables(sql, schema)?)
}

/// Introspected schemas keyed by `db_id`, loaded on first use.
#[derive(Debug, Default)]
pub struct SchemaCache {
    db_root: PathBuf,
    schemas: std::sync::Mutex<HashMap<String, Arc<DatabaseSchema>>>,
}

impl SchemaCache {
    pub fn new(db_root: impl Into<PathBuf>) -> Self {
        Self {
            db_root: db_root.into(),
            schemas: Default::default(),
        }
    }

    pub fn db_root(&self) -> &Path {
        &self.db_root
    }

    pub fn get(&self, db_id: &str) -> Result<Arc<DatabaseSchema>, SchemaError> {
        if let Some(s) = self.schemas.lock().unwrap().get(db_id) {
            return Ok(Arc::clone(s));
        }
        let mut schema = schema::introspect(&database_path(&self.db_root, db_id))?;
        schema.db_id = db_id.to_owned();
        let schema = Arc::new(schema);
        self.schemas
            .lock()
            .unwrap()
            .insert(db_id.to_owned(), Arc::clone(&schema));
        Ok(schema)
    }
}

/// Outcome of gold-table annotation over a split.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct GoldAnnotation {
    /// Question index → reason extraction failed.
    pub failures: BTreeMap<usize, String>,
}

impl Benchmark {
    /// Fills `gold_tables` for every question with gold SQL. Failures are
    /// recorded and leave `gold_tables` unset; those questions drop out of
    /// linking metrics but still count for execution accuracy.
    pub fn annotate_gold_tables(&mut self, cache: &SchemaCache) -> GoldAnnotation {
        let mut report = GoldAnnotation::default();
        for (i, q) in self.questions.iter_mut().enumerate() {
            if q.gold_sql.is_none() {
                continue;
            }
            let result = cache
                .get(&q.db_id)
                .map_err(DatasetError::from)
                .and_then(|s| derive_gold_tables(q, &s));
            match result {
                Ok(t) => q.gold_tables = Some(t),
                Err(e) => {
                    tracing::warn!(index = i, db_id = %q.db_id, error = %e, "gold table extraction failed");
                    report.failures.insert(i, e.to_string());
                }
            }
        }
        report
    }

    pub fn database_path(&self, db_id: &str) -> PathBuf {
        database_path(&self.db_root, db_id)
    }
}

#[derive(Deserialize)]
struct TablesJsonEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

/// Compares a Spider `tables.json` against introspected schemas. Returns one
/// human-readable warning per mismatch; the database files stay authoritative.
pub fn cross_check_tables_json(
    tables_json: &Path,
    cache: &SchemaCache,
) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(tables_json).map_err(|source| DatasetError::Io {
        path: tables_json.to_path_buf(),
        source,
    })?;
    let entries: Vec<TablesJsonEntry> =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: tables_json.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    let mut warnings = Vec::new();
    for entry in entries {
        let schema = match cache.get(&entry.db_id) {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("{}: {e}", entry.db_id));
                continue;
            }
        };
        let listed: BTreeSet<String> = entry
            .table_names_original
            .iter()
            .map(|t| t.to_ascii_lowercase())
            .collect();
        let actual: BTreeSet<String> = schema
            .tables
            .iter()
            .map(|t| t.name.to_ascii_lowercase())
            .collect();
        for t in listed.difference(&actual) {
            warnings.push(format!("{}: table {t} listed but not in database", entry.db_id));
        }
        for t in actual.difference(&listed) {
            warnings.push(format!("{}: table {t} in database but not listed", entry.db_id));
        }
        for (table_idx, column) in &entry.column_names_original {
            let Ok(idx) = usize::try_from(*table_idx) else {
                continue; // the "*" pseudo-column
            };
            let Some(table) = entry.table_names_original.get(idx) else {
                warnings.push(format!("{}: column {column} has bad table index {idx}", entry.db_id));
                continue;
            };
            if schema.table(table).is_some_and(|t| t.column(column).is_none()) {
                warnings.push(format!("{}: column {table}.{column} not in database", entry.db_id));
            }
        }
        if entry.foreign_keys.len() != schema.foreign_keys.len() {
            warnings.push(format!(
                "{}: {} foreign keys listed, {} declared",
                entry.db_id,
                entry.foreign_keys.len(),
                schema.foreign_keys.len()
            ));
        }
    }
    Ok(warnings)
}
