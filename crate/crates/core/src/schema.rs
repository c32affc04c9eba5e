//! SQLite catalog introspection and prompt-oriented schema rendering.
//!
//! A [`DatabaseSchema`] holds the candidate tables (with a few sample values
//! per column) and the declared foreign keys of one database. It is built once
//! by [`introspect`] and never mutated afterwards.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// Number of distinct sample values kept per column.
pub const SAMPLE_VALUES_PER_COLUMN: usize = 3;
/// Sample values longer than this many characters are cut and marked.
pub const SAMPLE_VALUE_MAX_CHARS: usize = 64;
const TRUNCATION_MARKER: &str = "...";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("database file not found: {path}")]
    FileNotFound { path: PathBuf },
    #[error("{path} is not a SQLite database: {message}")]
    NotADatabase { path: PathBuf, message: String },
    #[error("failed to introspect {path}: {message}")]
    Introspection { path: PathBuf, message: String },
    #[error("unknown table: {0}")]
    UnknownTable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
    /// Rendered SQL literals: text quoted, numbers bare.
    pub sample_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
    pub create_statement: String,
}

impl TableInfo {
    pub fn column(&self, name: &str) -> Option<&ColumnInfo> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyInfo {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl ForeignKeyInfo {
    /// One line of the foreign-key block used in prompts.
    pub fn render(&self) -> String {
        format!(
            "{}.{} = {}.{}",
            self.from_table, self.from_column, self.to_table, self.to_column
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableInfo>,
    pub foreign_keys: Vec<ForeignKeyInfo>,
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Maps any casing of a table name to the name as stored in the database.
    pub fn canonical_table_name(&self, name: &str) -> Option<&str> {
        self.table(name).map(|t| t.name.as_str())
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn all_table_names(&self) -> BTreeSet<String> {
        self.tables.iter().map(|t| t.name.clone()).collect()
    }

    /// Resolves every name to its canonical form, failing on the first unknown one.
    pub fn resolve_tables<'a, I>(&self, names: I) -> Result<BTreeSet<String>, SchemaError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        names
            .into_iter()
            .map(|n| {
                self.canonical_table_name(n)
                    .map(str::to_owned)
                    .ok_or_else(|| SchemaError::UnknownTable(n.clone()))
            })
            .collect()
    }
}

/// Reads the catalog, sample values and declared foreign keys of a SQLite file.
pub fn introspect(db_path: &Path) -> Result<DatabaseSchema, SchemaError> {
    if !db_path.is_file() {
        return Err(SchemaError::FileNotFound {
            path: db_path.to_path_buf(),
        });
    }
    let conn = open_read_only(db_path).map_err(|e| classify(db_path, e))?;
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_schema(&conn, db_id).map_err(|e| classify(db_path, e))
}

/// Opens a private read-only connection.
pub fn open_read_only(db_path: &Path) -> rusqlite::Result<Connection> {
    Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
}

fn classify(path: &Path, err: rusqlite::Error) -> SchemaError {
    let not_a_db = matches!(
        err.sqlite_error_code(),
        Some(rusqlite::ErrorCode::NotADatabase)
    );
    if not_a_db {
        SchemaError::NotADatabase {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    } else {
        SchemaError::Introspection {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

/// Introspects an already-open connection. Used by [`introspect`] and by tests
/// working on in-memory databases.
pub fn read_schema(conn: &Connection, db_id: String) -> rusqlite::Result<DatabaseSchema> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master \
         WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' \
         ORDER BY rowid",
    )?;
    let names: Vec<String> = stmt
        .query_map([], |row| row.get(0))?
        .collect::<Result<_, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in &names {
        tables.push(read_table(conn, name)?);
    }

    let mut foreign_keys = Vec::new();
    let mut seen = HashSet::new();
    for table in &tables {
        for fk in read_foreign_keys(conn, table, &tables)? {
            if seen.insert(fk.clone()) {
                foreign_keys.push(fk);
            }
        }
    }

    Ok(DatabaseSchema {
        db_id,
        tables,
        foreign_keys,
    })
}

fn read_table(conn: &Connection, name: &str) -> rusqlite::Result<TableInfo> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(name)))?;
    let raw: Vec<(String, String, i64)> = stmt
        .query_map([], |row| Ok((row.get(1)?, row.get(2)?, row.get(5)?)))?
        .collect::<Result<_, _>>()?;

    let mut columns = Vec::with_capacity(raw.len());
    for (col, declared_type, pk) in raw {
        let sample_values = sample_column(conn, name, &col)?;
        columns.push(ColumnInfo {
            name: col,
            declared_type,
            is_primary_key: pk > 0,
            sample_values,
        });
    }
    if columns.is_empty() {
        return Err(rusqlite::Error::InvalidParameterName(format!(
            "table {name} has no columns"
        )));
    }
    let create_statement = render_create_statement(name, &columns);
    Ok(TableInfo {
        name: name.to_owned(),
        columns,
        create_statement,
    })
}

fn sample_column(conn: &Connection, table: &str, column: &str) -> rusqlite::Result<Vec<String>> {
    // NOT INDEXED forces a table scan, so values come back in row order.
    let sql = format!(
        "SELECT {col} FROM {tab} NOT INDEXED WHERE {col} IS NOT NULL",
        col = quote_ident(column),
        tab = quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut out: Vec<String> = Vec::with_capacity(SAMPLE_VALUES_PER_COLUMN);
    while let Some(row) = rows.next()? {
        let rendered = render_sample(row.get_ref(0)?);
        if !out.contains(&rendered) {
            out.push(rendered);
            if out.len() == SAMPLE_VALUES_PER_COLUMN {
                break;
            }
        }
    }
    Ok(out)
}

/// Renders one cell as a SQL literal for prompts.
pub fn render_sample(value: ValueRef<'_>) -> String {
    match value {
        ValueRef::Null => "NULL".to_owned(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => format!("{f:?}"),
        ValueRef::Text(t) => {
            let s = String::from_utf8_lossy(t);
            format!("'{}'", truncate(&s).replace('\'', "''"))
        }
        ValueRef::Blob(b) => {
            let hex: String = b.iter().map(|byte| format!("{byte:02X}")).collect();
            format!("X'{}'", truncate(&hex))
        }
    }
}

fn truncate(s: &str) -> String {
    if s.chars().count() <= SAMPLE_VALUE_MAX_CHARS {
        s.to_owned()
    } else {
        let mut t: String = s.chars().take(SAMPLE_VALUE_MAX_CHARS).collect();
        t.push_str(TRUNCATION_MARKER);
        t
    }
}

fn read_foreign_keys(
    conn: &Connection,
    table: &TableInfo,
    tables: &[TableInfo],
) -> rusqlite::Result<Vec<ForeignKeyInfo>> {
    let mut stmt = conn.prepare(&format!(
        "PRAGMA foreign_key_list({})",
        quote_ident(&table.name)
    ))?;
    let mut raw: Vec<(i64, i64, String, String, Option<String>)> = stmt
        .query_map([], |row| Ok((row.get(0)?, row.get(1)?, row.get(2)?, row.get(3)?, row.get(4)?)))?
        .collect::<Result<_, _>>()?;
    // The pragma numbers constraints last-declared first; restore source order.
    raw.sort_by_key(|r| (std::cmp::Reverse(r.0), r.1));

    let mut out = Vec::new();
    for (_, _, to_table, from_column, to_column) in raw {
        let Some(target) = tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(&to_table))
        else {
            warn!(table = %table.name, %to_table, "dropping foreign key to unknown table");
            continue;
        };
        let Some(from) = table.column(&from_column) else {
            warn!(table = %table.name, %from_column, "dropping foreign key from unknown column");
            continue;
        };
        // A missing parent column means the parent's primary key.
        let to = match to_column {
            Some(c) => target.column(&c),
            None => target.columns.iter().find(|c| c.is_primary_key),
        };
        let Some(to) = to else {
            warn!(table = %table.name, to_table = %target.name, "dropping foreign key to unknown column");
            continue;
        };
        out.push(ForeignKeyInfo {
            from_table: table.name.clone(),
            from_column: from.name.clone(),
            to_table: target.name.clone(),
            to_column: to.name.clone(),
        });
    }
    Ok(out)
}

const RESERVED: &[&str] = &[
    "add", "all", "alter", "and", "as", "asc", "between", "by", "case", "check", "column",
    "create", "default", "delete", "desc", "distinct", "drop", "else", "end", "except", "exists",
    "from", "group", "having", "in", "index", "insert", "intersect", "into", "is", "join", "key",
    "like", "limit", "not", "null", "on", "or", "order", "primary", "references", "select", "set",
    "table", "then", "to", "union", "unique", "update", "values", "when", "where",
];

/// Quotes an identifier only when it would not parse bare.
pub fn display_ident(name: &str) -> String {
    let simple = name
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if simple && !RESERVED.contains(&name.to_ascii_lowercase().as_str()) {
        name.to_owned()
    } else {
        quote_ident(name)
    }
}

pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Column definitions plus, for composite keys, the table-level key clause.
fn column_defs(columns: &[ColumnInfo]) -> (Vec<String>, Option<String>) {
    let composite = columns.iter().filter(|c| c.is_primary_key).count() > 1;
    let defs = columns
        .iter()
        .map(|c| {
            let mut def = display_ident(&c.name);
            if !c.declared_type.is_empty() {
                def.push(' ');
                def.push_str(&c.declared_type);
            }
            if c.is_primary_key && !composite {
                def.push_str(" PRIMARY KEY");
            }
            def
        })
        .collect();
    let key = composite.then(|| {
        let keys: Vec<String> = columns
            .iter()
            .filter(|c| c.is_primary_key)
            .map(|c| display_ident(&c.name))
            .collect();
        format!("PRIMARY KEY ({})", keys.join(", "))
    });
    (defs, key)
}

fn render_create_statement(name: &str, columns: &[ColumnInfo]) -> String {
    let (mut defs, key) = column_defs(columns);
    defs.extend(key);
    format!("CREATE TABLE {} ({})", display_ident(name), defs.join(", "))
}

/// Renders the given tables in the given order, one CREATE-style block each,
/// with sample values as a trailing comment on every column line.
pub fn render_tables<'a, I>(tables: I) -> String
where
    I: IntoIterator<Item = &'a TableInfo>,
{
    let mut out = String::new();
    for table in tables {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "CREATE TABLE {} (", display_ident(&table.name));
        let (defs, key) = column_defs(&table.columns);
        let n = defs.len();
        for (i, (def, col)) in defs.into_iter().zip(&table.columns).enumerate() {
            let comma = if i + 1 < n || key.is_some() { "," } else { "" };
            let _ = write!(out, "  {def}{comma}");
            if !col.sample_values.is_empty() {
                let _ = write!(out, " -- examples: {}", col.sample_values.join(", "));
            }
            out.push('\n');
        }
        if let Some(key) = key {
            let _ = writeln!(out, "  {key}");
        }
        out.push_str(");\n");
    }
    out
}

/// Renders the selected tables (all when `tables` is `None`) in schema order.
pub fn render_schema(
    schema: &DatabaseSchema,
    tables: Option<&BTreeSet<String>>,
) -> Result<String, SchemaError> {
    let Some(selection) = tables else {
        return Ok(render_tables(&schema.tables));
    };
    let wanted: HashSet<String> = selection
        .iter()
        .map(|n| {
            schema
                .canonical_table_name(n)
                .map(str::to_ascii_lowercase)
                .ok_or_else(|| SchemaError::UnknownTable(n.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(render_tables(
        schema
            .tables
            .iter()
            .filter(|t| wanted.contains(&t.name.to_ascii_lowercase())),
    ))
}

/// Renders foreign keys one per line.
pub fn render_foreign_keys<'a, I>(fks: I) -> String
where
    I: IntoIterator<Item = &'a ForeignKeyInfo>,
{
    let mut out = String::new();
    for fk in fks {
        out.push_str(&fk.render());
        out.push('\n');
    }
    out
}
