//! C ABI over the xsql toolkit.
//!
//! Every fallible function returns an [`XsqlStatus`]. For any status other
//! than `XSQL_STATUS_OK` the thread's last error message is available through
//! [`xsql_last_error_message`]. Strings handed out by this library must be
//! released with [`xsql_string_free`], schemas with [`xsql_schema_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::time::Duration;

use libc::c_char;
use xsql::exec::{self, Row};
use xsql::schema::{self, DatabaseSchema, SchemaError};
use xsql::{evaluation, linking, sql_scan};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XsqlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    FileNotFound = 3,
    NotADatabase = 4,
    Schema = 5,
    UnknownTable = 6,
    Sql = 7,
    Json = 8,
    Panic = 9,
}

/// Introspected database schema. Opaque to C.
pub struct XsqlSchema {
    inner: DatabaseSchema,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: XsqlStatus, msg: impl Into<String>) -> XsqlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> XsqlStatus) -> XsqlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(XsqlStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, XsqlStatus> {
    if p.is_null() {
        return Err(fail(XsqlStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(XsqlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> XsqlStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            XsqlStatus::Ok
        }
        Err(_) => fail(XsqlStatus::Schema, "output contains a NUL byte"),
    }
}

fn schema_status(e: &SchemaError) -> XsqlStatus {
    match e {
        SchemaError::FileNotFound { .. } => XsqlStatus::FileNotFound,
        SchemaError::NotADatabase { .. } => XsqlStatus::NotADatabase,
        SchemaError::UnknownTable(_) => XsqlStatus::UnknownTable,
        _ => XsqlStatus::Schema,
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn xsql_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed yet. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn xsql_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Introspects the SQLite file at `db_path` into `*out`.
///
/// # Safety
/// `db_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_schema_introspect(db_path: *const c_char, out: *mut *mut XsqlSchema) -> XsqlStatus {
    guard(|| {
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        let path = try_ffi!(str_arg(db_path, "db_path"));
        match schema::introspect(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(XsqlSchema { inner }));
                XsqlStatus::Ok
            }
            Err(e) => fail(schema_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `schema` must come from [`xsql_schema_introspect`] and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn xsql_schema_free(schema: *mut XsqlSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Number of user tables, or 0 for NULL.
///
/// # Safety
/// `schema` must be NULL or a live schema handle.
#[no_mangle]
pub unsafe extern "C" fn xsql_schema_table_count(schema: *const XsqlSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.inner.tables.len())
}

/// Prompt rendering of the schema. `tables` is NULL for all tables or a
/// comma-separated list of names.
///
/// # Safety
/// `schema` must be a live handle; `tables` NULL or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_schema_render(
    schema: *const XsqlSchema,
    tables: *const c_char,
    out: *mut *mut c_char,
) -> XsqlStatus {
    guard(|| {
        let Some(s) = schema.as_ref() else {
            return fail(XsqlStatus::NullArgument, "schema is NULL");
        };
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        let selection: Option<BTreeSet<String>> = if tables.is_null() {
            None
        } else {
            let list = try_ffi!(str_arg(tables, "tables"));
            Some(
                list.split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(str::to_owned)
                    .collect(),
            )
        };
        match schema::render_schema(&s.inner, selection.as_ref()) {
            Ok(text) => put_string(out, text),
            Err(e) => fail(schema_status(&e), e.to_string()),
        }
    })
}

/// The whole schema as JSON.
///
/// # Safety
/// `schema` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_schema_to_json(schema: *const XsqlSchema, out: *mut *mut c_char) -> XsqlStatus {
    guard(|| {
        let Some(s) = schema.as_ref() else {
            return fail(XsqlStatus::NullArgument, "schema is NULL");
        };
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        match serde_json::to_string(&s.inner) {
            Ok(json) => put_string(out, json),
            Err(e) => fail(XsqlStatus::Json, e.to_string()),
        }
    })
}

/// Tables read by `sql`, as a JSON array of canonical names.
///
/// # Safety
/// `schema` must be a live handle; `sql` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_gold_tables(
    schema: *const XsqlSchema,
    sql: *const c_char,
    out: *mut *mut c_char,
) -> XsqlStatus {
    guard(|| {
        let Some(s) = schema.as_ref() else {
            return fail(XsqlStatus::NullArgument, "schema is NULL");
        };
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        let sql = try_ffi!(str_arg(sql, "sql"));
        match sql_scan::extract_tables(sql, &s.inner) {
            Ok(tables) => put_string(out, serde_json::to_string(&tables).expect("string set")),
            Err(e) => fail(XsqlStatus::Sql, e.to_string()),
        }
    })
}

/// Linking prompt for `question`. `seed < 0` keeps database order; otherwise
/// tables and foreign keys are permuted by `seed`.
///
/// # Safety
/// `schema` must be a live handle; `question` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_linking_prompt(
    schema: *const XsqlSchema,
    question: *const c_char,
    seed: i64,
    out: *mut *mut c_char,
) -> XsqlStatus {
    guard(|| {
        let Some(s) = schema.as_ref() else {
            return fail(XsqlStatus::NullArgument, "schema is NULL");
        };
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        let q = try_ffi!(str_arg(question, "question"));
        let prompt = if seed < 0 {
            linking::canonical_linking_prompt(&s.inner, q)
        } else {
            linking::shuffled_linking_prompt(&s.inner, q, seed as u64)
        };
        put_string(out, prompt.text)
    })
}

/// Runs a read-only query and writes its outcome as JSON:
/// `{"status":"ok","rows":[...]}` or `{"status":"error","message":...}`.
/// A failing query is still `XSQL_STATUS_OK`; the failure is in the JSON.
///
/// # Safety
/// `db_path` and `sql` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_execute(
    db_path: *const c_char,
    sql: *const c_char,
    timeout_ms: u64,
    out: *mut *mut c_char,
) -> XsqlStatus {
    guard(|| {
        if out.is_null() {
            return fail(XsqlStatus::NullArgument, "out is NULL");
        }
        let path = try_ffi!(str_arg(db_path, "db_path"));
        let sql = try_ffi!(str_arg(sql, "sql"));
        let result = exec::execute(sql, Path::new(path), Duration::from_millis(timeout_ms));
        match serde_json::to_string(&result) {
            Ok(json) => put_string(out, json),
            Err(e) => fail(XsqlStatus::Json, e.to_string()),
        }
    })
}

/// Compares two result sets given as JSON arrays of rows.
///
/// # Safety
/// `gold_json` and `pred_json` must be NUL-terminated; `equal` writable.
#[no_mangle]
pub unsafe extern "C" fn xsql_compare_results_json(
    gold_json: *const c_char,
    pred_json: *const c_char,
    order_sensitive: bool,
    equal: *mut bool,
) -> XsqlStatus {
    guard(|| {
        if equal.is_null() {
            return fail(XsqlStatus::NullArgument, "equal is NULL");
        }
        let gold = try_ffi!(str_arg(gold_json, "gold_json"));
        let pred = try_ffi!(str_arg(pred_json, "pred_json"));
        let parse = |s: &str, what: &str| {
            serde_json::from_str::<Vec<Row>>(s).map_err(|e| fail(XsqlStatus::Json, format!("{what}: {e}")))
        };
        let gold = try_ffi!(parse(gold, "gold_json"));
        let pred = try_ffi!(parse(pred, "pred_json"));
        *equal = evaluation::compare_results(&gold, &pred, order_sensitive);
        XsqlStatus::Ok
    })
}
