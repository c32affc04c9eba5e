#ifndef XSQL_H
#define XSQL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XsqlStatus {
  XSQL_STATUS_OK = 0,
  XSQL_STATUS_NULL_ARGUMENT = 1,
  XSQL_STATUS_INVALID_UTF8 = 2,
  XSQL_STATUS_FILE_NOT_FOUND = 3,
  XSQL_STATUS_NOT_A_DATABASE = 4,
  XSQL_STATUS_SCHEMA = 5,
  XSQL_STATUS_UNKNOWN_TABLE = 6,
  XSQL_STATUS_SQL = 7,
  XSQL_STATUS_JSON = 8,
  XSQL_STATUS_PANIC = 9,
} XsqlStatus;

/**
 * Introspected database schema. Opaque to C.
 */
typedef struct XsqlSchema XsqlSchema;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *xsql_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed yet. NULL is ignored.
 */
void xsql_string_free(char *s);

/**
 * Introspects the SQLite file at `db_path` into `*out`.
 *
 * # Safety
 * `db_path` must be a NUL-terminated string; `out` must be writable.
 */
enum XsqlStatus xsql_schema_introspect(const char *db_path, struct XsqlSchema **out);

/**
 * # Safety
 * `schema` must come from [`xsql_schema_introspect`] and not have been freed. NULL is ignored.
 */
void xsql_schema_free(struct XsqlSchema *schema);

/**
 * Number of user tables, or 0 for NULL.
 *
 * # Safety
 * `schema` must be NULL or a live schema handle.
 */
size_t xsql_schema_table_count(const struct XsqlSchema *schema);

/**
 * Prompt rendering of the schema. `tables` is NULL for all tables or a
 * comma-separated list of names.
 *
 * # Safety
 * `schema` must be a live handle; `tables` NULL or NUL-terminated; `out` writable.
 */
enum XsqlStatus xsql_schema_render(const struct XsqlSchema *schema, const char *tables, char **out);

/**
 * The whole schema as JSON.
 *
 * # Safety
 * `schema` must be a live handle; `out` writable.
 */
enum XsqlStatus xsql_schema_to_json(const struct XsqlSchema *schema, char **out);

/**
 * Tables read by `sql`, as a JSON array of canonical names.
 *
 * # Safety
 * `schema` must be a live handle; `sql` NUL-terminated; `out` writable.
 */
enum XsqlStatus xsql_gold_tables(const struct XsqlSchema *schema, const char *sql, char **out);

/**
 * Linking prompt for `question`. `seed < 0` keeps database order; otherwise
 * tables and foreign keys are permuted by `seed`.
 *
 * # Safety
 * `schema` must be a live handle; `question` NUL-terminated; `out` writable.
 */
enum XsqlStatus xsql_linking_prompt(const struct XsqlSchema *schema,
                                    const char *question,
                                    int64_t seed,
                                    char **out);

/**
 * Runs a read-only query and writes its outcome as JSON:
 * `{"status":"ok","rows":[...]}` or `{"status":"error","message":...}`.
 * A failing query is still `XSQL_STATUS_OK`; the failure is in the JSON.
 *
 * # Safety
 * `db_path` and `sql` must be NUL-terminated; `out` writable.
 */
enum XsqlStatus xsql_execute(const char *db_path, const char *sql, uint64_t timeout_ms, char **out);

/**
 * Compares two result sets given as JSON arrays of rows.
 *
 * # Safety
 * `gold_json` and `pred_json` must be NUL-terminated; `equal` writable.
 */
enum XsqlStatus xsql_compare_results_json(const char *gold_json,
                                          const char *pred_json,
                                          bool order_sensitive,
                                          bool *equal);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XSQL_H */
