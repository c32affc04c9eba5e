//! Fixture benchmark built at test time from the SQL scripts under
//! `tests/fixtures/db`.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use tempfile::TempDir;
use xsql::dataset::{self, Benchmark, SchemaCache};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let scripts = fixtures_dir().join("db");
        let mut entries: Vec<_> = fs::read_dir(&scripts).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for script in entries {
            let db_id = script.file_stem().unwrap().to_str().unwrap().to_owned();
            let db_dir = dir.path().join("database").join(&db_id);
            fs::create_dir_all(&db_dir).unwrap();
            let conn = Connection::open(db_dir.join(format!("{db_id}.sqlite"))).unwrap();
            conn.execute_batch(&fs::read_to_string(&script).unwrap()).unwrap();
        }
        Self { dir }
    }

    pub fn db_root(&self) -> PathBuf {
        self.dir.path().join("database")
    }

    pub fn db_path(&self, db_id: &str) -> PathBuf {
        dataset::database_path(&self.db_root(), db_id)
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        fixtures_dir().join(format!("{name}.json"))
    }

    /// Loads a split and annotates gold tables.
    pub fn benchmark(&self, name: &str) -> (Benchmark, SchemaCache) {
        let mut bench = dataset::load_split(&self.split_path(name), &self.db_root()).unwrap();
        let cache = SchemaCache::new(self.db_root());
        let ann = bench.annotate_gold_tables(&cache);
        assert!(ann.failures.is_empty(), "{:?}", ann.failures);
        (bench, cache)
    }
}

/// Compares `actual` with the committed golden file; `XSQL_BLESS=1` rewrites it.
pub fn assert_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("XSQL_BLESS").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden {}; rerun with XSQL_BLESS=1", path.display()));
    assert!(
        expected == actual,
        "golden {} differs\n--- expected\n{expected}\n--- actual\n{actual}",
        path.display()
    );
}

/// Same check without panicking, for the acceptance runner.
pub fn golden_matches(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{} differs from snapshot", path.display()))
    }
}

/// One rendered prompt per builder for a fixed fixture question, with the
/// inputs that must each appear in it exactly once.
pub struct PromptCase {
    pub golden: &'static str,
    pub text: String,
    pub inputs: Vec<(&'static str, String)>,
}

pub const GOLDEN_QUESTION: &str =
    "Which city does staff with first name as Janessa and last name as Sawayn live?";
pub const GOLDEN_DESCRIPTIONS: &str = "\
Addresses.address_id: identifier of the address, useful for connecting with the Staff table
Addresses.city: city the address is in
Staff.staff_address_id: address of the staff member, links to Addresses.address_id
Staff.first_name: given name of the staff member
Staff.last_name: family name of the staff member
";
pub const GOLDEN_BAD_SQL: &str = "SELECT T1.city FROM Addresses AS T1 JOIN Staff AS T2 ON T1.address_id = T2.staff_address_id WHERE T2.firstname = 'Janessa'";

pub fn prompt_cases(fx: &Fixture) -> Vec<PromptCase> {
    use std::collections::BTreeSet;
    use xsql::exec::Execution;
    use xsql::linking::{self, LinkedTables};
    use xsql::pipeline::{self, filter_foreign_keys, QuestionContext, SqlAttempt, Stage};
    use xsql::prompts;
    use xsql::schema::{introspect, render_foreign_keys, render_schema, render_tables};

    let db = fx.db_path("driving_school");
    let schema = introspect(&db).unwrap();
    let linked_set: BTreeSet<String> = ["Addresses", "Staff"].iter().map(|s| s.to_string()).collect();
    let linked = LinkedTables::fixed(linked_set.clone());
    let s_full = render_tables(&schema.tables);
    let k_full = render_foreign_keys(&schema.foreign_keys);
    let s_linked = render_schema(&schema, Some(&linked_set)).unwrap();
    let k_linked = render_foreign_keys(&filter_foreign_keys(&schema, &linked_set));

    let ctx = QuestionContext {
        index: 0,
        question: GOLDEN_QUESTION,
        schema: &schema,
        db_path: &db,
        gold_tables: None,
    };
    let description = xsql::admin::SchemaDescription {
        per_column: Default::default(),
        raw_text: GOLDEN_DESCRIPTIONS.to_owned(),
        empty: false,
    };
    let prior = SqlAttempt {
        sql: GOLDEN_BAD_SQL.to_owned(),
        execution: Some(xsql::exec::execute(GOLDEN_BAD_SQL, &db, xsql::exec::DEFAULT_EXEC_TIMEOUT)),
        stage: Stage::Initial,
        no_sql_found: false,
        raw_reply: None,
        call_error: None,
    };
    let error = match prior.execution.as_ref().unwrap() {
        Execution::Error { message } => message.clone(),
        Execution::Ok { .. } => panic!("golden SQL should fail"),
    };

    let q = || ("Q", GOLDEN_QUESTION.to_owned());
    vec![
        PromptCase {
            golden: "linking.txt",
            text: linking::canonical_linking_prompt(&schema, GOLDEN_QUESTION).text,
            inputs: vec![("S", s_full.clone()), ("K", k_full.clone()), q()],
        },
        PromptCase {
            golden: "admin.txt",
            text: xsql::admin::admin_prompt(&linked, &schema, GOLDEN_QUESTION).unwrap().text,
            inputs: vec![("S'", s_linked.clone()), q()],
        },
        PromptCase {
            golden: "generation.txt",
            text: pipeline::generation_prompt(&ctx, &linked, Some(&description)).unwrap().text,
            inputs: vec![
                ("S'", s_linked.clone()),
                ("D", GOLDEN_DESCRIPTIONS.to_owned()),
                ("K'", k_linked.clone()),
                q(),
            ],
        },
        PromptCase {
            golden: "debugging.txt",
            text: pipeline::debugging_prompt(&prior, &ctx, &linked, Some(&description), true).text,
            inputs: vec![
                ("S'", s_linked.clone()),
                ("D", GOLDEN_DESCRIPTIONS.to_owned()),
                ("K", k_full.clone()),
                q(),
                ("E", error),
                ("prior SQL", GOLDEN_BAD_SQL.to_owned()),
            ],
        },
        PromptCase {
            golden: "linking_icl.txt",
            text: linking::icl_linking_prompt(
                &linking::LinkingCase::new(&schema, GOLDEN_QUESTION),
                &linking::default_icl_exemplars(),
            )
                .unwrap()
                .text,
            inputs: vec![("S", s_full), ("K", k_full), q()],
        },
        PromptCase {
            golden: "generation_no_admin.txt",
            text: prompts::build_generation_prompt(&s_linked, None, &k_linked, GOLDEN_QUESTION).text,
            inputs: vec![("S'", s_linked), ("K'", k_linked), q()],
        },
    ]
}

pub fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    haystack.match_indices(needle).count()
}

pub const GOLDEN_SQL: &str = "SELECT T1.city FROM Addresses AS T1 JOIN Staff AS T2 ON T1.address_id = T2.staff_address_id WHERE T2.first_name = 'Janessa' AND T2.last_name = 'Sawayn'";

pub fn fenced(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

/// Mock that answers each component by endpoint name. Replies in each list
/// are consumed in order, the last one repeating.
pub fn scripted(
    linking: Vec<xsql::llm::MockReply>,
    admin: Vec<xsql::llm::MockReply>,
    generation: Vec<xsql::llm::MockReply>,
    debugging: Vec<xsql::llm::MockReply>,
) -> xsql::llm::MockBackend {
    use xsql::llm::{MockBackend, MockFixture, MockRule};
    let rule = |name: &str, responses| MockRule {
        endpoint: Some(name.to_owned()),
        responses,
        ..Default::default()
    };
    MockBackend::from_fixture(MockFixture {
        rules: vec![
            rule("linking", linking),
            rule("admin", admin),
            rule("generation", generation),
            rule("debugging", debugging),
        ],
        default: None,
    })
    .unwrap()
}

pub fn text(s: &str) -> xsql::llm::MockReply {
    xsql::llm::MockReply::Text(s.to_owned())
}

pub fn mock_dev() -> xsql::llm::MockBackend {
    xsql::llm::MockBackend::load(&fixtures_dir().join("mock_dev.json")).unwrap()
}
