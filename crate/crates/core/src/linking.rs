//! Table-level schema linking.
//!
//! [`link`] asks the linking model the same question several times, each time
//! with the candidate tables and foreign keys in a different seeded order, and
//! returns the union of the table names it answered. Names that are not
//! candidate tables never reach the result.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::dataset::{derive_gold_tables, Benchmark, SchemaCache};
use crate::llm::{ChatBackend, LlmError, ModelEndpoint};
use crate::prompts::{self, IclExemplar, RenderedPrompt, LINKING_ANSWER_MARKER};
use crate::schema::{render_foreign_keys, render_tables, DatabaseSchema, ForeignKeyInfo, TableInfo};

pub const DEFAULT_NUM_SHUFFLES: usize = 5;
pub const ICL_SHOTS: usize = 3;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("num_shuffles must be at least 1")]
    NoShuffles,
    #[error("all {attempts} linking call(s) failed; last error: {last}")]
    LinkingFailed { attempts: usize, last: LlmError },
    #[error("few-shot linker needs exactly {ICL_SHOTS} exemplars, got {0}")]
    WrongExemplarCount(usize),
    #[error("question has no gold tables")]
    NoGoldTables,
    #[error("gold table {0:?} is not a candidate table")]
    UnknownGoldTable(String),
}

#[derive(Debug, Clone, Copy)]
pub struct LinkingCase<'a> {
    pub schema: &'a DatabaseSchema,
    pub question: &'a str,
    pub gold_tables: Option<&'a BTreeSet<String>>,
}

impl<'a> LinkingCase<'a> {
    pub fn new(schema: &'a DatabaseSchema, question: &'a str) -> Self {
        Self {
            schema,
            question,
            gold_tables: None,
        }
    }
}

/// One linking call, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleOutput {
    /// Seed of the table/foreign-key permutation; `None` for unshuffled calls.
    pub seed: Option<u64>,
    pub raw_text: Option<String>,
    pub parsed: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedTables {
    pub tables: BTreeSet<String>,
    pub per_shuffle_outputs: Vec<ShuffleOutput>,
    pub discarded_names: Vec<String>,
    #[serde(default)]
    pub failed_shuffles: usize,
    /// No call produced a valid name, so every candidate table was kept.
    #[serde(default)]
    pub fell_back_to_full_schema: bool,
}

impl LinkedTables {
    /// Every candidate table, without asking a model.
    pub fn full_schema(schema: &DatabaseSchema) -> Self {
        Self {
            tables: schema.all_table_names(),
            per_shuffle_outputs: Vec::new(),
            discarded_names: Vec::new(),
            failed_shuffles: 0,
            fell_back_to_full_schema: false,
        }
    }

    /// A known table set, e.g. gold tables for oracle runs.
    pub fn fixed(tables: BTreeSet<String>) -> Self {
        Self {
            tables,
            per_shuffle_outputs: Vec::new(),
            discarded_names: Vec::new(),
            failed_shuffles: 0,
            fell_back_to_full_schema: false,
        }
    }
}

/// Splits a linking reply into candidate table names (canonical casing) and
/// names that match no candidate.
pub fn parse_table_names(text: &str, schema: &DatabaseSchema) -> (BTreeSet<String>, Vec<String>) {
    let mut found = BTreeSet::new();
    let mut discarded = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.eq_ignore_ascii_case(LINKING_ANSWER_MARKER) {
            continue;
        }
        for piece in line.split(',') {
            let name = clean_name(piece);
            if name.is_empty() {
                continue;
            }
            match schema.canonical_table_name(name) {
                Some(canonical) => {
                    found.insert(canonical.to_owned());
                }
                None => discarded.push(name.to_owned()),
            }
        }
    }
    (found, discarded)
}

fn clean_name(piece: &str) -> &str {
    let mut s = piece.trim();
    // Bullets and list numbering.
    s = s.trim_start_matches(['-', '*', '•', '#']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 && s[digits..].starts_with(['.', ')']) {
        s = s[digits + 1..].trim_start();
    }
    loop {
        let t = s
            .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '[' | ']') || c.is_whitespace())
            .trim_end_matches(['.', ';']);
        if t.len() == s.len() {
            return t;
        }
        s = t;
    }
}

/// Per-shuffle permutation seeds. Seed `i` does not depend on how many
/// shuffles are requested, so a longer run extends a shorter one.
pub fn shuffle_seeds(rng_seed: u64, num_shuffles: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..num_shuffles).map(|_| rng.next_u64()).collect()
}

/// Linking prompt with tables and foreign keys permuted by `seed`.
pub fn shuffled_linking_prompt(schema: &DatabaseSchema, question: &str, seed: u64) -> RenderedPrompt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables: Vec<&TableInfo> = schema.tables.iter().collect();
    tables.shuffle(&mut rng);
    let mut fks: Vec<&ForeignKeyInfo> = schema.foreign_keys.iter().collect();
    fks.shuffle(&mut rng);
    prompts::build_linking_prompt(
        &render_tables(tables),
        &render_foreign_keys(fks),
        question,
    )
}

/// Linking prompt in database order, as used for fine-tuning data.
pub fn canonical_linking_prompt(schema: &DatabaseSchema, question: &str) -> RenderedPrompt {
    prompts::build_linking_prompt(
        &render_tables(&schema.tables),
        &render_foreign_keys(&schema.foreign_keys),
        question,
    )
}

fn call(
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
    schema: &DatabaseSchema,
    prompt: &str,
    seed: Option<u64>,
) -> (ShuffleOutput, Vec<String>, Option<LlmError>) {
    match backend.complete(endpoint, prompt) {
        Ok(c) => {
            let (parsed, discarded) = parse_table_names(&c.text, schema);
            (
                ShuffleOutput {
                    seed,
                    raw_text: Some(c.text),
                    parsed,
                    error: None,
                },
                discarded,
                None,
            )
        }
        Err(e) => (
            ShuffleOutput {
                seed,
                raw_text: None,
                parsed: BTreeSet::new(),
                error: Some(e.to_string()),
            },
            Vec::new(),
            Some(e),
        ),
    }
}

fn reduce(
    schema: &DatabaseSchema,
    rounds: Vec<(ShuffleOutput, Vec<String>, Option<LlmError>)>,
) -> Result<LinkedTables, LinkError> {
    let attempts = rounds.len();
    let mut tables = BTreeSet::new();
    let mut per_shuffle_outputs = Vec::with_capacity(attempts);
    let mut discarded_names = Vec::new();
    let mut failed = 0;
    let mut last_error = None;
    for (out, discarded, err) in rounds {
        if let Some(e) = err {
            failed += 1;
            last_error = Some(e);
        }
        tables.extend(out.parsed.iter().cloned());
        discarded_names.extend(discarded);
        per_shuffle_outputs.push(out);
    }
    if failed == attempts {
        return Err(LinkError::LinkingFailed {
            attempts,
            last: last_error.expect("at least one round"),
        });
    }
    if failed > 0 {
        warn!(failed, attempts, "some linking calls failed; using the rest");
    }
    if !discarded_names.is_empty() {
        info!(names = ?discarded_names, "discarded non-candidate table names");
    }
    let fell_back = tables.is_empty();
    if fell_back {
        warn!("linking produced no candidate table; falling back to the full schema");
        tables = schema.all_table_names();
    }
    Ok(LinkedTables {
        tables,
        per_shuffle_outputs,
        discarded_names,
        failed_shuffles: failed,
        fell_back_to_full_schema: fell_back,
    })
}

/// Shuffle-union linking: `num_shuffles` calls over seeded permutations of the
/// candidate tables and foreign keys, union of the parsed answers.
pub fn link(
    case: &LinkingCase<'_>,
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
    num_shuffles: usize,
    rng_seed: u64,
) -> Result<LinkedTables, LinkError> {
    if num_shuffles == 0 {
        return Err(LinkError::NoShuffles);
    }
    let rounds = shuffle_seeds(rng_seed, num_shuffles)
        .into_iter()
        .map(|seed| {
            let prompt = shuffled_linking_prompt(case.schema, case.question, seed);
            call(backend, endpoint, case.schema, &prompt.text, Some(seed))
        })
        .collect();
    reduce(case.schema, rounds)
}

/// One call in database order, no shuffling.
pub fn link_canonical(
    case: &LinkingCase<'_>,
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
) -> Result<LinkedTables, LinkError> {
    let prompt = canonical_linking_prompt(case.schema, case.question);
    let round = call(backend, endpoint, case.schema, &prompt.text, None);
    reduce(case.schema, vec![round])
}

pub fn icl_linking_prompt(
    case: &LinkingCase<'_>,
    exemplars: &[IclExemplar],
) -> Result<RenderedPrompt, LinkError> {
    if exemplars.len() != ICL_SHOTS {
        return Err(LinkError::WrongExemplarCount(exemplars.len()));
    }
    Ok(prompts::build_icl_linking_prompt(
        exemplars,
        &render_tables(&case.schema.tables),
        &render_foreign_keys(&case.schema.foreign_keys),
        case.question,
    ))
}

/// Few-shot baseline: one unshuffled call with three worked examples prepended.
pub fn link_icl(
    case: &LinkingCase<'_>,
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
    exemplars: &[IclExemplar],
) -> Result<LinkedTables, LinkError> {
    let prompt = icl_linking_prompt(case, exemplars)?;
    let round = call(backend, endpoint, case.schema, &prompt.text, None);
    reduce(case.schema, vec![round])
}

/// Three fixed worked examples from unrelated databases.
pub fn default_icl_exemplars() -> Vec<IclExemplar> {
    vec![
        IclExemplar {
            schema_text: "CREATE TABLE singer (\n  singer_id INT PRIMARY KEY, -- examples: 1, 2, 3\n  name TEXT, -- examples: 'Joe Sharp', 'Timbaland', 'Justin Brown'\n  country TEXT -- examples: 'Netherlands', 'United States', 'France'\n);\n\nCREATE TABLE concert (\n  concert_id INT PRIMARY KEY, -- examples: 1, 2, 3\n  concert_name TEXT, -- examples: 'Auditions', 'Super bootcamp', 'Home Visits'\n  year TEXT -- examples: '2014', '2015'\n);\n\nCREATE TABLE singer_in_concert (\n  concert_id INT PRIMARY KEY, -- examples: 1, 2, 3\n  singer_id TEXT -- examples: '2', '3', '5'\n);\n".into(),
            fk_text: "singer_in_concert.singer_id = singer.singer_id\nsinger_in_concert.concert_id = concert.concert_id\n".into(),
            question: "What are the names of the singers who performed in a concert in 2014?".into(),
            tables: vec!["singer".into(), "concert".into(), "singer_in_concert".into()],
        },
        IclExemplar {
            schema_text: "CREATE TABLE Student (\n  StuID INTEGER PRIMARY KEY, -- examples: 1001, 1002, 1003\n  LName VARCHAR(12), -- examples: 'Smith', 'Kim', 'Jones'\n  Age INTEGER -- examples: 18, 19, 21\n);\n\nCREATE TABLE Has_Pet (\n  StuID INTEGER, -- examples: 1001, 1002\n  PetID INTEGER -- examples: 2001, 2002, 2003\n);\n\nCREATE TABLE Pets (\n  PetID INTEGER PRIMARY KEY, -- examples: 2001, 2002, 2003\n  PetType VARCHAR(20), -- examples: 'cat', 'dog'\n  weight REAL -- examples: 12.0, 13.4, 9.3\n);\n".into(),
            fk_text: "Has_Pet.StuID = Student.StuID\nHas_Pet.PetID = Pets.PetID\n".into(),
            question: "What is the average weight of all dogs?".into(),
            tables: vec!["Pets".into()],
        },
        IclExemplar {
            schema_text: "CREATE TABLE continents (\n  ContId INTEGER PRIMARY KEY, -- examples: 1, 2, 3\n  Continent TEXT -- examples: 'america', 'europe', 'asia'\n);\n\nCREATE TABLE countries (\n  CountryId INTEGER PRIMARY KEY, -- examples: 1, 2, 3\n  CountryName TEXT, -- examples: 'usa', 'germany', 'france'\n  Continent INTEGER -- examples: 1, 2, 3\n);\n\nCREATE TABLE car_makers (\n  Id INTEGER PRIMARY KEY, -- examples: 1, 2, 3\n  Maker TEXT, -- examples: 'amc', 'volkswagen', 'bmw'\n  Country TEXT -- examples: '1', '2', '3'\n);\n".into(),
            fk_text: "countries.Continent = continents.ContId\ncar_makers.Country = countries.CountryId\n".into(),
            question: "How many car makers are there in each continent? List the continent name and the count.".into(),
            tables: vec!["continents".into(), "countries".into(), "car_makers".into()],
        },
    ]
}

/// One fine-tuning example: linking prompt in database order and the gold
/// table names as the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub target: String,
}

pub fn sft_record(
    schema: &DatabaseSchema,
    question: &str,
    gold: &BTreeSet<String>,
) -> Result<SftRecord, LinkError> {
    for g in gold {
        if schema.table(g).is_none() {
            return Err(LinkError::UnknownGoldTable(g.clone()));
        }
    }
    // Target lists tables in database order.
    let target = schema
        .tables
        .iter()
        .filter(|t| gold.iter().any(|g| g.eq_ignore_ascii_case(&t.name)))
        .map(|t| t.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    Ok(SftRecord {
        prompt: canonical_linking_prompt(schema, question).text,
        target,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SftExport {
    pub written: usize,
    /// (question index, reason)
    pub skipped: Vec<(usize, String)>,
}

/// Writes one `{"prompt", "target"}` JSON object per line.
pub fn export_sft_dataset(
    benchmark: &Benchmark,
    cache: &SchemaCache,
    out_path: &Path,
) -> std::io::Result<SftExport> {
    let mut out = BufWriter::new(File::create(out_path)?);
    let mut report = SftExport::default();
    for (i, q) in benchmark.questions.iter().enumerate() {
        let record = cache
            .get(&q.db_id)
            .map_err(|e| e.to_string())
            .and_then(|schema| {
                let gold = match &q.gold_tables {
                    Some(g) => g.clone(),
                    None => derive_gold_tables(q, &schema).map_err(|e| e.to_string())?,
                };
                sft_record(&schema, &q.question, &gold).map_err(|e| e.to_string())
            });
        match record {
            Ok(r) => {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
                report.written += 1;
            }
            Err(reason) => {
                warn!(index = i, %reason, "skipping question in fine-tuning export");
                report.skipped.push((i, reason));
            }
        }
    }
    out.flush()?;
    Ok(report)
}
