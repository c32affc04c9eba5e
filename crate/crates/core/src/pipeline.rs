//! SQL generation, execution and one-round debugging, and the end-to-end
//! per-question pipeline: link → describe → generate → execute → debug.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::admin::{self, SchemaDescription};
use crate::exec::{self, Execution};
use crate::linking::{self, LinkedTables, LinkingCase, DEFAULT_NUM_SHUFFLES};
use crate::llm::{ChatBackend, Component, LlmError, RoutingConfig};
use crate::prompts::{self, IclExemplar, RenderedPrompt};
use crate::schema::{render_foreign_keys, render_schema, DatabaseSchema, ForeignKeyInfo};

pub const TRACE_VERSION: u32 = 1;

/// Foreign keys whose both ends are linked tables, in schema order.
pub fn filter_foreign_keys(schema: &DatabaseSchema, linked: &BTreeSet<String>) -> Vec<ForeignKeyInfo> {
    let has = |t: &str| linked.iter().any(|l| l.eq_ignore_ascii_case(t));
    schema
        .foreign_keys
        .iter()
        .filter(|fk| has(&fk.from_table) && has(&fk.to_table))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Debugged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub sql: String,
    /// `None` until executed.
    pub execution: Option<Execution>,
    pub stage: Stage,
    /// The reply held no SQL.
    #[serde(default)]
    pub no_sql_found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    /// Model call failure, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_error: Option<String>,
}

impl SqlAttempt {
    pub fn errored(&self) -> bool {
        self.execution.as_ref().is_some_and(|e| !e.is_ok())
    }
}

/// Everything the generation and debugging steps need about one question.
#[derive(Debug, Clone, Copy)]
pub struct QuestionContext<'a> {
    pub index: usize,
    pub question: &'a str,
    pub schema: &'a DatabaseSchema,
    pub db_path: &'a Path,
    /// Needed only by [`LinkerMode::Oracle`].
    pub gold_tables: Option<&'a BTreeSet<String>>,
}

fn reply_to_attempt(reply: String, stage: Stage) -> SqlAttempt {
    let sql = prompts::extract_sql(&reply);
    SqlAttempt {
        no_sql_found: sql.is_none(),
        sql: sql.unwrap_or_default(),
        execution: None,
        stage,
        raw_reply: Some(reply),
        call_error: None,
    }
}

pub fn generation_prompt(
    ctx: &QuestionContext<'_>,
    linked: &LinkedTables,
    description: Option<&SchemaDescription>,
) -> Result<RenderedPrompt, crate::schema::SchemaError> {
    let schema_text = render_schema(ctx.schema, Some(&linked.tables))?;
    let fks = render_foreign_keys(&filter_foreign_keys(ctx.schema, &linked.tables));
    Ok(prompts::build_generation_prompt(
        &schema_text,
        description.and_then(SchemaDescription::as_prompt_text),
        &fks,
        ctx.question,
    ))
}

/// Asks the generation model for SQL. The attempt is not executed yet; an
/// unusable reply gives an empty `sql` with `no_sql_found` set.
pub fn generate(
    ctx: &QuestionContext<'_>,
    linked: &LinkedTables,
    description: Option<&SchemaDescription>,
    routing: &RoutingConfig,
    backend: &dyn ChatBackend,
) -> Result<(SqlAttempt, RenderedPrompt), LlmError> {
    assert!(!linked.tables.is_empty(), "generation needs linked tables");
    let prompt = generation_prompt(ctx, linked, description)
        .expect("linked tables are drawn from the schema");
    let completion = backend.complete(routing.route(Component::Generation), &prompt.text)?;
    Ok((reply_to_attempt(completion.text, Stage::Initial), prompt))
}

pub fn execute_attempt(attempt: &mut SqlAttempt, db_path: &Path, timeout: Duration) {
    attempt.execution = Some(if attempt.sql.is_empty() {
        Execution::Error {
            message: attempt
                .call_error
                .clone()
                .unwrap_or_else(|| "no SQL found in model reply".to_owned()),
        }
    } else {
        exec::execute(&attempt.sql, db_path, timeout)
    });
}

pub fn debugging_prompt(
    prior: &SqlAttempt,
    ctx: &QuestionContext<'_>,
    linked: &LinkedTables,
    description: Option<&SchemaDescription>,
    all_foreign_keys: bool,
) -> RenderedPrompt {
    let message = prior
        .execution
        .as_ref()
        .and_then(Execution::error_message)
        .expect("debugging requires a failed attempt");
    let schema_text = render_schema(ctx.schema, Some(&linked.tables))
        .expect("linked tables are drawn from the schema");
    let fks = if all_foreign_keys {
        render_foreign_keys(&ctx.schema.foreign_keys)
    } else {
        render_foreign_keys(&filter_foreign_keys(ctx.schema, &linked.tables))
    };
    prompts::build_debugging_prompt(
        &prior.sql,
        message,
        &schema_text,
        &fks,
        description.and_then(SchemaDescription::as_prompt_text),
        ctx.question,
    )
}

/// Exactly one repair call for a failed attempt. If the call fails or its
/// reply has no SQL, the prior SQL and its outcome are carried over (flagged).
///
/// Panics if `prior` did not fail.
#[allow(clippy::too_many_arguments)]
pub fn debug_once(
    prior: &SqlAttempt,
    ctx: &QuestionContext<'_>,
    linked: &LinkedTables,
    description: Option<&SchemaDescription>,
    routing: &RoutingConfig,
    backend: &dyn ChatBackend,
    all_foreign_keys: bool,
    timeout: Duration,
) -> (SqlAttempt, RenderedPrompt) {
    assert!(prior.errored(), "debug_once called on an attempt that did not fail");
    let prompt = debugging_prompt(prior, ctx, linked, description, all_foreign_keys);
    let mut attempt = match backend.complete(routing.route(Component::Debugging), &prompt.text) {
        Ok(c) => reply_to_attempt(c.text, Stage::Debugged),
        Err(e) => SqlAttempt {
            sql: String::new(),
            execution: None,
            stage: Stage::Debugged,
            no_sql_found: true,
            raw_reply: None,
            call_error: Some(e.to_string()),
        },
    };
    if attempt.no_sql_found {
        attempt.sql = prior.sql.clone();
        attempt.execution = prior.execution.clone();
    } else {
        execute_attempt(&mut attempt, ctx.db_path, timeout);
    }
    (attempt, prompt)
}

/// How the pipeline links tables when linking is enabled.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkerMode {
    /// Several shuffled calls, union of answers.
    #[default]
    ShuffleUnion,
    /// One call in database order.
    Canonical,
    /// One call with three worked examples.
    FewShot(Vec<IclExemplar>),
    /// The question's gold tables, no model call (upper bound for linking).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub num_shuffles: usize,
    pub rng_seed: u64,
    pub linker: LinkerMode,
    pub no_linking: bool,
    pub no_admin: bool,
    pub no_debugging: bool,
    pub exec_timeout: Duration,
    /// Debugging sees every foreign key; generation only the filtered ones.
    pub debug_uses_all_foreign_keys: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            num_shuffles: DEFAULT_NUM_SHUFFLES,
            rng_seed: 0,
            linker: LinkerMode::ShuffleUnion,
            no_linking: false,
            no_admin: false,
            no_debugging: false,
            exec_timeout: exec::DEFAULT_EXEC_TIMEOUT,
            debug_uses_all_foreign_keys: true,
        }
    }
}

/// Seed for one question, so results do not depend on scheduling order.
pub fn question_seed(rng_seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = rng_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub linking_ms: f64,
    pub admin_ms: f64,
    pub generation_ms: f64,
    pub execution_ms: f64,
    pub debugging_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePrompts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admin: Option<String>,
    pub generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debugging: Option<String>,
}

/// Per-question record of every stage. One JSON object per line in
/// `traces.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub version: u32,
    pub index: usize,
    pub db_id: String,
    pub question: String,
    pub linked: LinkedTables,
    pub description: Option<SchemaDescription>,
    pub attempts: Vec<SqlAttempt>,
    pub final_sql: String,
    pub prompts: TracePrompts,
    #[serde(default)]
    pub stage_errors: Vec<StageError>,
    /// Wall-clock timings; written to a separate file so traces stay reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl PipelineTrace {
    pub fn final_attempt(&self) -> Option<&SqlAttempt> {
        self.attempts.last()
    }

    /// True when a model call or the final execution failed.
    pub fn has_failure(&self) -> bool {
        !self.stage_errors.is_empty() || self.final_attempt().is_none_or(SqlAttempt::errored)
    }

    /// Checks the structural contract of a trace.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self.attempts.as_slice() {
            [first] => {
                if first.stage != Stage::Initial {
                    return Err("single attempt must be the initial one".into());
                }
            }
            [first, second] => {
                if first.stage != Stage::Initial || second.stage != Stage::Debugged {
                    return Err("attempt stages out of order".into());
                }
                if !first.errored() {
                    return Err("debugged attempt without a failed initial attempt".into());
                }
            }
            other => return Err(format!("{} attempts recorded", other.len())),
        }
        if self.attempts.iter().any(|a| a.execution.is_none()) {
            return Err("attempt left unexecuted".into());
        }
        if self.final_sql != self.attempts.last().unwrap().sql {
            return Err("final_sql differs from the last attempt".into());
        }
        Ok(())
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs every stage for one question. Stage failures are recorded in the
/// trace; a trace is always returned.
pub fn run_pipeline(
    ctx: &QuestionContext<'_>,
    routing: &RoutingConfig,
    backend: &dyn ChatBackend,
    options: &PipelineOptions,
) -> PipelineTrace {
    let mut errors = Vec::new();
    let mut timings = StageTimings::default();
    let mut record = |stage: &str, message: String| {
        warn!(index = ctx.index, stage, %message, "pipeline stage failed");
        errors.push(StageError {
            stage: stage.to_owned(),
            message,
        });
    };

    let t = Instant::now();
    let linked = if options.no_linking {
        LinkedTables::full_schema(ctx.schema)
    } else {
        let case = LinkingCase::new(ctx.schema, ctx.question);
        let endpoint = routing.route(Component::Linking);
        let result = match &options.linker {
            LinkerMode::ShuffleUnion => linking::link(
                &case,
                backend,
                endpoint,
                options.num_shuffles,
                question_seed(options.rng_seed, ctx.index),
            ),
            LinkerMode::Canonical => linking::link_canonical(&case, backend, endpoint),
            LinkerMode::FewShot(ex) => linking::link_icl(&case, backend, endpoint, ex),
            LinkerMode::Oracle => ctx
                .gold_tables
                .filter(|g| !g.is_empty())
                .map(|g| LinkedTables::fixed(g.clone()))
                .ok_or(linking::LinkError::NoGoldTables),
        };
        result.unwrap_or_else(|e| {
            record("linking", e.to_string());
            let mut full = LinkedTables::full_schema(ctx.schema);
            full.fell_back_to_full_schema = true;
            full
        })
    };
    timings.linking_ms = ms(t);

    let t = Instant::now();
    let mut admin_prompt = None;
    let description = if options.no_admin {
        None
    } else {
        admin_prompt = admin::admin_prompt(&linked, ctx.schema, ctx.question)
            .ok()
            .map(|p| p.text);
        match admin::describe(
            &linked,
            ctx.schema,
            ctx.question,
            backend,
            routing.route(Component::Admin),
        ) {
            Ok(d) => Some(d),
            Err(e) => {
                record("admin", e.to_string());
                None
            }
        }
    };
    timings.admin_ms = ms(t);

    let t = Instant::now();
    let (mut initial, gen_prompt) = match generate(ctx, &linked, description.as_ref(), routing, backend) {
        Ok(v) => v,
        Err(e) => {
            record("generation", e.to_string());
            let prompt = generation_prompt(ctx, &linked, description.as_ref())
                .expect("linked tables are drawn from the schema");
            let attempt = SqlAttempt {
                sql: String::new(),
                execution: None,
                stage: Stage::Initial,
                no_sql_found: true,
                raw_reply: None,
                call_error: Some(format!("generation failed: {e}")),
            };
            (attempt, prompt)
        }
    };
    timings.generation_ms = ms(t);

    let t = Instant::now();
    execute_attempt(&mut initial, ctx.db_path, options.exec_timeout);
    timings.execution_ms = ms(t);

    let mut debug_prompt = None;
    let mut attempts = vec![initial];
    if attempts[0].errored() && !options.no_debugging {
        let t = Instant::now();
        let (fixed, prompt) = debug_once(
            &attempts[0],
            ctx,
            &linked,
            description.as_ref(),
            routing,
            backend,
            options.debug_uses_all_foreign_keys,
            options.exec_timeout,
        );
        if let Some(e) = &fixed.call_error {
            record("debugging", e.clone());
        }
        debug_prompt = Some(prompt.text);
        attempts.push(fixed);
        timings.debugging_ms = ms(t);
    }

    PipelineTrace {
        version: TRACE_VERSION,
        index: ctx.index,
        db_id: ctx.schema.db_id.clone(),
        question: ctx.question.to_owned(),
        final_sql: attempts.last().expect("one attempt").sql.clone(),
        linked,
        description,
        attempts,
        prompts: TracePrompts {
            admin: admin_prompt,
            generation: gen_prompt.text,
            debugging: debug_prompt,
        },
        stage_errors: errors,
        timings,
    }
}
