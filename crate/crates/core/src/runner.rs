//! Batch execution of the pipeline over a split.
//!
//! Workers pull question indices from a shared counter; finished traces go to
//! a single writer that appends them to `traces.jsonl` in index order, so the
//! file is identical whatever the worker count. Indices already present in
//! the file are skipped, which makes an interrupted run resumable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::Serialize;

use crate::dataset::{Benchmark, SchemaCache};
use crate::exec::Execution;
use crate::linking::LinkedTables;
use crate::llm::{ChatBackend, RoutingConfig};
use crate::pipeline::{
    run_pipeline, PipelineOptions, PipelineTrace, QuestionContext, SqlAttempt, Stage, StageError,
    StageTimings, TracePrompts, TRACE_VERSION,
};

/// Reads a JSON-lines trace file. A truncated last line (from a killed run)
/// is ignored.
pub fn read_traces(path: &Path) -> io::Result<Vec<PipelineTrace>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<io::Result<_>>()?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(t) => out.push(t),
            Err(_) if i == last => {
                tracing::warn!(path = %path.display(), "ignoring truncated final trace line");
            }
            Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
        }
    }
    Ok(out)
}

/// Rewrites a trace file keeping only complete lines, so appends start clean.
fn repair(path: &Path, traces: &[PipelineTrace]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub struct RunRequest<'a> {
    pub benchmark: &'a Benchmark,
    pub cache: &'a SchemaCache,
    pub routing: &'a RoutingConfig,
    pub backend: &'a dyn ChatBackend,
    pub options: &'a PipelineOptions,
    pub jobs: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub ran: usize,
    pub already_done: usize,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    index: usize,
    #[serde(flatten)]
    timings: &'a StageTimings,
}

fn failed_trace(index: usize, db_id: &str, question: &str, message: String) -> PipelineTrace {
    PipelineTrace {
        version: TRACE_VERSION,
        index,
        db_id: db_id.to_owned(),
        question: question.to_owned(),
        linked: LinkedTables::fixed(BTreeSet::new()),
        description: None,
        attempts: vec![SqlAttempt {
            sql: String::new(),
            execution: Some(Execution::Error {
                message: message.clone(),
            }),
            stage: Stage::Initial,
            no_sql_found: true,
            raw_reply: None,
            call_error: None,
        }],
        final_sql: String::new(),
        prompts: TracePrompts::default(),
        stage_errors: vec![StageError {
            stage: "schema".into(),
            message,
        }],
        timings: StageTimings::default(),
    }
}

/// Runs the pipeline for every index in `req.range` not yet in `traces_path`
/// and appends the traces. Stage timings go to `timings_path`.
pub fn run_split(req: &RunRequest<'_>, traces_path: &Path, timings_path: &Path) -> io::Result<RunSummary> {
    let existing = read_traces(traces_path)?;
    repair(traces_path, &existing)?;
    let done: BTreeSet<usize> = existing.iter().map(|t| t.index).collect();
    let pending: Vec<usize> = req.range.clone().filter(|i| !done.contains(i)).collect();

    let mut traces_out = BufWriter::new(OpenOptions::new().append(true).create(true).open(traces_path)?);
    let mut timings_out = BufWriter::new(OpenOptions::new().append(true).create(true).open(timings_path)?);

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, PipelineTrace)>();
    let jobs = req.jobs.clamp(1, pending.len().max(1));

    std::thread::scope(|scope| -> io::Result<()> {
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&index) = pending.get(slot) else {
                    break;
                };
                let trace = run_one(req, index);
                if tx.send((slot, trace)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: emit in pending order.
        let mut buffered = BTreeMap::new();
        let mut emit = 0;
        for (slot, trace) in rx {
            buffered.insert(slot, trace);
            while let Some(t) = buffered.remove(&emit) {
                serde_json::to_writer(&mut traces_out, &t)?;
                traces_out.write_all(b"\n")?;
                traces_out.flush()?;
                serde_json::to_writer(
                    &mut timings_out,
                    &TimingLine {
                        index: t.index,
                        timings: &t.timings,
                    },
                )?;
                timings_out.write_all(b"\n")?;
                emit += 1;
            }
        }
        timings_out.flush()?;
        Ok(())
    })?;

    Ok(RunSummary {
        ran: pending.len(),
        already_done: req.range.clone().filter(|i| done.contains(i)).count(),
    })
}

fn run_one(req: &RunRequest<'_>, index: usize) -> PipelineTrace {
    let q = &req.benchmark.questions[index];
    let schema = match req.cache.get(&q.db_id) {
        Ok(s) => s,
        Err(e) => return failed_trace(index, &q.db_id, &q.question, e.to_string()),
    };
    if schema.tables.is_empty() {
        return failed_trace(index, &q.db_id, &q.question, "database has no tables".into());
    }
    let db_path = req.benchmark.database_path(&q.db_id);
    let ctx = QuestionContext {
        index,
        question: &q.question,
        schema: &schema,
        db_path: &db_path,
        gold_tables: q.gold_tables.as_ref(),
    };
    run_pipeline(&ctx, req.routing, req.backend, req.options)
}
