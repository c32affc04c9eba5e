//! Linking recall (exact and subset) and execution accuracy.
//!
//! Result comparison: with a top-level `ORDER BY` in the gold query rows must
//! match in order, otherwise as multisets. Column order is taken as returned.
//! Integers compare exactly; a comparison involving a real uses a relative
//! tolerance of [`REL_TOLERANCE`]; text is exact; NULL equals only NULL.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::Benchmark;
use crate::exec::{self, Cell, Execution, Row};
use crate::pipeline::PipelineTrace;
use crate::sql_scan::has_top_level_order_by;

pub const REL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingOutcome {
    pub index: usize,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
    pub exact: bool,
    pub subset: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingScore {
    pub n_scored: usize,
    pub n_exact: usize,
    pub n_subset: usize,
    /// Predictions for questions without gold tables.
    pub n_skipped: usize,
    pub per_question: Vec<LinkingOutcome>,
}

impl LinkingScore {
    pub fn re(&self) -> f64 {
        ratio(self.n_exact, self.n_scored)
    }

    pub fn rs(&self) -> f64 {
        ratio(self.n_subset, self.n_scored)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn lower(set: &BTreeSet<String>) -> BTreeSet<String> {
    set.iter().map(|s| s.to_lowercase()).collect()
}

/// Scores predicted table sets against the benchmark's gold tables.
pub fn score_linking(predictions: &[(usize, BTreeSet<String>)], benchmark: &Benchmark) -> LinkingScore {
    let mut score = LinkingScore::default();
    for (index, predicted) in predictions {
        let Some(gold) = benchmark
            .questions
            .get(*index)
            .and_then(|q| q.gold_tables.as_ref())
        else {
            score.n_skipped += 1;
            continue;
        };
        let (p, g) = (lower(predicted), lower(gold));
        let exact = p == g;
        let subset = g.is_subset(&p);
        score.n_scored += 1;
        score.n_exact += usize::from(exact);
        score.n_subset += usize::from(subset);
        score.per_question.push(LinkingOutcome {
            index: *index,
            predicted: predicted.clone(),
            gold: gold.clone(),
            exact,
            subset,
        });
    }
    score
}

fn numeric(c: &Cell) -> Option<f64> {
    match c {
        Cell::Integer(i) => Some(*i as f64),
        Cell::Real(f) => Some(*f),
        _ => None,
    }
}

pub fn cells_equal(a: &Cell, b: &Cell) -> bool {
    match (a, b) {
        (Cell::Null, Cell::Null) => true,
        (Cell::Integer(x), Cell::Integer(y)) => x == y,
        (Cell::Text(x), Cell::Text(y)) => x == y,
        (Cell::Blob(x), Cell::Blob(y)) => x == y,
        (Cell::Real(_), Cell::Real(_) | Cell::Integer(_)) | (Cell::Integer(_), Cell::Real(_)) => {
            let (x, y) = (numeric(a).unwrap(), numeric(b).unwrap());
            if x == y {
                return true;
            }
            if !x.is_finite() || !y.is_finite() {
                return false;
            }
            (x - y).abs() <= REL_TOLERANCE * x.abs().max(y.abs())
        }
        _ => false,
    }
}

pub fn rows_equal(a: &Row, b: &Row) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| cells_equal(x, y))
}

fn rank(c: &Cell) -> u8 {
    match c {
        Cell::Null => 0,
        Cell::Integer(_) | Cell::Real(_) => 1,
        Cell::Text(_) => 2,
        Cell::Blob(_) => 3,
    }
}

fn cell_order(a: &Cell, b: &Cell) -> Ordering {
    match (a, b) {
        (Cell::Text(x), Cell::Text(y)) => x.cmp(y),
        (Cell::Blob(x), Cell::Blob(y)) => x.cmp(y),
        _ if rank(a) == 1 && rank(b) == 1 => numeric(a).unwrap().total_cmp(&numeric(b).unwrap()),
        _ => rank(a).cmp(&rank(b)),
    }
}

fn row_order(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cell_order(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Kuhn's augmenting-path matching; true when every gold row pairs with a
/// distinct predicted row.
fn perfect_matching(gold: &[Row], pred: &[Row]) -> bool {
    let adj: Vec<Vec<usize>> = gold
        .iter()
        .map(|g| (0..pred.len()).filter(|&j| rows_equal(g, &pred[j])).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; pred.len()];

    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    (0..gold.len()).all(|i| {
        let mut seen = vec![false; pred.len()];
        augment(i, &adj, &mut seen, &mut owner)
    })
}

/// Compares two result sets. See the module docs for the semantics.
pub fn compare_results(gold: &[Row], pred: &[Row], order_sensitive: bool) -> bool {
    if gold.len() != pred.len() {
        return false;
    }
    if order_sensitive {
        return gold.iter().zip(pred).all(|(a, b)| rows_equal(a, b));
    }
    let mut g: Vec<&Row> = gold.iter().collect();
    let mut p: Vec<&Row> = pred.iter().collect();
    g.sort_by(|a, b| row_order(a, b));
    p.sort_by(|a, b| row_order(a, b));
    if g.iter().zip(&p).all(|(a, b)| rows_equal(a, b)) {
        return true;
    }
    // Sorted pairing can misalign when tolerance-equal reals sort differently
    // across columns; fall back to an exact matching in that case.
    let has_real = gold
        .iter()
        .chain(pred)
        .any(|r| r.iter().any(|c| matches!(c, Cell::Real(_))));
    has_real && perfect_matching(gold, pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExStatus {
    Match,
    Mismatch,
    PredictionError,
    /// Gold query failed or is missing; excluded from the denominator.
    GoldUnavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExOutcome {
    pub index: usize,
    pub status: ExStatus,
    pub matched: bool,
    pub gold_rows: Option<usize>,
    pub predicted_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExScore {
    pub n_scored: usize,
    pub n_correct: usize,
    pub n_skipped: usize,
    pub per_question: Vec<ExOutcome>,
}

impl ExScore {
    pub fn ex(&self) -> f64 {
        ratio(self.n_correct, self.n_scored)
    }
}

/// Scores one prediction against its gold query on the same database.
pub fn score_one(index: usize, gold_sql: Option<&str>, pred_sql: &str, db: &std::path::Path, timeout: Duration) -> ExOutcome {
    let Some(gold_sql) = gold_sql else {
        return ExOutcome {
            index,
            status: ExStatus::GoldUnavailable,
            matched: false,
            gold_rows: None,
            predicted_rows: None,
            note: Some("no gold SQL".into()),
        };
    };
    let gold = match exec::execute(gold_sql, db, timeout) {
        Execution::Ok { rows } => rows,
        Execution::Error { message } => {
            return ExOutcome {
                index,
                status: ExStatus::GoldUnavailable,
                matched: false,
                gold_rows: None,
                predicted_rows: None,
                note: Some(format!("gold query failed: {message}")),
            }
        }
    };
    match exec::execute(pred_sql, db, timeout) {
        Execution::Ok { rows } => {
            let matched = compare_results(&gold, &rows, has_top_level_order_by(gold_sql));
            ExOutcome {
                index,
                status: if matched { ExStatus::Match } else { ExStatus::Mismatch },
                matched,
                gold_rows: Some(gold.len()),
                predicted_rows: Some(rows.len()),
                note: None,
            }
        }
        Execution::Error { message } => ExOutcome {
            index,
            status: ExStatus::PredictionError,
            matched: false,
            gold_rows: Some(gold.len()),
            predicted_rows: None,
            note: Some(message),
        },
    }
}

/// Re-executes gold and predicted SQL for every trace and counts matches.
pub fn score_execution(traces: &[PipelineTrace], benchmark: &Benchmark, timeout: Duration) -> ExScore {
    let outcomes: Vec<ExOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = traces
            .chunks(traces.len().div_ceil(worker_count()).max(1))
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|t| {
                            let q = benchmark.questions.get(t.index);
                            let gold = q.and_then(|q| q.gold_sql.as_deref());
                            let db = benchmark.database_path(&t.db_id);
                            score_one(t.index, gold, &t.final_sql, &db, timeout)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut score = ExScore::default();
    for o in outcomes {
        if o.status == ExStatus::GoldUnavailable {
            score.n_skipped += 1;
        } else {
            score.n_scored += 1;
            score.n_correct += usize::from(o.matched);
        }
        score.per_question.push(o);
    }
    score
}

fn worker_count() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get().min(8))
}

/// Counts of questions left out of a metric's denominator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub linking: usize,
    pub execution: usize,
}

/// `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub re: f64,
    pub rs: f64,
    pub ex: f64,
    pub n: usize,
    pub skipped: Skipped,
}

/// One line of `per_question.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub index: usize,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linking: Option<LinkingOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: ReportSummary,
    pub per_question: Vec<QuestionReport>,
}

pub fn build_report(traces: &[PipelineTrace], linking: &LinkingScore, ex: &ExScore) -> EvalReport {
    let mut by_index: BTreeMap<usize, QuestionReport> = traces
        .iter()
        .map(|t| {
            (
                t.index,
                QuestionReport {
                    index: t.index,
                    db_id: t.db_id.clone(),
                    linking: None,
                    execution: None,
                },
            )
        })
        .collect();
    for l in &linking.per_question {
        if let Some(r) = by_index.get_mut(&l.index) {
            r.linking = Some(l.clone());
        }
    }
    for e in &ex.per_question {
        if let Some(r) = by_index.get_mut(&e.index) {
            r.execution = Some(e.clone());
        }
    }
    EvalReport {
        summary: ReportSummary {
            re: linking.re(),
            rs: linking.rs(),
            ex: ex.ex(),
            n: traces.len(),
            skipped: Skipped {
                linking: linking.n_skipped,
                execution: ex.n_skipped,
            },
        },
        per_question: by_index.into_values().collect(),
    }
}

/// Full evaluation of a set of traces: linking recall from the traces'
/// linked tables, execution accuracy from their final SQL.
pub fn evaluate(traces: &[PipelineTrace], benchmark: &Benchmark, timeout: Duration) -> EvalReport {
    let predictions: Vec<(usize, BTreeSet<String>)> =
        traces.iter().map(|t| (t.index, t.linked.tables.clone())).collect();
    let linking = score_linking(&predictions, benchmark);
    let ex = score_execution(traces, benchmark, timeout);
    build_report(traces, &linking, &ex)
}

/// Plain-text summary table.
pub fn render_table(rows: &[(&str, &ReportSummary)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>7} {:>7} {:>7} {:>6}", "Run", "Re", "Rs", "EX", "n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>7.3} {:>7.3} {:>7.1} {:>6}",
            name,
            s.re,
            s.rs,
            s.ex * 100.0,
            s.n
        );
    }
    out
}
