//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;

use common::{count_occurrences, fenced, golden_matches, mock_dev, prompt_cases, scripted, text, Fixture};
use xsql::config::RunConfig;
use xsql::dataset::{Benchmark, SpiderQuestion};
use xsql::evaluation::{self, compare_results, score_linking};
use xsql::exec::{self, Cell, Row};
use xsql::linking::{self, LinkedTables, LinkingCase};
use xsql::llm::{ChatBackend, Completion, FinishReason, LlmError, MockBackend, MockReply, ModelEndpoint};
use xsql::pipeline::{run_pipeline, PipelineOptions, PipelineTrace, QuestionContext, TracePrompts, TRACE_VERSION};
use xsql::schema::introspect;

const TIMEOUT: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_linking_closure(fx: &Fixture) -> Outcome {
    let started = Instant::now();
    let (bench, _) = fx.benchmark("dev");
    let preds: Vec<(usize, BTreeSet<String>)> = bench
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q.gold_tables.clone().unwrap()))
        .collect();
    let score = score_linking(&preds, &bench);
    let elapsed = started.elapsed();
    check(score.n_scored == 20, || format!("scored {} questions", score.n_scored))?;
    check(score.re() == 1.0 && score.rs() == 1.0, || {
        format!("Re = {}, Rs = {}", score.re(), score.rs())
    })?;
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("Re = Rs = 1.000 over 20 questions in {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn gold_trace(index: usize, q: &SpiderQuestion) -> PipelineTrace {
    PipelineTrace {
        version: TRACE_VERSION,
        index,
        db_id: q.db_id.clone(),
        question: q.question.clone(),
        linked: LinkedTables::fixed(q.gold_tables.clone().unwrap_or_default()),
        description: None,
        attempts: vec![],
        final_sql: q.gold_sql.clone().unwrap(),
        prompts: TracePrompts::default(),
        stage_errors: vec![],
        timings: Default::default(),
    }
}

fn oracle_ex_closure(fx: &Fixture) -> Outcome {
    let (bench, _) = fx.benchmark("dev");
    let traces: Vec<PipelineTrace> = bench.questions.iter().enumerate().map(|(i, q)| gold_trace(i, q)).collect();
    let ex = evaluation::score_execution(&traces, &bench, TIMEOUT);
    check(ex.n_scored == 20 && ex.n_skipped == 0, || {
        format!("scored {}, skipped {}", ex.n_scored, ex.n_skipped)
    })?;
    check(ex.ex() == 1.0, || format!("EX = {}", ex.ex()))?;
    Ok("EX = 1.000 over 20 questions".into())
}

fn metric_brute_force() -> Outcome {
    const POOL: [&str; 6] = ["singer", "concert", "stadium", "Staff", "Lessons", "prereq"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut preds = Vec::new();
    let mut questions = Vec::new();
    let mut expected = Vec::new();
    for i in 0..200 {
        let n = rng.gen_range(1..=6);
        let pool = &POOL[..n];
        let pick = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
            let k = rng.gen_range(min..=n);
            let mut v: Vec<&str> = pool.to_vec();
            v.shuffle(rng);
            v[..k]
                .iter()
                .map(|s| if rng.gen_bool(0.3) { s.to_uppercase() } else { s.to_string() })
                .collect()
        };
        let gold = pick(&mut rng, 1);
        let pred = pick(&mut rng, 0);
        // Independent checker: lowercase, then compare element by element.
        let lower = |v: &[String]| v.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
        let (g, p) = (lower(&gold), lower(&pred));
        let subset = g.iter().all(|x| p.contains(x));
        let exact = subset && p.iter().all(|x| g.contains(x));
        expected.push((exact, subset));
        questions.push(SpiderQuestion {
            db_id: "synthetic".into(),
            question: format!("q{i}"),
            gold_sql: None,
            gold_tables: Some(gold.into_iter().collect()),
        });
        preds.push((i, pred.into_iter().collect::<BTreeSet<_>>()));
    }
    let bench = Benchmark {
        split_name: "random".into(),
        questions,
        db_root: Default::default(),
    };
    let score = score_linking(&preds, &bench);
    for (o, (exact, subset)) in score.per_question.iter().zip(&expected) {
        check(o.exact == *exact && o.subset == *subset, || {
            format!("question {}: got ({}, {}), expected ({exact}, {subset})", o.index, o.exact, o.subset)
        })?;
        check(!o.exact || o.subset, || format!("question {}: exact without subset", o.index))?;
    }
    check(score.re() <= score.rs(), || "Re > Rs".into())?;
    let n_exact = expected.iter().filter(|e| e.0).count();
    let n_subset = expected.iter().filter(|e| e.1).count();
    check(score.n_exact == n_exact && score.n_subset == n_subset, || "totals differ".into())?;
    Ok(format!("200/200 pairs agree (exact {n_exact}, subset {n_subset})"))
}

fn full_schema_anchor(fx: &Fixture) -> Outcome {
    let (bench, cache) = fx.benchmark("dev");
    let preds: Vec<(usize, BTreeSet<String>)> = bench
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (i, cache.get(&q.db_id).unwrap().all_table_names()))
        .collect();
    let score = score_linking(&preds, &bench);
    // Count full-set questions from the catalogue directly, not via the schema module.
    let mut full = 0;
    for q in &bench.questions {
        let conn = Connection::open(fx.db_path(&q.db_id)).unwrap();
        let names: BTreeSet<String> = conn
            .prepare("SELECT lower(name) FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%'")
            .unwrap()
            .query_map([], |r| r.get(0))
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let gold: BTreeSet<String> = q.gold_tables.as_ref().unwrap().iter().map(|s| s.to_lowercase()).collect();
        full += usize::from(gold == names);
    }
    let expected_re = full as f64 / bench.questions.len() as f64;
    check(score.rs() == 1.0, || format!("Rs = {}", score.rs()))?;
    check(score.re() == expected_re, || format!("Re = {}, expected {expected_re}", score.re()))?;
    Ok(format!("Rs = 1.000, Re = {:.3} ({full}/20 full-set questions)", score.re()))
}

/// Replies with the first table shown in the prompt.
struct FirstTable;

impl ChatBackend for FirstTable {
    fn complete(&self, _e: &ModelEndpoint, prompt: &str) -> Result<Completion, LlmError> {
        let text = prompt
            .split("CREATE TABLE ")
            .nth(1)
            .and_then(|r| r.split_whitespace().next())
            .unwrap_or("")
            .to_owned();
        Ok(Completion {
            text,
            finish_reason: FinishReason::Stop,
            latency: Duration::ZERO,
            prompt_tokens: None,
            completion_tokens: None,
        })
    }
}

fn shuffle_union(fx: &Fixture) -> Outcome {
    let schemas: Vec<_> = ["driving_school", "college", "concert_singer", "pets_1"]
        .iter()
        .map(|db| introspect(&fx.db_path(db)).unwrap())
        .collect();
    let ep = ModelEndpoint::mock("linking");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..100 {
        let schema = &schemas[trial % schemas.len()];
        let names: Vec<&str> = schema.tables.iter().map(|t| t.name.as_str()).collect();
        let shuffles = rng.gen_range(1..=7);
        let mut replies = Vec::new();
        let mut expected = BTreeSet::new();
        for _ in 0..shuffles {
            let mut pick: Vec<&str> = names.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
            for n in &pick {
                expected.insert(n.to_string());
            }
            if rng.gen_bool(0.3) {
                pick.push("ghost_table");
            }
            replies.push(MockReply::Text(pick.join(", ")));
        }
        let mock = MockBackend::sequence(replies);
        let seed = rng.gen();
        let case = LinkingCase::new(schema, "question?");
        let got = linking::link(&case, &mock, &ep, shuffles, seed).map_err(|e| e.to_string())?;
        let want = if expected.is_empty() { schema.all_table_names() } else { expected };
        check(got.tables == want, || format!("trial {trial}: {:?} != {want:?}", got.tables))?;

        let extra = rng.gen_range(0..4);
        let small = linking::link(&case, &FirstTable, &ep, shuffles, seed).map_err(|e| e.to_string())?;
        let large = linking::link(&case, &FirstTable, &ep, shuffles + extra, seed).map_err(|e| e.to_string())?;
        check(small.tables.is_subset(&large.tables), || format!("trial {trial}: union shrank"))?;

        let replay = MockBackend::sequence([MockReply::Text(String::new())]);
        linking::link(&case, &replay, &ep, shuffles, seed).ok();
        let again = MockBackend::sequence([MockReply::Text(String::new())]);
        linking::link(&case, &again, &ep, shuffles, seed).ok();
        check(replay.requests() == again.requests(), || format!("trial {trial}: prompts differ"))?;
    }
    Ok("100/100 trials: union, monotone, byte-reproducible".into())
}

fn debug_loop_contract(fx: &Fixture) -> Outcome {
    let (bench, cache) = fx.benchmark("dev");
    let routing = RunConfig::mock().routing;
    let cases: [(&str, Box<dyn Fn(&str) -> (Vec<MockReply>, Vec<MockReply>)>); 5] = [
        ("ok", Box::new(|g| (vec![text(&fenced(g))], vec![text("unused")]))),
        ("error->fixed", Box::new(|g| (vec![text(&fenced("SELECT * FROM missing_table"))], vec![text(&fenced(g))]))),
        (
            "error->error",
            Box::new(|_| (vec![text(&fenced("SELECT nope FROM missing"))], vec![text(&fenced("SELECT still FROM missing"))])),
        ),
        ("no sql", Box::new(|g| (vec![text("cannot help")], vec![text(&fenced(g))]))),
        ("no sql twice", Box::new(|_| (vec![text("cannot help")], vec![text("still nothing")]))),
    ];
    let mut total = 0;
    for (name, script) in &cases {
        for (i, q) in bench.questions.iter().enumerate() {
            let schema = cache.get(&q.db_id).unwrap();
            let (generation, debugging) = script(q.gold_sql.as_deref().unwrap());
            let backend = scripted(vec![text(&schema.tables[0].name)], vec![text("")], generation, debugging);
            let db = fx.db_path(&q.db_id);
            let ctx = QuestionContext {
                index: i,
                question: &q.question,
                schema: &schema,
                db_path: &db,
                gold_tables: None,
            };
            let t = run_pipeline(&ctx, &routing, &backend, &PipelineOptions::default());
            t.check_invariants().map_err(|e| format!("{name} q{i}: {e}"))?;
            check(t.attempts.len() <= 2, || format!("{name} q{i}: {} attempts", t.attempts.len()))?;
            check((t.attempts.len() == 2) == t.attempts[0].errored(), || {
                format!("{name} q{i}: second attempt iff first errored")
            })?;
            let debug_calls = backend.requests().iter().filter(|r| r.endpoint == "debugging").count();
            check(debug_calls == t.attempts.len() - 1, || format!("{name} q{i}: {debug_calls} debug calls"))?;
            total += 1;
        }
    }
    Ok(format!("{total}/{total} traces satisfy the attempt contract"))
}

fn prompt_goldens(fx: &Fixture) -> Outcome {
    let cases = prompt_cases(fx);
    for case in &cases {
        golden_matches(case.golden, &case.text)?;
        for (label, input) in &case.inputs {
            let n = count_occurrences(&case.text, input);
            check(n == 1, || format!("{}: {label} appears {n} times", case.golden))?;
        }
    }
    Ok(format!("{} snapshots match; every input appears once", cases.len()))
}

fn ablation_switches(fx: &Fixture) -> Outcome {
    let (bench, cache) = fx.benchmark("dev");
    let routing = RunConfig::mock().routing;
    let run = |options: &PipelineOptions, index: usize| {
        let q = &bench.questions[index];
        let schema = cache.get(&q.db_id).unwrap();
        let db = fx.db_path(&q.db_id);
        let ctx = QuestionContext {
            index,
            question: &q.question,
            schema: &schema,
            db_path: &db,
            gold_tables: None,
        };
        let backend = mock_dev();
        let t = run_pipeline(&ctx, &routing, &backend, options);
        (t, schema, backend.requests())
    };
    for index in 0..bench.questions.len() {
        let (t, schema, log) = run(&PipelineOptions { no_linking: true, ..Default::default() }, index);
        check(t.linked.tables == schema.all_table_names(), || format!("no-linking q{index}: {:?}", t.linked.tables))?;
        check(log.iter().all(|r| r.endpoint != "linking"), || format!("no-linking q{index}: linking called"))?;

        let (t, _, log) = run(&PipelineOptions { no_admin: true, ..Default::default() }, index);
        check(
            t.description.is_none() && !t.prompts.generation.contains("### Column descriptions"),
            || format!("no-admin q{index}: descriptions present"),
        )?;
        check(log.iter().all(|r| r.endpoint != "admin"), || format!("no-admin q{index}: admin called"))?;

        let (t, _, log) = run(&PipelineOptions { no_debugging: true, ..Default::default() }, index);
        check(t.attempts.len() == 1, || format!("no-debugging q{index}: {} attempts", t.attempts.len()))?;
        check(log.iter().all(|r| r.endpoint != "debugging"), || format!("no-debugging q{index}: debug called"))?;
    }
    // The fixture's question 2 fails first time, so the debugging switch is exercised.
    let (t, _, _) = run(&PipelineOptions::default(), 2);
    check(t.attempts.len() == 2, || "control run did not debug".into())?;
    let (t, _, _) = run(&PipelineOptions::default(), 0);
    check(t.prompts.generation.contains("### Column descriptions"), || "control run has no descriptions".into())?;
    Ok("3 switches verified on 20 questions".into())
}

fn compare_table(fx: &Fixture) -> Outcome {
    use Cell::{Integer as I, Null as N, Real as R, Text as T};
    let t = |s: &str| T(s.to_owned());
    let one_third = match exec::execute("SELECT 1.0 / 3", &fx.db_path("world_mini"), TIMEOUT) {
        exec::Execution::Ok { rows } => rows,
        other => return Err(format!("engine query failed: {other:?}")),
    };
    let rows = |v: Vec<Vec<Cell>>| -> Vec<Row> { v };
    let cases: Vec<(&str, Vec<Row>, Vec<Row>, bool, bool)> = vec![
        ("empty vs empty", rows(vec![]), rows(vec![]), false, true),
        ("empty vs one row", rows(vec![]), rows(vec![vec![I(1)]]), false, false),
        ("same integer", rows(vec![vec![I(7)]]), rows(vec![vec![I(7)]]), false, true),
        ("different integer", rows(vec![vec![I(1)]]), rows(vec![vec![I(2)]]), false, false),
        ("reordered, unordered", rows(vec![vec![I(1)], vec![I(2)]]), rows(vec![vec![I(2)], vec![I(1)]]), false, true),
        ("reordered, ordered", rows(vec![vec![I(1)], vec![I(2)]]), rows(vec![vec![I(2)], vec![I(1)]]), true, false),
        ("same order, ordered", rows(vec![vec![I(1)], vec![I(2)]]), rows(vec![vec![I(1)], vec![I(2)]]), true, true),
        (
            "duplicate counts differ",
            rows(vec![vec![t("a")], vec![t("a")], vec![t("b")]]),
            rows(vec![vec![t("a")], vec![t("b")], vec![t("b")]]),
            false,
            false,
        ),
        (
            "duplicates permuted",
            rows(vec![vec![t("a")], vec![t("a")], vec![t("b")]]),
            rows(vec![vec![t("a")], vec![t("b")], vec![t("a")]]),
            false,
            true,
        ),
        ("extra duplicate", rows(vec![vec![t("a")]]), rows(vec![vec![t("a")], vec![t("a")]]), false, false),
        ("null vs null", rows(vec![vec![N]]), rows(vec![vec![N]]), false, true),
        ("null vs zero", rows(vec![vec![N]]), rows(vec![vec![I(0)]]), false, false),
        ("null vs empty text", rows(vec![vec![N]]), rows(vec![vec![t("")]]), false, false),
        ("null vs 'NULL'", rows(vec![vec![N]]), rows(vec![vec![t("NULL")]]), false, false),
        ("real 1.0 vs integer 1", rows(vec![vec![R(1.0)]]), rows(vec![vec![I(1)]]), false, true),
        ("0.1 + 0.2 vs 0.3", rows(vec![vec![R(0.1 + 0.2)]]), rows(vec![vec![R(0.3)]]), false, true),
        ("relative 5e-7", rows(vec![vec![R(100.0)]]), rows(vec![vec![R(100.00005)]]), false, true),
        ("relative 1e-5", rows(vec![vec![R(100.0)]]), rows(vec![vec![R(100.001)]]), false, false),
        ("engine 1/3 vs 0.333333333", one_third.clone(), rows(vec![vec![R(0.333333333)]]), false, true),
        ("engine 1/3 vs 0.3333", one_third, rows(vec![vec![R(0.3333)]]), false, false),
        ("text is case sensitive", rows(vec![vec![t("Paris")]]), rows(vec![vec![t("paris")]]), false, false),
        ("trailing space", rows(vec![vec![t("a")]]), rows(vec![vec![t("a ")]]), false, false),
        ("integer vs text", rows(vec![vec![I(1)]]), rows(vec![vec![t("1")]]), false, false),
        ("column count", rows(vec![vec![I(1), I(2)]]), rows(vec![vec![I(1)]]), false, false),
        ("column order", rows(vec![vec![I(1), t("a")]]), rows(vec![vec![t("a"), I(1)]]), false, false),
        (
            "multi-column rows reordered",
            rows(vec![vec![t("x"), I(1)], vec![t("y"), I(2)], vec![t("z"), N]]),
            rows(vec![vec![t("z"), N], vec![t("x"), I(1)], vec![t("y"), I(2)]]),
            false,
            true,
        ),
        ("large integers exact", rows(vec![vec![I(i64::MAX)]]), rows(vec![vec![I(i64::MAX - 1)]]), false, false),
        ("zero vs negative zero", rows(vec![vec![R(0.0)]]), rows(vec![vec![R(-0.0)]]), false, true),
        (
            "mixed types permuted",
            rows(vec![vec![I(1)], vec![t("a")], vec![N], vec![R(2.5)]]),
            rows(vec![vec![R(2.5)], vec![N], vec![t("a")], vec![I(1)]]),
            false,
            true,
        ),
        (
            "tolerance pairing across columns",
            rows(vec![vec![R(1.0000001), I(2)], vec![R(1.0), I(3)]]),
            rows(vec![vec![R(1.0), I(2)], vec![R(1.0000001), I(3)]]),
            false,
            true,
        ),
    ];
    check(cases.len() == 30, || format!("{} cases", cases.len()))?;
    for (name, gold, pred, ordered, want) in &cases {
        let got = compare_results(gold, pred, *ordered);
        check(got == *want, || format!("{name}: got {got}, expected {want}"))?;
        let back = compare_results(pred, gold, *ordered);
        check(back == *want, || format!("{name} (swapped): got {back}"))?;
    }
    Ok("30/30 cases, both argument orders".into())
}

fn sft_export_determinism(fx: &Fixture) -> Outcome {
    let (bench, cache) = fx.benchmark("train");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let report = linking::export_sft_dataset(&bench, &cache, &a).map_err(|e| e.to_string())?;
    linking::export_sft_dataset(&bench, &cache, &b).map_err(|e| e.to_string())?;
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    check(ta == tb, || "exports differ".into())?;
    check(report.written == bench.questions.len(), || format!("wrote {}", report.written))?;
    for (i, line) in String::from_utf8(ta).unwrap().lines().enumerate() {
        let rec: linking::SftRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let candidates: BTreeSet<String> = rec
            .prompt
            .split("CREATE TABLE ")
            .skip(1)
            .filter_map(|r| r.split_whitespace().next())
            .map(|s| s.to_lowercase())
            .collect();
        for target in rec.target.split(", ") {
            check(candidates.contains(&target.to_lowercase()), || {
                format!("line {i}: target {target} not in prompt schema")
            })?;
        }
    }
    Ok(format!("{} records, byte-identical, all targets grounded", report.written))
}

fn main() -> ExitCode {
    let fx = Fixture::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("oracle linking closure", Box::new(|| oracle_linking_closure(&fx))),
        ("oracle EX closure", Box::new(|| oracle_ex_closure(&fx))),
        ("metric brute-force equivalence", Box::new(metric_brute_force)),
        ("full-schema anchor", Box::new(|| full_schema_anchor(&fx))),
        ("shuffle-union properties", Box::new(|| shuffle_union(&fx))),
        ("debug-loop contract", Box::new(|| debug_loop_contract(&fx))),
        ("prompt golden files", Box::new(|| prompt_goldens(&fx))),
        ("ablation switch fidelity", Box::new(|| ablation_switches(&fx))),
        ("compare_results semantics", Box::new(|| compare_table(&fx))),
        ("SFT export determinism", Box::new(|| sft_export_determinism(&fx))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
