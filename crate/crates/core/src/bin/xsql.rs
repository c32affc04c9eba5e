use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xsql::config::RunConfig;
use xsql::dataset::{self, Benchmark, SchemaCache};
use xsql::evaluation::{self, EvalReport};
use xsql::linking::{self, LinkedTables, LinkingCase};
use xsql::llm::{ChatBackend, Component, HttpBackend, MockBackend};
use xsql::pipeline::{LinkerMode, PipelineOptions};
use xsql::runner::{self, RunRequest};
use xsql::schema;

const EXIT_FAILURES: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "xsql", version, about = "Text-to-SQL pipeline runner and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the prompt rendering of a SQLite database's schema.
    Extract { db: PathBuf },
    /// Run the full pipeline over a split and score it.
    Run(RunArgs),
    /// Run schema linking only and report Re/Rs.
    Link(LinkArgs),
    /// Write the linking fine-tuning dataset as JSON lines.
    ExportSft(ExportArgs),
    /// Score an existing traces file.
    Score(ScoreArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Question file (JSON array with db_id, question, query).
    #[arg(long)]
    split: PathBuf,
    /// Directory holding <db_id>/<db_id>.sqlite.
    #[arg(long)]
    db_root: PathBuf,
    /// Optional tables.json to cross-check against the databases.
    #[arg(long)]
    tables_json: Option<PathBuf>,
    /// Half-open question index range, e.g. 0..100.
    #[arg(long, value_parser = parse_range)]
    range: Option<Range<usize>>,
}

#[derive(Args)]
struct ModelArgs {
    /// TOML run configuration (endpoints and routing).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a scripted mock backend from this JSON fixture instead of HTTP.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Base seed for the linking shuffles (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shuffled linking calls; overrides the config file.
    #[arg(long)]
    shuffles: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Linker {
    /// Shuffled calls, union of answers.
    Shuffle,
    /// One call in database order.
    Single,
    /// One call with three worked examples.
    Icl,
    /// Gold tables, no model call.
    Oracle,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory; an existing traces.jsonl there is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Use the full schema instead of linking.
    #[arg(long)]
    no_linking: bool,
    /// Skip column descriptions.
    #[arg(long)]
    no_admin: bool,
    /// Keep the first generated query even if it fails.
    #[arg(long)]
    no_debugging: bool,
    #[arg(long, value_enum, default_value = "shuffle")]
    linker: Linker,
    /// Questions processed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct LinkArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "shuffle")]
    linker: Linker,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Destination JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// traces.jsonl written by `run`.
    #[arg(long)]
    traces: PathBuf,
    /// Directory for report.json and per_question.jsonl (default: next to traces).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-query execution timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    exec_timeout: f64,
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or("expected A..B")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

/// Input or configuration problem: exit code 2.
#[derive(Debug)]
struct InputError(anyhow::Error);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn input<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| InputError(e.into()).into())
}

struct Loaded {
    benchmark: Benchmark,
    cache: SchemaCache,
    range: Range<usize>,
}

fn load(args: &SplitArgs) -> Result<Loaded> {
    let mut benchmark = input(dataset::load_split(&args.split, &args.db_root))?;
    let cache = SchemaCache::new(&args.db_root);
    if let Some(tj) = &args.tables_json {
        for w in input(dataset::cross_check_tables_json(tj, &cache))? {
            tracing::warn!("tables.json: {w}");
        }
    }
    let annotation = benchmark.annotate_gold_tables(&cache);
    if !annotation.failures.is_empty() {
        eprintln!(
            "note: {} question(s) have no extractable gold tables and are left out of Re/Rs",
            annotation.failures.len()
        );
    }
    let n = benchmark.questions.len();
    let range = args.range.clone().unwrap_or(0..n);
    if range.end > n {
        return Err(InputError(anyhow::anyhow!("range {range:?} exceeds split size {n}")).into());
    }
    Ok(Loaded {
        benchmark,
        cache,
        range,
    })
}

fn model_setup(args: &ModelArgs) -> Result<(RunConfig, Arc<dyn ChatBackend>)> {
    let mut config = match (&args.config, &args.mock) {
        (Some(path), _) => input(RunConfig::load(path))?,
        (None, Some(_)) => RunConfig::mock(),
        (None, None) => {
            return Err(InputError(anyhow::anyhow!("either --config or --mock is required")).into())
        }
    };
    if let Some(n) = args.shuffles {
        if n == 0 {
            return Err(InputError(anyhow::anyhow!("--shuffles must be at least 1")).into());
        }
        config.defaults.num_shuffles = n;
    }
    let backend: Arc<dyn ChatBackend> = match &args.mock {
        Some(path) => Arc::new(input(
            MockBackend::load(path).with_context(|| format!("loading mock {}", path.display())),
        )?),
        None => Arc::new(HttpBackend::new()),
    };
    Ok((config, backend))
}

fn linker_mode(l: Linker) -> LinkerMode {
    match l {
        Linker::Shuffle => LinkerMode::ShuffleUnion,
        Linker::Single => LinkerMode::Canonical,
        Linker::Icl => LinkerMode::FewShot(linking::default_icl_exemplars()),
        Linker::Oracle => LinkerMode::Oracle,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), &report.summary)?;
    write_jsonl(&dir.join("per_question.jsonl"), &report.per_question)?;
    Ok(())
}

fn cmd_extract(db: &Path) -> Result<ExitCode> {
    let schema = input(schema::introspect(db))?;
    let mut out = std::io::stdout().lock();
    out.write_all(schema::render_schema(&schema, None)?.as_bytes())?;
    if !schema.foreign_keys.is_empty() {
        writeln!(out, "\n-- Foreign keys")?;
        for fk in &schema.foreign_keys {
            writeln!(out, "-- {}", fk.render())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let loaded = load(&args.split)?;
    let (config, backend) = model_setup(&args.model)?;
    fs::create_dir_all(&args.out)?;
    let options = PipelineOptions {
        num_shuffles: config.defaults.num_shuffles,
        rng_seed: args.model.seed.unwrap_or(0),
        linker: linker_mode(args.linker),
        no_linking: args.no_linking,
        no_admin: args.no_admin,
        no_debugging: args.no_debugging,
        exec_timeout: Duration::from_secs_f64(config.defaults.exec_timeout_secs),
        debug_uses_all_foreign_keys: config.defaults.debug_uses_all_foreign_keys,
    };
    let traces_path = args.out.join("traces.jsonl");
    let req = RunRequest {
        benchmark: &loaded.benchmark,
        cache: &loaded.cache,
        routing: &config.routing,
        backend: backend.as_ref(),
        options: &options,
        jobs: args.jobs.unwrap_or(config.defaults.jobs),
        range: loaded.range.clone(),
    };
    let summary = runner::run_split(&req, &traces_path, &args.out.join("timings.jsonl"))?;
    eprintln!(
        "ran {} question(s), {} already present",
        summary.ran, summary.already_done
    );

    let traces = runner::read_traces(&traces_path)?;
    let report = evaluation::evaluate(&traces, &loaded.benchmark, options.exec_timeout);
    write_report(&args.out, &report)?;
    print!("{}", evaluation::render_table(&[(&loaded.benchmark.split_name, &report.summary)]));
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(if traces.iter().any(|t| t.has_failure()) {
        ExitCode::from(EXIT_FAILURES)
    } else {
        ExitCode::SUCCESS
    })
}

#[derive(Serialize)]
struct LinkLine<'a> {
    index: usize,
    db_id: &'a str,
    #[serde(flatten)]
    linked: &'a LinkedTables,
}

#[derive(Serialize)]
struct LinkSummary {
    re: f64,
    rs: f64,
    n: usize,
    skipped: usize,
    failed: usize,
}

fn cmd_link(args: &LinkArgs) -> Result<ExitCode> {
    let loaded = load(&args.split)?;
    let (config, backend) = model_setup(&args.model)?;
    let endpoint = config.routing.route(Component::Linking);
    let seed = args.model.seed.unwrap_or(0);
    let mut lines = Vec::new();
    let mut failed = 0;
    for index in loaded.range.clone() {
        let q = &loaded.benchmark.questions[index];
        let schema = loaded.cache.get(&q.db_id)?;
        let case = LinkingCase {
            schema: &schema,
            question: &q.question,
            gold_tables: q.gold_tables.as_ref(),
        };
        let result = match args.linker {
            Linker::Shuffle => linking::link(
                &case,
                backend.as_ref(),
                endpoint,
                config.defaults.num_shuffles,
                xsql::pipeline::question_seed(seed, index),
            ),
            Linker::Single => linking::link_canonical(&case, backend.as_ref(), endpoint),
            Linker::Icl => linking::link_icl(&case, backend.as_ref(), endpoint, &linking::default_icl_exemplars()),
            Linker::Oracle => q
                .gold_tables
                .clone()
                .map(LinkedTables::fixed)
                .ok_or(linking::LinkError::NoGoldTables),
        };
        let linked = result.unwrap_or_else(|e| {
            tracing::warn!(index, error = %e, "linking failed");
            failed += 1;
            LinkedTables::fixed(BTreeSet::new())
        });
        lines.push((index, q.db_id.clone(), linked));
    }
    let predictions: Vec<(usize, BTreeSet<String>)> =
        lines.iter().map(|(i, _, l)| (*i, l.tables.clone())).collect();
    let score = evaluation::score_linking(&predictions, &loaded.benchmark);

    fs::create_dir_all(&args.out)?;
    let out_lines: Vec<LinkLine> = lines
        .iter()
        .map(|(index, db_id, linked)| LinkLine {
            index: *index,
            db_id,
            linked,
        })
        .collect();
    write_jsonl(&args.out.join("linked.jsonl"), &out_lines)?;
    write_jsonl(&args.out.join("linking_per_question.jsonl"), &score.per_question)?;
    let summary = LinkSummary {
        re: score.re(),
        rs: score.rs(),
        n: score.n_scored,
        skipped: score.n_skipped,
        failed,
    };
    write_json(&args.out.join("linking_report.json"), &summary)?;
    println!("Re = {:.3}  Rs = {:.3}  (n = {})", summary.re, summary.rs, summary.n);
    println!("{}", serde_json::to_string(&summary)?);
    Ok(if failed > 0 {
        ExitCode::from(EXIT_FAILURES)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_export_sft(args: &ExportArgs) -> Result<ExitCode> {
    let loaded = load(&args.split)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut bench = loaded.benchmark.clone();
    bench.questions = bench.questions[loaded.range.clone()].to_vec();
    let report = linking::export_sft_dataset(&bench, &loaded.cache, &args.out)?;
    println!("wrote {} record(s), skipped {}", report.written, report.skipped.len());
    println!(
        "{}",
        serde_json::json!({"written": report.written, "skipped": report.skipped.len()})
    );
    Ok(if report.skipped.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURES)
    })
}

fn cmd_score(args: &ScoreArgs) -> Result<ExitCode> {
    let loaded = load(&args.split)?;
    let traces = input(runner::read_traces(&args.traces))?;
    if let Some(t) = traces.iter().find(|t| t.index >= loaded.benchmark.questions.len()) {
        bail!(InputError(anyhow::anyhow!("trace index {} is outside the split", t.index)));
    }
    let timeout = input(Duration::try_from_secs_f64(args.exec_timeout))?;
    let report = evaluation::evaluate(&traces, &loaded.benchmark, timeout);
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args
            .traces
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&dir)?;
    write_report(&dir, &report)?;
    print!("{}", evaluation::render_table(&[(&loaded.benchmark.split_name, &report.summary)]));
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(if traces.iter().any(|t| t.has_failure()) {
        ExitCode::from(EXIT_FAILURES)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("XSQL_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("error")),
        )
        .init();

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Extract { db } => cmd_extract(db),
        Command::Run(a) => cmd_run(a),
        Command::Link(a) => cmd_link(a),
        Command::ExportSft(a) => cmd_export_sft(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::from(EXIT_FAILURES)
            }
        }
    }
}
