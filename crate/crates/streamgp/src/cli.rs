//! Experiment commands behind the `streamgp` binary.
//!
//! - `run` — one online training run; writes `manifest.json`, `trace.csv`
//!   (fixed column order), and `summary.json` into `--out`.
//! - `compare` — the same stream under several objectives/orderings over
//!   shared seeds; writes a checkpoint table with mean and standard
//!   deviation across seeds.
//! - `report` — turns trace files into plottable
//!   `(n_seen, cumulative empirical test loss, test bound)` rows.
//! - `fetch` — downloads a CSV (default: the stock-price dataset) and
//!   records its SHA-256 alongside; experiment commands only read local
//!   files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. `compare` honors
//! `STREAMGP_THREADS` to cap run parallelism (default 1, fully sequential).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::data::{
    gen_synthetic, load_csv, make_stream, normalize, ColumnSel, CsvSchema, Dataset, Ordering,
    SyntheticKind,
};
use crate::error::{Error, Result};
use crate::pacbayes::{LossKind, LossSpec};
use crate::trainer::{run_stream, LambdaMode, Objective, RunTrace, StepRecord, TrainConfig};

pub const TRACE_COLUMNS: &str =
    "step,n_seen,train_mse,test_mse,empirical_term,kl_term,constant_term,train_bound,test_bound,wall_time";

const STOCK_URL: &str =
    "https://raw.githubusercontent.com/trungngv/cogp/master/data/fx/fx2007-processed.csv";

#[derive(Parser)]
#[command(
    name = "streamgp",
    version,
    about = "Streaming sparse GP regression with per-step generalization-bound certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one online training experiment and write its trace.
    Run(RunArgs),
    /// Run several configurations over shared seeds and tabulate checkpoints.
    Compare(CompareArgs),
    /// Emit bound-vs-error plot data from existing traces.
    Report(ReportArgs),
    /// Download a dataset CSV and record its checksum.
    Fetch(FetchArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset: sin | cos | csv:<path>
    #[arg(long, default_value = "sin")]
    data: String,

    /// Points to generate for synthetic datasets.
    #[arg(long, default_value_t = 500)]
    n: usize,

    /// Noise standard deviation for synthetic datasets.
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,

    /// Target column for csv data: a 0-based index or a header name
    /// (default: the last column).
    #[arg(long)]
    csv_target: Option<String>,

    /// Treat the first csv row as data, not a header.
    #[arg(long)]
    csv_no_header: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Stream order: iid | sequential
    #[arg(long, default_value = "sequential")]
    order: String,

    /// Objective: pacbayes | baseline-nll
    #[arg(long, default_value = "pacbayes")]
    objective: String,

    /// Number of inducing points M.
    #[arg(long, default_value_t = 20)]
    inducing: usize,

    #[arg(long, default_value_t = 1)]
    batch_size: usize,

    /// Bound confidence parameter.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,

    /// Squared scale of the bounded loss.
    #[arg(long, default_value_t = 0.01)]
    epsilon2: f64,

    /// Bound temperature: "1/m" or a fixed positive value.
    #[arg(long, default_value = "1/m")]
    lambda: String,

    /// Bounded loss: exp | indicator | clip2 | interval
    #[arg(long, default_value = "exp")]
    loss: String,

    #[arg(long, default_value_t = 0.1)]
    lr_hyper: f64,

    #[arg(long, default_value_t = 0.01)]
    lr_var: f64,

    #[arg(long, default_value_t = 1)]
    inner_steps: usize,

    #[arg(long, default_value_t = 200)]
    pretrain_steps: usize,

    #[arg(long, default_value_t = 0.05)]
    pretrain_frac: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    train: TrainArgs,

    /// Output directory for manifest.json, trace.csv, summary.json.
    #[arg(long)]
    out: PathBuf,

    /// Re-run exactly the configuration recorded in a manifest file
    /// (other flags are ignored).
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    train: TrainArgs,

    /// Objectives to compare (repeatable).
    #[arg(long = "objectives", value_delimiter = ',', default_value = "pacbayes,baseline-nll")]
    objectives: Vec<String>,

    /// Orderings to compare (repeatable).
    #[arg(long = "orders", value_delimiter = ',', default_value = "iid")]
    orders: Vec<String>,

    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,

    /// Step checkpoints for the table.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    checkpoints: Vec<u64>,

    /// Output directory for compare.csv and the per-run traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace CSV files produced by `run`.
    #[arg(required = true)]
    traces: Vec<PathBuf>,

    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    /// Source URL.
    #[arg(long, default_value = STOCK_URL)]
    url: String,

    /// Local file to write; a .sha256 file is written alongside.
    #[arg(long)]
    out: PathBuf,
}

/// Where a run's data came from, in enough detail to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSpec {
    pub kind: String,
    pub path: Option<PathBuf>,
    pub n: usize,
    pub noise_sd: f64,
    pub csv_target: Option<String>,
    pub csv_has_header: bool,
}

/// Everything needed to reproduce a run bit-exactly (given the dataset).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub data: DataSpec,
    pub ordering: String,
    pub batch_size: usize,
    pub pretrain_frac: f64,
    pub seed: u64,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    steps: usize,
    n_seen: u64,
    final_record: Option<StepRecord>,
    failures: usize,
    warnings: Vec<String>,
}

/// Entry point used by the binary.
pub fn main_from_env() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    run(&args)
}

/// Parses and executes; returns the process exit code. Testable in-process.
pub fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(args.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage errors, 0 for --help/--version.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Report(args) => cmd_report(args),
        Command::Fetch(args) => cmd_fetch(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_data_spec(args: &DataArgs) -> Result<DataSpec> {
    let (kind, path) = if let Some(p) = args.data.strip_prefix("csv:") {
        ("csv".to_string(), Some(PathBuf::from(p)))
    } else if args.data == "sin" || args.data == "cos" {
        (args.data.clone(), None)
    } else {
        return Err(Error::input(format!(
            "unknown --data {:?} (expected sin|cos|csv:<path>)",
            args.data
        )));
    };
    Ok(DataSpec {
        kind,
        path,
        n: args.n,
        noise_sd: args.noise_sd,
        csv_target: args.csv_target.clone(),
        csv_has_header: !args.csv_no_header,
    })
}

fn build_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    let raw = match spec.kind.as_str() {
        "sin" => gen_synthetic(SyntheticKind::Sin, spec.n, spec.noise_sd, seed)?,
        "cos" => gen_synthetic(SyntheticKind::Cos, spec.n, spec.noise_sd, seed)?,
        "csv" => {
            let path = spec.path.as_ref().expect("csv spec carries a path");
            let target = match &spec.csv_target {
                None => {
                    // Default: last column. Peek at the width via the header
                    // row by loading with index 0 first would misparse; read
                    // the first line directly instead.
                    let first = fs::read_to_string(path)?
                        .lines()
                        .next()
                        .map(|l| l.split(',').count())
                        .unwrap_or(0);
                    if first < 2 {
                        return Err(Error::Schema(format!(
                            "{}: need at least two columns",
                            path.display()
                        )));
                    }
                    ColumnSel::Index(first - 1)
                }
                Some(t) => match t.parse::<usize>() {
                    Ok(i) => ColumnSel::Index(i),
                    Err(_) => ColumnSel::Name(t.clone()),
                },
            };
            let schema = CsvSchema::with_target(target, spec.csv_has_header);
            let ds = load_csv(path, &schema)?;
            if ds.dropped_rows > 0 {
                eprintln!(
                    "warning: dropped {} unparseable or non-finite rows from {}",
                    ds.dropped_rows,
                    path.display()
                );
            }
            ds
        }
        other => return Err(Error::input(format!("unknown data kind {other:?}"))),
    };
    normalize(&raw)
}

fn build_config(train: &TrainArgs, manifest_cfg: Option<TrainConfig>) -> Result<TrainConfig> {
    if let Some(cfg) = manifest_cfg {
        return Ok(cfg);
    }
    if !(train.epsilon2 > 0.0) {
        return Err(Error::input("--epsilon2 must be > 0"));
    }
    let kind = LossKind::parse(&train.loss)?;
    let loss = LossSpec::new(kind, train.epsilon2.sqrt())?;
    let cfg = TrainConfig {
        objective: Objective::parse(&train.objective)?,
        lr_hyper: train.lr_hyper,
        lr_variational: train.lr_var,
        inner_steps_online: train.inner_steps,
        pretrain_steps: train.pretrain_steps,
        delta: train.delta,
        lambda_mode: LambdaMode::parse(&train.lambda)?,
        loss,
        inducing: train.inducing,
        seed: train.seed,
        inject_failure_at: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes records in the documented column order; floats use the shortest
/// round-trip representation.
pub fn write_trace_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_COLUMNS);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.n_seen,
            r.train_mse,
            r.test_mse,
            r.empirical_term,
            r.kl_term,
            r.constant_term,
            r.train_bound_total,
            r.test_bound,
            r.wall_time
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`], naming the offending row on
/// parse failure.
pub fn read_trace_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRACE_COLUMNS => {}
        _ => {
            return Err(Error::Parse(format!(
                "{}: row 1: expected header {TRACE_COLUMNS:?}",
                path.display()
            )))
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse(format!(
                "{}: row {row}: expected 10 fields, found {}",
                path.display(),
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: row {row}: bad number {:?}", path.display(), fields[i])))
        };
        let u = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: row {row}: bad count {:?}", path.display(), fields[i])))
        };
        records.push(StepRecord {
            step: u(0)?,
            n_seen: u(1)?,
            train_mse: f(2)?,
            test_mse: f(3)?,
            empirical_term: f(4)?,
            kl_term: f(5)?,
            constant_term: f(6)?,
            train_bound_total: f(7)?,
            test_bound: f(8)?,
            wall_time: f(9)?,
        });
    }
    Ok(records)
}

fn execute_run(manifest: &RunManifest) -> Result<RunTrace> {
    let ds = build_dataset(&manifest.data, manifest.seed)?;
    let ordering = Ordering::parse(&manifest.ordering)?;
    let stream = make_stream(&ds, ordering, manifest.batch_size, manifest.pretrain_frac, manifest.seed)?;
    run_stream(&stream, &manifest.config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let manifest = match &args.from_manifest {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut m: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            m.trace_path = args.out.join("trace.csv");
            m.summary_path = args.out.join("summary.json");
            m
        }
        None => {
            let data = parse_data_spec(&args.data)?;
            let config = build_config(&args.train, None)?;
            Ordering::parse(&args.train.order)?;
            RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config,
                data,
                ordering: args.train.order.clone(),
                batch_size: args.train.batch_size,
                pretrain_frac: args.train.pretrain_frac,
                seed: args.train.seed,
                trace_path: args.out.join("trace.csv"),
                summary_path: args.out.join("summary.json"),
            }
        }
    };
    if manifest.batch_size == 0 {
        return Err(Error::input("--batch-size must be >= 1"));
    }

    let trace = execute_run(&manifest)?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }

    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    write_trace_csv(&trace.records, &manifest.trace_path)?;
    let summary = RunSummary {
        steps: trace.records.len(),
        n_seen: trace.records.last().map(|r| r.n_seen).unwrap_or(0),
        final_record: trace.records.last().cloned(),
        failures: trace.failures.len(),
        warnings: trace.warnings.clone(),
    };
    fs::write(
        &manifest.summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "run complete: {} steps, trace at {}",
        trace.records.len(),
        manifest.trace_path.display()
    );
    Ok(())
}

/// Value of a record column at a step checkpoint, clamping to the final record
/// when the stream is shorter; the bool flags clamping.
fn at_checkpoint(records: &[StepRecord], t: u64) -> Option<(f64, f64, bool)> {
    if records.is_empty() {
        return None;
    }
    match records.iter().find(|r| r.step == t) {
        Some(r) => Some((r.train_mse, r.test_mse, false)),
        None => {
            let last = records.last().unwrap();
            Some((last.train_mse, last.test_mse, true))
        }
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    if args.seeds == 0 {
        return Err(Error::input("--seeds must be >= 1"));
    }
    let data = parse_data_spec(&args.data)?;
    let mut jobs = Vec::new();
    for objective in &args.objectives {
        for order in &args.orders {
            Objective::parse(objective)?;
            Ordering::parse(order)?;
            for s in 0..args.seeds {
                jobs.push((objective.clone(), order.clone(), args.train.seed + s));
            }
        }
    }

    let threads: usize = std::env::var("STREAMGP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1);

    // Each job is independent and fully determined by its configuration;
    // results are collected by index so thread scheduling cannot reorder
    // anything observable.
    let mut results: Vec<Option<Result<RunTrace>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mx = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let (objective, order, seed) = &jobs[idx];
                let run_one = || -> Result<RunTrace> {
                    let mut train = args.train.clone();
                    train.objective = objective.clone();
                    train.order = order.clone();
                    train.seed = *seed;
                    let config = build_config(&train, None)?;
                    let manifest = RunManifest {
                        tool_version: env!("CARGO_PKG_VERSION").to_string(),
                        config,
                        data: data.clone(),
                        ordering: order.clone(),
                        batch_size: train.batch_size,
                        pretrain_frac: train.pretrain_frac,
                        seed: *seed,
                        trace_path: PathBuf::new(),
                        summary_path: PathBuf::new(),
                    };
                    execute_run(&manifest)
                };
                let res = run_one();
                results_mx.lock().unwrap()[idx] = Some(res);
            });
        }
    });

    let mut traces: Vec<(String, String, u64, RunTrace)> = Vec::new();
    for (job, result) in jobs.into_iter().zip(results.into_iter()) {
        let trace = result.expect("every job ran")?;
        write_trace_csv(
            &trace.records,
            &args.out.join(format!("trace_{}_{}_{}.csv", job.0, job.1, job.2)),
        )?;
        traces.push((job.0, job.1, job.2, trace));
    }

    let mut table = String::from("objective,ordering");
    for t in &args.checkpoints {
        table.push_str(&format!(
            ",train_t{t}_mean,train_t{t}_sd,test_t{t}_mean,test_t{t}_sd"
        ));
    }
    table.push_str(",clamped_checkpoints\n");

    for objective in &args.objectives {
        for order in &args.orders {
            let group: Vec<&RunTrace> = traces
                .iter()
                .filter(|(o, r, _, _)| o == objective && r == order)
                .map(|(_, _, _, t)| t)
                .collect();
            let mut row = format!("{objective},{order}");
            let mut clamped = Vec::new();
            for t in &args.checkpoints {
                let mut train_vals = Vec::new();
                let mut test_vals = Vec::new();
                let mut was_clamped = false;
                for tr in &group {
                    if let Some((train, test, c)) = at_checkpoint(&tr.records, *t) {
                        train_vals.push(train);
                        test_vals.push(test);
                        was_clamped |= c;
                    }
                }
                if train_vals.is_empty() {
                    return Err(Error::input(format!(
                        "no records available for checkpoint t={t}"
                    )));
                }
                if was_clamped {
                    clamped.push(t.to_string());
                }
                let (tm, ts) = mean_sd(&train_vals);
                let (em, es) = mean_sd(&test_vals);
                row.push_str(&format!(",{tm},{ts},{em},{es}"));
            }
            row.push(',');
            row.push_str(&clamped.join(";"));
            row.push('\n');
            table.push_str(&row);
        }
    }

    let table_path = args.out.join("compare.csv");
    fs::write(&table_path, table)?;
    println!("comparison table at {}", table_path.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut out = String::from("trace,n_seen,cumulative_empirical,test_bound\n");
    for path in &args.traces {
        let records = read_trace_csv(path)?;
        for (i, r) in records.iter().enumerate() {
            // The test bound is cumulative empirical + the same constant the
            // train report carries, so the cumulative loss is recoverable.
            let cumulative = r.test_bound - r.constant_term;
            if r.test_bound < cumulative {
                return Err(Error::numerical(format!(
                    "{}: row {}: bound {} below empirical {cumulative}",
                    path.display(),
                    i + 2,
                    r.test_bound
                )));
            }
            out.push_str(&format!(
                "{},{},{},{}\n",
                path.display(),
                r.n_seen,
                cumulative,
                r.test_bound
            ));
        }
    }
    match &args.out {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_fetch(args: FetchArgs) -> Result<()> {
    let mut response = ureq::get(&args.url)
        .call()
        .map_err(|e| Error::Io(std::io::Error::other(format!("fetch {}: {e}", args.url))))?;
    let body = response
        .body_mut()
        .read_to_vec()
        .map_err(|e| Error::Io(std::io::Error::other(format!("read body: {e}"))))?;
    let digest = sha2::Sha256::digest(&body);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let mut file = fs::File::create(&args.out)?;
    file.write_all(&body)?;
    fs::write(
        args.out.with_extension("csv.sha256"),
        format!("{hex}  {}\n", args.out.display()),
    )?;
    println!("wrote {} ({} bytes, sha256 {hex})", args.out.display(), body.len());
    Ok(())
}
