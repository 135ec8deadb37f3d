mod failure;
mod replay;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use tracehound::bench::{
    build_report, run_benchmark, self_workload, BenchError, BenchPlan, BenchReport, RunOptions,
};
use tracehound::live::placement::PlacementFile;
use tracehound::live::{
    capability_probe, record, AttachMode, LiveError, LiveOutput, LiveSessionConfig,
};
use tracehound::par::Execution;
use tracehound::proctree::KeySpec;

use failure::{Classify, Failure};
use replay::ReplayInput;

#[derive(Parser)]
#[command(
    name = "tracehound",
    version,
    about = "Process-aware profiling and overhead benchmarking"
)]
struct Cli {
    /// Print timing lines and info-level logs.
    #[arg(short, long, global = true)]
    verbose: bool,

    /// Run the analysis folds on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record a command live, then analyze the recording like `replay`.
    Profile(ProfileArgs),
    /// Analyze a recorded JSONL trace.
    Replay(ReplayArgs),
    /// Re-render the statistics table of a saved results.json.
    Report(ReportArgs),
    /// Run a benchmark plan.
    Bench(BenchArgs),
    /// Run the bundled square-root workload.
    Workload(WorkloadArgs),
    /// Print what live tracing this host allows, as JSON.
    Probe,
}

#[derive(Args)]
struct ProfileArgs {
    /// Enable CPU sampling with this period in nanoseconds.
    #[arg(long, value_name = "NS")]
    sample_period: Option<u64>,
    /// Record context switches for off-CPU analysis.
    #[arg(long)]
    sched: bool,
    /// Record fork, exec and exit events.
    #[arg(long)]
    lifecycle: bool,
    #[arg(
        long,
        default_value = "tracepoints",
        value_name = "uprobes|usdt|tracepoints"
    )]
    attach: AttachMode,
    /// Probe placement JSON for the uprobes and usdt attach modes.
    #[arg(long, value_name = "F")]
    placement: Option<PathBuf>,
    /// Symbol map for the analysis step.
    #[arg(long, value_name = "F")]
    symbols: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(last = true, required = true, value_name = "CMD")]
    command: Vec<OsString>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, value_name = "F")]
    events: PathBuf,
    #[arg(long, value_name = "F")]
    symbols: Option<PathBuf>,
    /// Restrict profiles to this task and its descendants.
    #[arg(long, value_name = "PID:TID[:GEN]")]
    scope: Option<KeySpec>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_name = "F")]
    results: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_name = "F")]
    plan: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Do not print the table on stdout.
    #[arg(long)]
    json: bool,
    /// Run unpinned if the plan's core cannot be used.
    #[arg(long)]
    allow_unpinned: bool,
    /// Drop this percentage of runs from each end before summarizing.
    #[arg(long, value_name = "P")]
    trim: Option<f64>,
    /// Attempts per run before a non-zero exit fails the benchmark.
    #[arg(long, default_value_t = 3, value_name = "N")]
    retries: u32,
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long, default_value_t = 1)]
    lo: u64,
    #[arg(long, default_value_t = 100)]
    hi: u64,
    #[arg(long, default_value_t = 20)]
    iters: u32,
    #[arg(long, default_value_t = 1)]
    repeat: u32,
}

struct Ctx {
    verbose: bool,
    exec: Execution,
    started: Instant,
}

impl Ctx {
    fn timing(&self, what: &str) {
        if self.verbose {
            println!(
                "[{:>9.3} ms] {what}",
                self.started.elapsed().as_secs_f64() * 1e3
            );
        }
    }
}

fn write_artifact(dir: &Path, name: &str, body: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, body)
        .with_context(|| path.display().to_string())
        .runtime()
}

fn cmd_replay(ctx: &Ctx, args: &ReplayArgs) -> Result<(), Failure> {
    let input = ReplayInput {
        events: &args.events,
        symbols: args.symbols.as_deref(),
        scope: args.scope,
        exec: ctx.exec,
    };
    let s = replay::run(&input, &args.out)?;
    ctx.timing("replay done");
    println!(
        "{} events, {} tasks, on-cpu {} ns, off-cpu {} ns, {} warnings",
        s.events, s.tasks, s.on_ns, s.off_ns, s.warnings
    );
    Ok(())
}

fn live_failure(e: LiveError) -> Failure {
    match e {
        LiveError::InvalidConfig(_) => Failure::Input(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

fn cmd_profile(ctx: &Ctx, args: &ProfileArgs) -> Result<(), Failure> {
    let events_path = args.out.join("events.jsonl");
    let mut cfg =
        LiveSessionConfig::new(args.command.clone(), LiveOutput::File(events_path.clone()));
    cfg.sample_period_ns = args.sample_period;
    cfg.enable_sampling = args.sample_period.is_some();
    cfg.enable_sched = args.sched;
    cfg.enable_lifecycle = args.lifecycle;
    cfg.attach_mode = args.attach;
    if let Some(p) = &args.placement {
        cfg.placement = Some(PlacementFile::load(p).input()?);
    }
    cfg.validate().map_err(live_failure)?;
    fs::create_dir_all(&args.out)
        .with_context(|| args.out.display().to_string())
        .runtime()?;

    let rec = record(&cfg).map_err(live_failure)?;
    ctx.timing("recording done");
    for w in &rec.warnings {
        log::warn!("{w}");
    }
    println!(
        "recorded {} events, command exited with {}, {} lost records, {} dropped samples",
        rec.events.len(),
        rec.child_exit_code,
        rec.lost_records,
        rec.dropped_samples
    );

    let input = ReplayInput {
        events: &events_path,
        symbols: args.symbols.as_deref(),
        scope: None,
        exec: ctx.exec,
    };
    let s = replay::run(&input, &args.out)?;
    ctx.timing("replay done");
    println!(
        "{} tasks, on-cpu {} ns, off-cpu {} ns, {} warnings",
        s.tasks, s.on_ns, s.off_ns, s.warnings
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let path = &args.results;
    let text = fs::read_to_string(path)
        .with_context(|| path.display().to_string())
        .input()?;
    let report: BenchReport = serde_json::from_str(&text)
        .with_context(|| path.display().to_string())
        .input()?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_bench(ctx: &Ctx, args: &BenchArgs) -> Result<(), Failure> {
    let plan = BenchPlan::load(&args.plan)
        .with_context(|| args.plan.display().to_string())
        .input()?;
    if let Some(p) = args.trim {
        if !(0.0..50.0).contains(&p) {
            return Err(Failure::Input(anyhow!(
                "--trim must be in [0, 50), got {p}"
            )));
        }
    }
    if args.retries == 0 {
        return Err(Failure::Input(anyhow!("--retries must be at least 1")));
    }
    let opts = RunOptions {
        allow_unpinned: args.allow_unpinned,
        retry_cap: args.retries,
    };
    let run = run_benchmark(&plan, &opts).map_err(|e| match e {
        BenchError::Plan(_) => Failure::Input(e.into()),
        _ => Failure::Runtime(e.into()),
    })?;
    ctx.timing("measurement done");
    let report = build_report(&plan, &run, args.trim, ctx.exec).runtime()?;
    for w in &report.warnings {
        log::warn!("{w}");
    }

    let table = report.render_table();
    fs::create_dir_all(&args.out)
        .with_context(|| args.out.display().to_string())
        .runtime()?;
    write_artifact(&args.out, "table.txt", &table)?;
    write_artifact(&args.out, "results.json", &report.results_json())?;
    write_artifact(&args.out, "breakdown.json", &report.breakdown_json())?;
    write_artifact(
        &args.out,
        "breakdown.csv",
        &report.breakdown_csv().runtime()?,
    )?;
    if !args.json {
        print!("{table}");
    }
    ctx.timing("report written");
    Ok(())
}

fn cmd_workload(args: &WorkloadArgs) -> Result<(), Failure> {
    if args.repeat == 0 {
        return Err(Failure::Input(anyhow!("--repeat must be at least 1")));
    }
    let mut checksum = 0.0;
    for _ in 0..args.repeat {
        checksum = self_workload(args.lo, args.hi, args.iters).input()?;
    }
    println!("{checksum:.9}");
    Ok(())
}

fn cmd_probe() -> Result<(), Failure> {
    print!("{}", capability_probe().to_json());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let ctx = Ctx {
        verbose: cli.verbose,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
        started: Instant::now(),
    };
    let result = match &cli.command {
        Command::Profile(a) => cmd_profile(&ctx, a),
        Command::Replay(a) => cmd_replay(&ctx, a),
        Command::Report(a) => cmd_report(a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Workload(a) => cmd_workload(a),
        Command::Probe => cmd_probe(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
